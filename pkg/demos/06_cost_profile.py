"""
How attention cost grows with the number of tokens
==================================================

Count attention-score elements in one encoder pass for each encoder
variant and fit the growth exponent on a log-log scale.
"""
from perceiver_ts.evaluation import parameter_census, profile_variants
from perceiver_ts.model import ModelConfig

res = profile_variants([56, 112, 224, 448], n_channels=7, patch_len=12, max_patches=None)
for p in res.profiles:
    print(f"{p.variant:>20} tokens {p.n_tokens:4d} scores {p.score_elements:9d} {p.seconds * 1e3:7.1f} ms")
for v, e in res.exponents.items():
    print(f"{v:>20} exponent {e:.3f}")

# the decoder reuses one output head per patch, so the horizon does not change the size;
# position tables are sized by max_patches, which must cover (L+H)/P = 68 at H=720
for H in (96, 192, 336, 720):
    cfg = ModelConfig(n_channels=7, lookback=96, horizon=H, patch_len=12, max_patches=72)
    print("H =", H, parameter_census(cfg))
