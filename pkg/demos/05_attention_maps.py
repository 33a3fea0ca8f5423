"""
Exporting attention maps
========================

The encoder map shows how each latent reads the input tokens; the decoder
map shows which input tokens each target query attends to. Both are
averaged over heads and rows sum to one. Files land in ``attn_demo/``.
"""
import numpy as np

from perceiver_ts.data import chronological_split, sine_suite_spec, synth_generate, window_array
from perceiver_ts.evaluation import export_attention
from perceiver_ts.formulation import sample_plan
from perceiver_ts.model import Forecaster, ModelConfig
from perceiver_ts.training import TrainConfig, train

bundle = chronological_split(synth_generate(sine_suite_spec()), (0.7, 0.1, 0.2))
cfg = ModelConfig(n_channels=2, lookback=96, horizon=24, patch_len=12, n_latents=4, seed=0)
model = train(Forecaster(cfg), bundle, TrainConfig(epochs=3, warmup_epochs=1, lr_base=1e-3)).model

windows, origins = window_array(bundle, "test", 96, 24)
plan = sample_plan(cfg.grid, 96, "mixed", np.random.default_rng(0))
ex = export_attention(model, windows[0], plan, "attn_demo", channel_names=bundle.series.channel_names,
                      origin=int(origins[0]))
print("targets", plan.target_patches)
print("encoder", ex.encoder.shape, "decoder", ex.decoder.shape)
np.set_printoptions(precision=2, suppress=True, linewidth=140)
print(ex.decoder)
for p in ex.paths:
    print("wrote", p)
