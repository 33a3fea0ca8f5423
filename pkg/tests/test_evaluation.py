import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perceiver_ts.ablation import AblationSuite, AblationVariant, builtin_suite, run_ablation
from perceiver_ts.data import MultivariateSeries, chronological_split, sine_suite_spec, synth_generate
from perceiver_ts.errors import ConfigError, ContractError, DimensionError
from perceiver_ts.evaluation import (LastValuePredictor, evaluate_forecast, evaluate_imputation, export_attention,
                                     fit_exponent, imputation_plan, metric_mae, metric_mse, parameter_census,
                                     profile_variants, sine_naive_mse)
from perceiver_ts.formulation import make_patch_grid, standard_plan
from perceiver_ts.model import Forecaster, ModelConfig


def sine_bundle(period=24.0, n=655):
    t = np.arange(n)
    return chronological_split(MultivariateSeries(np.sin(2 * np.pi * t / period)[None], ["s"]), (0.6, 0.2, 0.2))


class Oracle:
    """Reads the true target values straight out of each window."""

    def __init__(self, config):
        self.config = config

    def predict(self, windows, plans):
        P = self.config.patch_len
        if not isinstance(plans, list):
            plans = [plans] * len(windows)
        return np.stack([w[:, np.concatenate([np.arange((j - 1) * P, j * P) for j in p.target_patches])]
                         for w, p in zip(windows, plans)])


class Zeros(Oracle):
    def predict(self, windows, plans):
        return np.zeros_like(super().predict(windows, plans))


def cfg(**kw):
    base = dict(n_channels=1, lookback=24, horizon=12, patch_len=12, d_model=8, d_latent=8, n_latents=2,
                n_self_layers=1, n_heads=2)
    base.update(kw)
    return ModelConfig(**base).validate()


@pytest.mark.parametrize("a,b,mse,mae", [
    ([1.0, 2.0], [1.0, 2.0], 0.0, 0.0),
    ([0.0], [2.0], 4.0, 2.0),
    ([3.0, -1.0], [0.0, 0.0], 5.0, 2.0),
])
def test_metric_examples(a, b, mse, mae):
    assert metric_mse(np.array(a), np.array(b)) == mse
    assert metric_mae(np.array(a), np.array(b)) == mae


def test_metric_shape_mismatch():
    with pytest.raises(DimensionError):
        metric_mse(np.zeros(3), np.zeros(4))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 50))
def test_mae_at_most_root_mse(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=n) * 10, rng.normal(size=n)
    assert metric_mae(a, b) <= np.sqrt(metric_mse(a, b)) * (1 + 1e-12)


def test_oracle_scores_zero_everywhere():
    b = sine_bundle()
    rep = evaluate_forecast({(24, 12): [Oracle(cfg())], (24, 24): [Oracle(cfg(horizon=24))]}, b, seeds=[0])
    assert len(rep.records) == 2
    assert all(r["mse"] == 0.0 and r["mae"] == 0.0 for r in rep.records)


def test_repeat_last_period_is_exact():
    b = sine_bundle(24.0)
    rep = evaluate_forecast(LastValuePredictor(cfg(horizon=24)), b, seeds=[0])
    assert rep.records[0]["mse"] < 1e-25


def test_repeat_last_half_period_gives_two():
    # 96 origins: the pooled mean of 4 sin^2 is exactly 2
    b = sine_bundle(24.0)
    rep = evaluate_forecast(LastValuePredictor(cfg(horizon=12)), b, seeds=[0])
    assert rep.records[0]["mse"] == pytest.approx(2.0, abs=1e-12)
    assert rep.records[0]["mse"] == pytest.approx(sine_naive_mse([([(1.0, 24.0)], 0.0)], 12), abs=1e-12)


def test_point_last_value_matches_analytic_average():
    b = sine_bundle(24.0)
    got = evaluate_forecast(LastValuePredictor(cfg(horizon=24), mode="point"), b, seeds=[0]).records[0]["mse"]
    assert got == pytest.approx(sine_naive_mse([([(1.0, 24.0)], 0.0)], 24, mode="point"), rel=1e-9)


def test_records_and_summary_shape():
    b = sine_bundle()
    rep = evaluate_forecast([Oracle(cfg()), Zeros(cfg()), Zeros(cfg())], b, seeds=[0, 1, 2])
    assert len(rep.records) == 3 and rep.summary[0]["n_seeds"] == 3
    for r in rep.records:
        assert r["mae"] <= np.sqrt(r["mse"]) + 1e-12


def test_report_is_deterministic():
    b = chronological_split(synth_generate(sine_suite_spec(length=400, seed=1)), (0.7, 0.1, 0.2))
    m = Forecaster(cfg(n_channels=2, patch_len=6))
    r1 = evaluate_forecast([m], b)
    r2 = evaluate_forecast([m.copy()], b)
    assert json.dumps(r1.payload(), sort_keys=True) == json.dumps(r2.payload(), sort_keys=True)
    parsed = json.loads(r1.to_json())
    assert set(parsed) == {"payload", "metadata"}


def test_imputation_mask_examples():
    g = make_patch_grid(120, 12)
    rng = np.random.default_rng(0)
    plan = imputation_plan(g, 24, 0.4, rng)          # 5 blocks, 2 masked
    assert len(plan.target_patches) == 4
    assert 1 not in plan.target_patches and 2 not in plan.target_patches and 10 not in plan.target_patches
    with pytest.raises(ContractError, match="empty target"):
        imputation_plan(g, 24, 0.1, rng)
    with pytest.raises(ContractError):
        imputation_plan(g, 24, 0.9, rng)
    with pytest.raises(ConfigError):
        imputation_plan(g, 18, 0.4, rng)


def test_imputation_scores_masked_positions_only():
    b = sine_bundle()
    c = cfg(lookback=36, horizon=12)
    rep = evaluate_imputation(Zeros(c), b, mask_patch_len=12, mask_ratio=0.25, seed=3)
    # zeros everywhere: the error is the mean square of the masked values alone
    x = b.series.values[0]
    a = b.test[0]
    masked = []
    for k, targets in enumerate(rep.plans[0]["targets"]):
        for j in targets:
            masked.append(x[a + k + (j - 1) * 12:a + k + j * 12])
    assert rep.records[0]["mse"] == pytest.approx(np.mean(np.concatenate(masked) ** 2), rel=1e-12)


def test_imputation_masks_shared_and_seeded():
    b = sine_bundle()
    c = cfg(lookback=36, horizon=12)
    r1 = evaluate_imputation([Oracle(c), Zeros(c)], b, mask_patch_len=12, seed=5)
    r2 = evaluate_imputation([Zeros(c)], b, mask_patch_len=12, seed=5)
    assert r1.plans == r2.plans and r1.records[0]["mse"] == 0.0
    assert r1.records[1]["mse"] == r2.records[0]["mse"]


def test_constant_series_zero_output_imputes_exactly():
    b = chronological_split(MultivariateSeries(np.full((2, 400), 3.5), ["a", "b"]), (0.6, 0.2, 0.2))
    m = Forecaster(cfg(n_channels=2, lookback=36, horizon=12, patch_len=6))
    m.params["w_output"].data[...] = 0.0
    rep = evaluate_imputation(m, b, mask_patch_len=12)
    assert rep.records[0]["mse"] < 1e-20


def test_attention_export_single_latent(tmp_path):
    c = cfg(n_channels=2, n_latents=1)
    m = Forecaster(c)
    window = np.random.default_rng(0).normal(size=(2, 36))
    plan = standard_plan(c.grid, 24)
    ex = export_attention(m, window, plan, tmp_path / "a")
    assert ex.encoder.shape == (1, 4)
    np.testing.assert_allclose(ex.encoder.sum(axis=1), 1.0, atol=1e-6)
    assert ex.decoder.shape == (2, 4)
    assert sorted(p.name for p in ex.paths) == ["attn_decoder.csv", "attn_encoder.csv", "attn_meta.json"]
    meta = json.loads((tmp_path / "a" / "attn_meta.json").read_text())
    assert len(meta["encoder"]["cols"]) == ex.encoder.shape[1] and len(meta["decoder"]["rows"]) == ex.decoder.shape[0]
    export_attention(m, window, plan, tmp_path / "b")
    for name in ("attn_encoder.csv", "attn_decoder.csv", "attn_meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_attention_export_rejects_other_encoders():
    c = cfg(encoder_variant="full_self_attn")
    with pytest.raises(ConfigError):
        export_attention(Forecaster(c), np.zeros((1, 36)), standard_plan(c.grid, 24))


def test_profile_grid_too_small():
    with pytest.raises(ConfigError, match="grid too small"):
        profile_variants([14, 28], n_channels=7)


def test_profile_exponents_on_small_grid():
    res = profile_variants([14, 28, 56, 112], n_channels=7, patch_len=4, d_model=8, d_latent=8, n_latents=2,
                           n_self_layers=1, n_heads=2, max_patches=None)
    assert res.exponents["full_self_attn"] == pytest.approx(2.0, abs=0.05)
    assert res.exponents["latent_bottleneck"] == pytest.approx(1.0, abs=0.1)
    assert res.exponents["decoupled_self_attn"] < res.exponents["full_self_attn"]


def test_fit_exponent_exact_power():
    assert fit_exponent([1, 2, 4, 8], [3, 12, 48, 192]) == pytest.approx(2.0)


def test_census_does_not_depend_on_horizon():
    a = parameter_census(ModelConfig(n_channels=7, lookback=96, horizon=96, patch_len=12))
    b = parameter_census(ModelConfig(n_channels=7, lookback=96, horizon=192, patch_len=12))
    assert a == b and a["total"] == a["embedding"] + a["encoder"] + a["decoder"]


# -- ablation ---------------------------------------------------------------------

TINY_MODEL = dict(n_channels=2, lookback=24, horizon=12, patch_len=6, d_model=8, d_latent=8, n_latents=2,
                  n_self_layers=1, n_heads=2)
TINY_TRAIN = dict(epochs=1, warmup_epochs=0, batch_size=64, stride=4, lr_base=1e-3)


@pytest.fixture(scope="module")
def tiny_bundle():
    return chronological_split(synth_generate(sine_suite_spec(length=400, seed=2)), (0.7, 0.1, 0.2))


def test_single_variant_suite(tiny_bundle):
    s = AblationSuite("one", [AblationVariant("base")], TINY_MODEL, TINY_TRAIN, seeds=[0])
    rep = run_ablation(s, tiny_bundle)
    assert len(rep.rows) == 1 and rep.winners["forecast_mse"] == "base"


def test_duplicate_variants_give_identical_rows(tiny_bundle):
    s = AblationSuite("dup", [AblationVariant("a"), AblationVariant("b")], TINY_MODEL, TINY_TRAIN, seeds=[0, 1])
    rep = run_ablation(s, tiny_bundle)
    assert rep.row("a")["per_seed"] == rep.row("b")["per_seed"]


def test_failing_variant_is_isolated(tiny_bundle):
    s = AblationSuite("bad", [AblationVariant("broken", model={"n_heads": 3}), AblationVariant("ok")],
                      TINY_MODEL, TINY_TRAIN, seeds=[0])
    rep = run_ablation(s, tiny_bundle)
    assert rep.row("broken")["error"] and rep.row("ok")["error"] is None
    assert rep.winners["forecast_mse"] == "ok"


def test_formulation_suite_reports_both_protocols(tiny_bundle):
    s = builtin_suite("formulation", TINY_MODEL, TINY_TRAIN, seeds=[0], mask_patch_len=6)
    rep = run_ablation(s, tiny_bundle)
    assert set(rep.row("generalized")["means"]) == {"forecast_mse", "forecast_mae", "imputation_mse",
                                                    "imputation_mae"}
    again = AblationSuite.from_dict(json.loads(json.dumps(s.to_dict())))
    assert again == s


def test_unknown_suite():
    with pytest.raises(ConfigError):
        builtin_suite("colour", TINY_MODEL, TINY_TRAIN)
