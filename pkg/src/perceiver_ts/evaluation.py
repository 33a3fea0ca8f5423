"""Metrics, forecasting / imputation protocols, attention export and cost profiling.

Protocol functions accept any predictor exposing ``config`` (a
:class:`~perceiver_ts.model.ModelConfig`) and ``predict(windows, plans)``
returning ``(B, C, |J|*P)`` predictions; the predictor must only look at
the input patches of each window.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import DatasetBundle, window_array
from .errors import ConfigError, ContractError, DimensionError
from .formulation import IndexPlan, PatchGrid, plan_from_targets, standard_plan
from .model import ENCODERS, ModelConfig, Forecaster, encode, encode_variant, gather_patches, init_params
from .nn import count_scores
from .tensor import Tensor


def metric_mse(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"metric_mse: shapes differ {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def metric_mae(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"metric_mae: shapes differ {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def config_fingerprint(*parts) -> str:
    blob = json.dumps([p.to_dict() if hasattr(p, "to_dict") else p for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class LastValuePredictor:
    """Naive baseline built only from each window's input patches.

    ``mode="window"`` repeats the most recent observed stretch as long as the
    target gap (for forecasting: the last H values), so a sine whose period
    divides H is predicted exactly. ``mode="point"`` repeats the single
    last observed value. Targets before the first input patch use the
    first observed values instead.
    """

    def __init__(self, config: ModelConfig, mode: str = "window"):
        if mode not in ("window", "point"):
            raise ConfigError(f"mode must be 'window' or 'point', got {mode!r}")
        self.config = config
        self.mode = mode

    def _fill(self, w: np.ndarray, plan: IndexPlan) -> np.ndarray:
        P = self.config.patch_len
        observed = np.zeros(w.shape[1], dtype=bool)
        for i in plan.input_patches:
            observed[(i - 1) * P:i * P] = True
        out = []
        # consecutive target patches form one gap
        runs = np.split(np.array(plan.target_patches), np.where(np.diff(plan.target_patches) > 1)[0] + 1)
        for run in runs:
            a, b = (run[0] - 1) * P, run[-1] * P
            n = b - a
            if a > 0:
                src = np.arange(a - (n if self.mode == "window" else 1), a)
                src = np.clip(src, 0, None)
                idx = src[np.arange(n) % len(src)] if self.mode == "window" else np.full(n, a - 1)
            else:
                idx = b + (np.arange(n) % n if self.mode == "window" else np.zeros(n, dtype=int))
            out.append(w[:, idx])
        return np.concatenate(out, axis=1)

    def predict(self, windows, plans) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        single = windows.ndim == 2
        if single:
            windows = windows[None]
        if isinstance(plans, IndexPlan):
            plans = [plans] * len(windows)
        out = np.stack([self._fill(w, p) for w, p in zip(windows, plans)])
        return out[0] if single else out


def sine_naive_mse(channels: Sequence[tuple[Sequence[tuple[float, float]], float]], horizon: int,
                   mode: str = "window") -> float:
    """Expected forecast MSE of :class:`LastValuePredictor` on sums of sines plus white noise.

    ``channels`` holds one ``(sines, noise_std)`` pair per channel with
    ``sines`` a list of ``(amplitude, period)``. Averaging over a uniformly
    placed origin (cross terms of distinct periods vanish),
    E[(x(t+k) - x(t))^2] = sum A^2 (1 - cos(2 pi k / p)) + 2 sigma^2, where the
    lag k is ``horizon`` for every step in window mode and h = 1..horizon in
    point mode. The result averages over steps and channels.
    """
    lags = np.full(horizon, horizon) if mode == "window" else np.arange(1, horizon + 1)
    per_channel = []
    for sines, sigma in channels:
        v = np.full(horizon, 2.0 * sigma ** 2)
        for a, p in sines:
            v = v + a * a * (1.0 - np.cos(2.0 * np.pi * lags / p))
        per_channel.append(v.mean())
    return float(np.mean(per_channel))


@dataclass
class EvalReport:
    protocol: str
    records: list[dict]
    summary: list[dict]
    fingerprint: str
    runtime: dict = field(default_factory=dict)
    plans: list[dict] = field(default_factory=list)

    def payload(self) -> dict:
        """Everything except wall-clock measurements."""
        return {"protocol": self.protocol, "records": self.records, "summary": self.summary,
                "fingerprint": self.fingerprint, "plans": self.plans}

    def to_json(self) -> str:
        return json.dumps({"payload": self.payload(), "metadata": self.runtime}, sort_keys=True, indent=1)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def _summarize(records: list[dict]) -> list[dict]:
    cells: dict[tuple[int, int], list[dict]] = {}
    for r in records:
        cells.setdefault((r["lookback"], r["horizon"]), []).append(r)
    out = []
    for (L, H), rs in sorted(cells.items()):
        mse = np.array([r["mse"] for r in rs])
        mae = np.array([r["mae"] for r in rs])
        out.append({"lookback": L, "horizon": H, "n_seeds": len(rs),
                    "mse_mean": float(mse.mean()), "mse_std": float(mse.std()),
                    "mae_mean": float(mae.mean()), "mae_std": float(mae.std())})
    return out


def _as_cells(models) -> dict[tuple[int, int], list]:
    if isinstance(models, Mapping):
        return {k: list(v) if isinstance(v, (list, tuple)) else [v] for k, v in models.items()}
    models = list(models) if isinstance(models, (list, tuple)) else [models]
    cells: dict[tuple[int, int], list] = {}
    for m in models:
        cells.setdefault((m.config.lookback, m.config.horizon), []).append(m)
    return cells


def forecast_metrics(model, bundle: DatasetBundle, split: str = "test", *, stride: int = 1,
                     batch_size: int = 256) -> tuple[float, float]:
    """MSE and MAE of standard forecasting, pooled over every window of a split."""
    cfg = model.config
    windows, _ = window_array(bundle, split, cfg.lookback, cfg.horizon, stride)
    plan = standard_plan(cfg.grid, cfg.lookback)
    se = ae = 0.0
    n = 0
    for a in range(0, len(windows), batch_size):
        w = windows[a:a + batch_size]
        diff = model.predict(w, plan) - w[:, :, cfg.lookback:]
        se += float((diff * diff).sum())
        ae += float(np.abs(diff).sum())
        n += diff.size
    return se / n, ae / n


def evaluate_forecast(models, bundle: DatasetBundle, *, seeds: Optional[Sequence[int]] = None,
                      split: str = "test", stride: int = 1, batch_size: int = 256) -> EvalReport:
    """Standard-plan forecasting metrics per (L, H) cell and seed.

    ``models`` is one predictor, a list of predictors (one per seed), or a
    mapping ``(L, H) -> list of predictors``.
    """
    cells = _as_cells(models)
    if not cells:
        raise ContractError("evaluate_forecast: no models given")
    t0 = time.perf_counter()
    records = []
    configs = []
    for (L, H), ms in sorted(cells.items()):
        if not ms:
            raise ContractError(f"no model for cell L={L}, H={H}")
        for k, m in enumerate(ms):
            if (m.config.lookback, m.config.horizon) != (L, H):
                raise ConfigError(f"model for cell ({L}, {H}) has L={m.config.lookback}, H={m.config.horizon}")
            mse, mae = forecast_metrics(m, bundle, split, stride=stride, batch_size=batch_size)
            seed = seeds[k] if seeds is not None else getattr(m.config, "seed", k)
            records.append({"lookback": L, "horizon": H, "seed": int(seed), "mse": mse, "mae": mae})
            configs.append(m.config)
    return EvalReport("forecast", records, _summarize(records), config_fingerprint(*configs, split, stride),
                      runtime={"seconds": time.perf_counter() - t0})


def imputation_plan(grid: PatchGrid, mask_patch_len: int, mask_ratio: float, rng: np.random.Generator) -> IndexPlan:
    """Mask ``floor(mask_ratio * n_blocks)`` interior blocks of ``mask_patch_len`` steps.

    Blocks tile the window; the first and last block always stay observed.
    """
    P = grid.patch_len
    if mask_patch_len < P or mask_patch_len % P:
        raise ConfigError(f"mask patch length {mask_patch_len} must be a multiple of P={P}")
    k = mask_patch_len // P
    if grid.n_patches % k:
        raise ConfigError(f"{grid.n_patches} patches cannot be tiled by mask blocks of {k} patches")
    n_blocks = grid.n_patches // k
    n_mask = math.floor(mask_ratio * n_blocks + 1e-9)
    if n_mask < 1:
        raise ContractError(f"empty target: mask ratio {mask_ratio} masks no block of {n_blocks}")
    if n_mask > n_blocks - 2:
        raise ContractError(f"mask ratio {mask_ratio} leaves no room: {n_mask} of {n_blocks - 2} interior blocks")
    blocks = np.sort(rng.choice(np.arange(1, n_blocks - 1), size=n_mask, replace=False))
    targets = [b * k + i + 1 for b in blocks for i in range(k)]
    return plan_from_targets(grid, targets, "imputation")


def evaluate_imputation(models, bundle: DatasetBundle, *, mask_patch_len: int, mask_ratio: float = 0.25,
                        seed: int = 0, seeds: Optional[Sequence[int]] = None, split: str = "test",
                        stride: int = 1, batch_size: int = 256) -> EvalReport:
    """Patch-masked imputation: error on masked positions only.

    One mask is drawn per window from ``seed`` and shared by every model,
    so comparisons between models are paired.
    """
    cells = _as_cells(models)
    t0 = time.perf_counter()
    records, configs, plan_log = [], [], []
    for (L, H), ms in sorted(cells.items()):
        cfg0 = ms[0].config
        windows, origins = window_array(bundle, split, L, H, stride)
        rng = np.random.default_rng(seed)
        plans = [imputation_plan(cfg0.grid, mask_patch_len, mask_ratio, rng) for _ in range(len(windows))]
        plan_log.append({"lookback": L, "horizon": H, "origins": origins.tolist(),
                         "targets": [list(p.target_patches) for p in plans]})
        target = np.stack([gather_patches(w[None], p.target_index0[None], cfg0.patch_len)[0]
                           for w, p in zip(windows, plans)])
        for k, m in enumerate(ms):
            pred = np.concatenate([m.predict(windows[a:a + batch_size], plans[a:a + batch_size])
                                   for a in range(0, len(windows), batch_size)])
            s = seeds[k] if seeds is not None else getattr(m.config, "seed", k)
            records.append({"lookback": L, "horizon": H, "seed": int(s),
                            "mse": metric_mse(pred, target), "mae": metric_mae(pred, target)})
            configs.append(m.config)
    fp = config_fingerprint(*configs, split, stride, mask_patch_len, mask_ratio, seed)
    return EvalReport("imputation", records, _summarize(records), fp,
                      runtime={"seconds": time.perf_counter() - t0}, plans=plan_log)


# -- attention export -----------------------------------------------------------


@dataclass
class AttnExport:
    encoder: np.ndarray
    decoder: np.ndarray
    meta: dict
    paths: list[Path] = field(default_factory=list)


def _token_axis(plan: IndexPlan, patches, channel_names, origin: int) -> list[dict]:
    P = plan.patch_len
    return [{"channel": ch, "patch": int(i), "time_start": origin + (i - 1) * P, "time_end": origin + i * P}
            for ch in channel_names for i in patches]


def export_attention(model: Forecaster, window: np.ndarray, plan: IndexPlan, out_dir=None, *,
                     stem: str = "attn", channel_names: Optional[Sequence[str]] = None,
                     origin: int = 0) -> AttnExport:
    """Encoder stage-one and decoder attention maps for one window.

    Writes ``<stem>_encoder.csv``, ``<stem>_decoder.csv`` (9 significant
    digits) and ``<stem>_meta.json`` when ``out_dir`` is given.
    """
    cfg = model.config
    if cfg.encoder_variant != "latent_bottleneck":
        raise ConfigError("attention export needs the latent_bottleneck encoder")
    _, trace = model.predict_with_trace(np.asarray(window)[None], [plan])
    enc, dec = trace.encoder_attn[0], trace.decoder_attn[0]
    names = list(channel_names) if channel_names is not None else [f"ch{c + 1}" for c in range(cfg.n_channels)]
    inputs = _token_axis(plan, plan.input_patches, names, origin)
    if cfg.decoder_variant == "direct_latent":
        dec_cols = [{"latent": m} for m in range(cfg.n_latents)]
    else:
        dec_cols = inputs
    meta = {"plan": plan.to_dict(), "origin": origin,
            "encoder": {"shape": list(enc.shape), "rows": [{"latent": m} for m in range(cfg.n_latents)],
                        "cols": inputs},
            "decoder": {"shape": list(dec.shape), "rows": _token_axis(plan, plan.target_patches, names, origin),
                        "cols": dec_cols}}
    out = AttnExport(enc, dec, meta)
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        for name, mat in (("encoder", enc), ("decoder", dec)):
            p = d / f"{stem}_{name}.csv"
            np.savetxt(p, mat, fmt="%.9g", delimiter=",")
            out.paths.append(p)
        p = d / f"{stem}_meta.json"
        p.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        out.paths.append(p)
    return out


# -- cost profiling ------------------------------------------------------------


@dataclass
class CostProfile:
    variant: str
    n_tokens: int
    score_elements: int
    n_parameters: int
    seconds: float
    peak_bytes: int


@dataclass
class ProfileResult:
    profiles: list[CostProfile]
    exponents: dict[str, float]

    def payload(self) -> dict:
        return {"exponents": self.exponents,
                "counts": [{"variant": p.variant, "n_tokens": p.n_tokens, "score_elements": p.score_elements,
                            "n_parameters": p.n_parameters} for p in self.profiles]}

    def to_json(self) -> str:
        meta = [{"variant": p.variant, "n_tokens": p.n_tokens, "seconds": p.seconds, "peak_bytes": p.peak_bytes}
                for p in self.profiles]
        return json.dumps({"payload": self.payload(), "metadata": meta}, sort_keys=True, indent=1)


def fit_exponent(ns: Sequence[float], counts: Sequence[float]) -> float:
    """Least-squares slope of log(count) against log(n)."""
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(counts, float)), 1)[0])


def encoder_score_elements(cfg: ModelConfig, n_inputs: int) -> tuple[int, CostProfile]:
    """Run one encoder pass on random tokens and count attention-score elements."""
    params = init_params(cfg)
    n = cfg.n_channels * n_inputs
    h0 = Tensor(np.random.default_rng(0).normal(size=(1, n, cfg.d_model)))
    tracemalloc.start()
    t0 = time.perf_counter()
    with T.no_grad(), count_scores() as counter:
        if cfg.encoder_variant == "latent_bottleneck":
            encode(h0, params, cfg)
        else:
            encode_variant(h0, params, cfg, n_inputs)
    seconds = time.perf_counter() - t0
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    enc_params = sum(t.size for k, t in params.tensors.items() if k.startswith(("enc", "z0")))
    return counter.elements, CostProfile(cfg.encoder_variant, n, counter.elements, enc_params, seconds, peak)


def profile_variants(token_counts: Sequence[int], *, n_channels: int = 7, patch_len: int = 12,
                     variants: Sequence[str] = ENCODERS, **model_kw) -> ProfileResult:
    """Score-element counts per encoder variant over a grid of token counts.

    Token counts must be multiples of ``n_channels``. The growth exponent in
    the token count is fitted by log-log least squares.
    """
    token_counts = list(token_counts)
    if len(token_counts) < 3:
        raise ConfigError(f"grid too small: exponent fit needs >= 3 token counts, got {len(token_counts)}")
    profiles = []
    exponents = {}
    for v in variants:
        counts = []
        for n in token_counts:
            if n % n_channels:
                raise ConfigError(f"token count {n} is not a multiple of C={n_channels}")
            n_in = n // n_channels
            cfg = ModelConfig(n_channels=n_channels, lookback=n_in * patch_len, horizon=patch_len,
                              patch_len=patch_len, encoder_variant=v, **model_kw).validate()
            elements, prof = encoder_score_elements(cfg, n_in)
            profiles.append(prof)
            counts.append(elements)
        exponents[v] = fit_exponent(token_counts, counts)
    return ProfileResult(profiles, exponents)


def parameter_census(cfg: ModelConfig) -> dict[str, int]:
    """Trainable parameter counts by component."""
    params = init_params(cfg)
    groups = {"embedding": ("w_input", "e_temporal", "e_channel", "q_temporal", "q_channel"),
              "encoder": ("z0", "enc_"), "decoder": ("dec.", "w_output")}
    out = {g: sum(t.size for k, t in params.tensors.items() if k.startswith(pre)) for g, pre in groups.items()}
    out["total"] = params.count()
    return out
