"""Paired ablation sweeps: every variant is trained on the same data with the same seeds."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .data import DatasetBundle
from .errors import ConfigError
from .evaluation import evaluate_imputation, forecast_metrics
from .model import Forecaster, ModelConfig
from .training import TrainConfig, train

log = logging.getLogger(__name__)

METRICS = ("forecast_mse", "forecast_mae", "imputation_mse", "imputation_mae")


@dataclass
class AblationVariant:
    name: str
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)


@dataclass
class AblationSuite:
    name: str
    variants: list[AblationVariant]
    base_model: dict
    base_train: dict
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    protocols: tuple[str, ...] = ("forecast",)
    mask_patch_len: Optional[int] = None
    mask_ratio: float = 0.25
    mask_seed: int = 0

    def validate(self) -> "AblationSuite":
        if not self.variants:
            raise ConfigError(f"suite {self.name!r} has no variants")
        if not self.seeds:
            raise ConfigError(f"suite {self.name!r} has no seeds")
        bad = set(self.protocols) - {"forecast", "imputation"}
        if bad:
            raise ConfigError(f"unknown protocols: {sorted(bad)}")
        if "imputation" in self.protocols and self.mask_patch_len is None:
            raise ConfigError("imputation protocol needs mask_patch_len")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["protocols"] = list(self.protocols)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSuite":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown suite keys: {', '.join(unknown)}")
        d = dict(d)
        d["variants"] = [AblationVariant(**v) for v in d.get("variants", [])]
        d["protocols"] = tuple(d.get("protocols", ("forecast",)))
        return cls(**d)


@dataclass
class AblationReport:
    suite: str
    rows: list[dict]
    winners: dict[str, Optional[str]]
    runtime: dict = field(default_factory=dict)

    def row(self, variant: str) -> dict:
        for r in self.rows:
            if r["variant"] == variant:
                return r
        raise KeyError(variant)

    def payload(self) -> dict:
        return {"suite": self.suite, "rows": self.rows, "winners": self.winners}

    def to_json(self) -> str:
        return json.dumps({"payload": self.payload(), "metadata": self.runtime}, sort_keys=True, indent=1)


def _cache_key(mcfg: ModelConfig, tcfg: TrainConfig) -> str:
    return json.dumps([mcfg.to_dict(), tcfg.to_dict()], sort_keys=True)


def train_cached(mcfg: ModelConfig, tcfg: TrainConfig, bundle: DatasetBundle,
                 cache: Optional[dict] = None) -> Forecaster:
    """Train (or fetch from ``cache``) the best-validation model for one config pair."""
    key = _cache_key(mcfg, tcfg)
    if cache is not None and key in cache:
        return cache[key]
    model = train(Forecaster(mcfg), bundle, tcfg).model
    if cache is not None:
        cache[key] = model
    return model


def run_ablation(suite: AblationSuite, bundle: DatasetBundle, *, cache: Optional[dict] = None) -> AblationReport:
    """Train and evaluate every variant under every seed.

    A variant that fails (bad config, aborted training) gets an ``error``
    row; the others still run. ``winners`` names the variant with the lowest
    mean for each metric.
    """
    suite.validate()
    rows = []
    seconds = {}
    for var in suite.variants:
        t0 = time.perf_counter()
        row = {"variant": var.name, "model": var.model, "train": var.train, "error": None, "per_seed": [],
               "means": {}}
        try:
            models = []
            for s in suite.seeds:
                mcfg = ModelConfig.from_dict({**suite.base_model, **var.model, "seed": s}).validate()
                tcfg = TrainConfig.from_dict({**suite.base_train, **var.train, "seed": s}).validate()
                models.append(train_cached(mcfg, tcfg, bundle, cache))
            imp = None
            if "imputation" in suite.protocols:
                imp = evaluate_imputation(models, bundle, mask_patch_len=suite.mask_patch_len,
                                          mask_ratio=suite.mask_ratio, seed=suite.mask_seed, seeds=suite.seeds)
            for k, (s, m) in enumerate(zip(suite.seeds, models)):
                rec = {"seed": s}
                if "forecast" in suite.protocols:
                    rec["forecast_mse"], rec["forecast_mae"] = forecast_metrics(m, bundle, "test")
                if imp is not None:
                    rec["imputation_mse"] = imp.records[k]["mse"]
                    rec["imputation_mae"] = imp.records[k]["mae"]
                row["per_seed"].append(rec)
            for metric in METRICS:
                vals = [r[metric] for r in row["per_seed"] if metric in r]
                if vals:
                    row["means"][metric] = float(np.mean(vals))
        except Exception as exc:  # isolate the failure to this variant
            log.warning("variant %s failed: %s", var.name, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
            row["per_seed"], row["means"] = [], {}
        seconds[var.name] = time.perf_counter() - t0
        rows.append(row)
    winners = {}
    for metric in METRICS:
        scored = [(r["means"][metric], r["variant"]) for r in rows if metric in r["means"]]
        if scored:
            winners[metric] = min(scored)[1]
    return AblationReport(suite.name, rows, winners, runtime={"seconds": seconds})


def builtin_suite(name: str, base_model: dict, base_train: dict, seeds=(0, 1, 2, 3, 4), *,
                  mask_patch_len: Optional[int] = None) -> AblationSuite:
    """Named comparisons: formulation, decoder, encoder, pe, sampling."""
    V = AblationVariant
    table = {
        "formulation": [V("standard", train={"strategy": "standard"}), V("generalized", train={"strategy": "mixed"})],
        "decoder": [V("query_decoder", model={"decoder_variant": "query_crossattn"}),
                    V("direct_latent", model={"decoder_variant": "direct_latent"})],
        "encoder": [V(e, model={"encoder_variant": e})
                    for e in ("latent_bottleneck", "full_self_attn", "decoupled_self_attn")],
        "pe": [V("shared", model={"pe_sharing": "shared"}), V("separate", model={"pe_sharing": "separate"})],
        "sampling": [V(s, train={"strategy": s}) for s in ("contiguous", "disjoint", "mixed")],
    }
    if name not in table:
        raise ConfigError(f"unknown suite {name!r}; expected one of {sorted(table)}")
    protocols = ("forecast", "imputation") if name == "formulation" else ("forecast",)
    if "imputation" in protocols and mask_patch_len is None:
        mask_patch_len = 2 * base_model["patch_len"]
    return AblationSuite(name, table[name], dict(base_model), dict(base_train), list(seeds), protocols,
                         mask_patch_len).validate()
