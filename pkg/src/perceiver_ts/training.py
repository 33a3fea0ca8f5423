"""Generalized-MSE training with AdamW and linear warmup."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .data import DatasetBundle, window_array
from .errors import ConfigError, TrainingAbort
from .evaluation import forecast_metrics
from .formulation import STRATEGIES, sample_plan
from .model import Forecaster, ModelParams, forward, gather_patches, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

SCHEDULES = ("constant_after_warmup", "cosine")
SEED_STREAMS = ("init", "shuffle", "plan", "dropout")


def derive_seeds(root: int) -> dict[str, int]:
    """Independent per-subsystem seeds: ``SeedSequence(root).spawn(4)`` in the order
    init, shuffle, plan, dropout, each reduced to one 32-bit word."""
    children = np.random.SeedSequence(root).spawn(len(SEED_STREAMS))
    return {name: int(c.generate_state(1)[0]) for name, c in zip(SEED_STREAMS, children)}


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr_base: float = 5e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None
    seed: int = 0
    strategy: str = "mixed"
    lr_schedule: str = "constant_after_warmup"
    stride: int = 1
    eval_batch_size: int = 256

    def validate(self) -> "TrainConfig":
        errs = []
        if self.epochs < 0:
            errs.append("epochs must be >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            errs.append("batch sizes must be >= 1")
        if not self.lr_base > 0:
            errs.append(f"lr_base must be > 0, got {self.lr_base}")
        if self.weight_decay < 0:
            errs.append("weight_decay must be >= 0")
        if self.warmup_epochs < 0 or (self.epochs > 0 and self.warmup_epochs > self.epochs):
            errs.append(f"warmup_epochs must be in [0, epochs], got {self.warmup_epochs}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            errs.append("betas must be in [0, 1) and adam_eps > 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            errs.append("grad_clip must be positive when set")
        if self.strategy not in STRATEGIES:
            errs.append(f"strategy must be one of {STRATEGIES}")
        if self.lr_schedule not in SCHEDULES:
            errs.append(f"lr_schedule must be one of {SCHEDULES}")
        if self.stride < 1:
            errs.append("stride must be >= 1")
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**d)


def loss_generalized(pred: Tensor, target: np.ndarray) -> Tensor:
    """Squared error averaged over every channel and target time step."""
    return T.mse(pred, target)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def no_decay(name: str) -> bool:
    """Layer-norm gains/biases and bias vectors are exempt from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("ln_") or leaf.startswith("b")


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """One AdamW update in place; decoupled decay ``theta -= lr*wd*theta`` precedes the Adam step."""
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise TrainingAbort(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        data = p.data
        if cfg.weight_decay and not no_decay(name):
            data = data * (1.0 - lr * cfg.weight_decay)
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * s
    return total


def lr_at(epoch: int, step_in_epoch: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Per-step linear warmup from 0, then constant or cosine decay to 0."""
    s = epoch * steps_per_epoch + step_in_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    if s < warm:
        return cfg.lr_base * (s + 1) / warm
    if cfg.lr_schedule == "constant_after_warmup":
        return cfg.lr_base
    total = cfg.epochs * steps_per_epoch
    span = max(total - warm, 1)
    progress = min((s - warm + 1) / span, 1.0)
    return cfg.lr_base * 0.5 * (1.0 + math.cos(math.pi * progress))


def target_values(windows: np.ndarray, plans, patch_len: int) -> np.ndarray:
    tgt = np.stack([p.target_index0 for p in plans])
    return gather_patches(windows, tgt, patch_len)


split_metrics = forecast_metrics


@dataclass
class TrainResult:
    model: Forecaster          # best by validation MSE
    last: Forecaster
    history: list[dict]
    best_epoch: Optional[int]
    optimizer: OptimizerState


def train(model: Forecaster, bundle: DatasetBundle, cfg: TrainConfig, *,
          checkpoint_dir: Optional[Path] = None, optimizer: Optional[OptimizerState] = None,
          start_epoch: int = 0) -> TrainResult:
    """Fit ``model`` on the train split, selecting the epoch with the lowest validation MSE.

    Each training window gets a freshly sampled index plan every epoch.
    Validation always uses the standard forecasting plan. ``model`` is
    updated in place and ends up holding the last-epoch weights.
    """
    cfg.validate()
    mcfg = model.config
    seeds = derive_seeds(cfg.seed)
    shuffle_rng = np.random.default_rng(seeds["shuffle"])
    plan_rng = np.random.default_rng(seeds["plan"])
    drop_rng = np.random.default_rng(seeds["dropout"]) if mcfg.dropout > 0 else None
    windows, _ = window_array(bundle, "train", mcfg.lookback, mcfg.horizon, cfg.stride)
    n = len(windows)
    grid = mcfg.grid
    # resuming advances the shuffle/plan streams past the skipped epochs
    for _ in range(start_epoch):
        shuffle_rng.permutation(n)
        for _ in range(n):
            sample_plan(grid, mcfg.lookback, cfg.strategy, plan_rng)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    params = model.params.named()
    opt = optimizer if optimizer is not None else OptimizerState()
    history: list[dict] = []
    best = model.copy()
    best_mse = math.inf
    best_epoch = None
    for epoch in range(start_epoch, cfg.epochs):
        order = shuffle_rng.permutation(n)
        plans_all = [sample_plan(grid, mcfg.lookback, cfg.strategy, plan_rng) for _ in range(n)]
        losses = []
        lr = 0.0
        for step in range(steps_per_epoch):
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            w = windows[idx]
            plans = [plans_all[i] for i in idx]
            pred, _ = forward(w, plans, model.params, mcfg, rng=drop_rng)
            loss = loss_generalized(pred, target_values(w, plans, mcfg.patch_len))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAbort(f"non-finite loss at epoch {epoch}, step {step}")
            T.zero_grad(params.values())
            loss.backward()
            if cfg.grad_clip is not None:
                clip_gradients(params, cfg.grad_clip)
            lr = lr_at(epoch, step, steps_per_epoch, cfg)
            adamw_step(params, opt, lr, cfg)
            losses.append(value)
        T.zero_grad(params.values())
        val_mse, val_mae = forecast_metrics(model, bundle, "val", batch_size=cfg.eval_batch_size)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mse": val_mse,
               "val_mae": val_mae, "lr": lr, "step": opt.step}
        history.append(rec)
        log.info("epoch %d loss %.5f val_mse %.5f", epoch, rec["train_loss"], val_mse)
        if val_mse < best_mse:
            best_mse, best_epoch = val_mse, epoch
            best = model.copy()
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / "best.npz", mcfg, best.params,
                                meta={"epoch": epoch, "val_mse": val_mse})
        if checkpoint_dir is not None:
            save_optimizer_checkpoint(Path(checkpoint_dir) / "last.npz", model, opt, epoch, cfg)
    return TrainResult(best, model, history, best_epoch, opt)


def save_optimizer_checkpoint(path, model: Forecaster, opt: OptimizerState, epoch: int, cfg: TrainConfig) -> None:
    extra = {f"m/{k}": v for k, v in opt.m.items()}
    extra.update({f"v/{k}": v for k, v in opt.v.items()})
    save_checkpoint(path, model.config, model.params, extra_arrays=extra,
                    meta={"epoch": epoch, "step": opt.step, "train": cfg.to_dict()})


def optimizer_from_extra(extra: dict[str, np.ndarray], step: int) -> OptimizerState:
    state = OptimizerState(step=step)
    for k, v in extra.items():
        kind, name = k.split("/", 1)
        (state.m if kind == "m" else state.v)[name] = v.copy()
    return state


def write_history(history: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
