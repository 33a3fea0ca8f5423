"""Patch grids, input/target index plans and reversible instance normalization.

Patch and time indices in :class:`IndexPlan` are 1-based, matching the
usual notation P_i = {(i-1)P+1, ..., iP}. Use ``input_index0`` /
``target_index0`` for array indexing.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, SamplingError

STRATEGIES = ("standard", "contiguous", "disjoint", "mixed")
REVIN_EPS = 1e-5


@dataclass(frozen=True)
class PatchGrid:
    total: int
    patch_len: int

    @property
    def n_patches(self) -> int:
        return self.total // self.patch_len

    def bounds(self, i: int) -> range:
        """Time indices (1-based) covered by patch ``i`` (1-based)."""
        if not 1 <= i <= self.n_patches:
            raise IndexError(f"patch {i} outside 1..{self.n_patches}")
        return range((i - 1) * self.patch_len + 1, i * self.patch_len + 1)


def make_patch_grid(total: int, patch_len: int) -> PatchGrid:
    if patch_len < 1 or total < 1 or total % patch_len:
        raise ConfigError(f"T={total} is not divisible by patch length P={patch_len}")
    return PatchGrid(total, patch_len)


@dataclass(frozen=True)
class IndexPlan:
    n_patches: int
    patch_len: int
    input_patches: tuple[int, ...]
    target_patches: tuple[int, ...]
    strategy: str = "standard"

    def __post_init__(self):
        ip, tp = set(self.input_patches), set(self.target_patches)
        if ip & tp or ip | tp != set(range(1, self.n_patches + 1)):
            raise ContractError(f"plan does not partition 1..{self.n_patches}: "
                                f"I={self.input_patches}, J={self.target_patches}")
        if list(self.input_patches) != sorted(ip) or list(self.target_patches) != sorted(tp):
            raise ContractError("plan patch indices must be sorted and unique")

    @property
    def input_index0(self) -> np.ndarray:
        return np.asarray(self.input_patches, dtype=np.intp) - 1

    @property
    def target_index0(self) -> np.ndarray:
        return np.asarray(self.target_patches, dtype=np.intp) - 1

    def _times(self, patches) -> list[int]:
        p = self.patch_len
        return [t for i in patches for t in range((i - 1) * p + 1, i * p + 1)]

    @property
    def input_times(self) -> list[int]:
        return self._times(self.input_patches)

    @property
    def target_times(self) -> list[int]:
        return self._times(self.target_patches)

    def to_dict(self) -> dict:
        return {"n_patches": self.n_patches, "patch_len": self.patch_len,
                "input_patches": list(self.input_patches), "target_patches": list(self.target_patches),
                "strategy": self.strategy}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "IndexPlan":
        return cls(int(d["n_patches"]), int(d["patch_len"]), tuple(d["input_patches"]),
                   tuple(d["target_patches"]), d.get("strategy", "standard"))

    @classmethod
    def from_json(cls, s: str) -> "IndexPlan":
        return cls.from_dict(json.loads(s))


def plan_from_targets(grid: PatchGrid, targets, strategy: str) -> IndexPlan:
    j = tuple(sorted(int(x) for x in targets))
    i = tuple(x for x in range(1, grid.n_patches + 1) if x not in set(j))
    return IndexPlan(grid.n_patches, grid.patch_len, i, j, strategy)


def standard_plan(grid: PatchGrid, lookback: int) -> IndexPlan:
    """Inputs are the first L/P patches, targets the rest (plain forecasting)."""
    n_in = _n_inputs(grid, lookback)
    return plan_from_targets(grid, range(n_in + 1, grid.n_patches + 1), "standard")


def strategy_for_ratio(separate_ratio: float) -> str:
    """Map the separate-ratio knob {0, 0.5, 1} to disjoint / mixed / contiguous."""
    table = {0.0: "disjoint", 0.5: "mixed", 1.0: "contiguous"}
    try:
        return table[float(separate_ratio)]
    except KeyError:
        raise ConfigError(f"separate ratio must be one of 0, 0.5, 1; got {separate_ratio}") from None


def _n_inputs(grid: PatchGrid, lookback: int) -> int:
    if lookback % grid.patch_len:
        raise ConfigError(f"L={lookback} is not divisible by P={grid.patch_len}")
    n_in = lookback // grid.patch_len
    if not 1 <= n_in <= grid.n_patches - 1:
        raise ConfigError(f"need 1 <= L/P <= N-1, got L/P={n_in}, N={grid.n_patches}")
    return n_in


@functools.lru_cache(maxsize=None)
def _two_run_placements(n: int, a: int, b: int) -> tuple[tuple[int, int], ...]:
    """Start offsets (0-based) of runs of length a and b separated by >= 1 patch."""
    out = []
    for s1 in range(n - a + 1):
        for s2 in range(n - b + 1):
            if s2 >= s1 + a + 1 or s1 >= s2 + b + 1:
                out.append((s1, s2))
    return tuple(out)


def sample_plan(grid: PatchGrid, lookback: int, strategy: str, rng: Optional[np.random.Generator] = None) -> IndexPlan:
    """Draw target patches for one window.

    - ``standard``: the last N - L/P patches (no randomness).
    - ``contiguous``: one run of N - L/P patches at a uniform offset.
    - ``disjoint``: a uniform random subset of N - L/P patches.
    - ``mixed``: two runs of ceil(m/2) and floor(m/2) patches, separated by
      at least one input patch, uniform over all such placements.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    n = grid.n_patches
    m = n - _n_inputs(grid, lookback)
    if strategy == "standard":
        return standard_plan(grid, lookback)
    if rng is None:
        raise ContractError(f"strategy {strategy!r} needs an rng")
    if strategy == "contiguous":
        s = int(rng.integers(0, n - m + 1))
        targets = range(s + 1, s + m + 1)
    elif strategy == "disjoint":
        targets = rng.choice(n, size=m, replace=False) + 1
    else:
        if m < 2:
            raise SamplingError(f"mixed strategy needs at least 2 target patches, got {m}")
        a, b = (m + 1) // 2, m // 2
        options = _two_run_placements(n, a, b)
        if not options:
            raise SamplingError(f"no room for two separated runs of {a} and {b} in {n} patches")
        s1, s2 = options[int(rng.integers(len(options)))]
        targets = [*range(s1 + 1, s1 + a + 1), *range(s2 + 1, s2 + b + 1)]
    return plan_from_targets(grid, targets, strategy)


@dataclass
class RevinState:
    mu: np.ndarray     # (..., C)
    sigma: np.ndarray  # (..., C)
    eps: float = REVIN_EPS


def revin_normalize(x: np.ndarray, eps: float = REVIN_EPS) -> tuple[np.ndarray, RevinState]:
    """Per-channel standardization over the last (time) axis of ``x`` (..., C, L).

    sigma = sqrt(population variance + eps), so a constant channel maps to zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] < 1:
        raise DimensionError(f"revin_normalize expects (..., C, L) with L >= 1, got {x.shape}")
    mu = x.mean(axis=-1)
    sigma = np.sqrt(x.var(axis=-1) + eps)
    return (x - mu[..., None]) / sigma[..., None], RevinState(mu, sigma, eps)


def revin_denormalize(y: np.ndarray, state: RevinState) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[:-1] != state.mu.shape:
        raise DimensionError(f"revin_denormalize: leading shape {y.shape[:-1]} does not match state {state.mu.shape}")
    return y * state.sigma[..., None] + state.mu[..., None]
