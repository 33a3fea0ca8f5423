"""Series ingestion, synthetic generation, chronological splits and windowing."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, NonNumericCellError, RaggedRowError, TooFewRowsError

SPLITS = ("train", "val", "test")


@dataclass
class MultivariateSeries:
    values: np.ndarray  # (C, T), channel-major
    channel_names: list[str]
    timestamps: Optional[list[str]] = None
    frequency_hint: Optional[str] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DataError(f"values must be (C, T) with C >= 1, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise DataError("series contains NaN or Inf")
        if len(self.channel_names) != self.values.shape[0]:
            raise DataError(f"{len(self.channel_names)} channel names for {self.values.shape[0]} channels")
        if self.timestamps is not None and len(self.timestamps) != self.values.shape[1]:
            raise DataError("timestamp count does not match series length")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass
class DatasetBundle:
    series: MultivariateSeries
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]
    split_ratio: tuple[float, float, float]
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)

    def __post_init__(self):
        a, b = self.train
        x = self.series.values[:, a:b]
        self.mean = x.mean(axis=1)
        self.std = x.std(axis=1)

    def range(self, split: str) -> tuple[int, int]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return getattr(self, split)

    def standardized(self) -> "DatasetBundle":
        """Copy of the bundle with every channel z-scored by train-split statistics."""
        std = np.where(self.std > 0, self.std, 1.0)
        s = self.series
        values = (s.values - self.mean[:, None]) / std[:, None]
        series = MultivariateSeries(values, list(s.channel_names), s.timestamps, s.frequency_hint)
        return DatasetBundle(series, self.train, self.val, self.test, self.split_ratio)


@dataclass
class Window:
    x: np.ndarray  # (C, L + H)
    origin: int


# -- CSV ------------------------------------------------------------------


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, *, header: Optional[bool] = None, date_column: Optional[bool] = None,
             frequency_hint: Optional[str] = None) -> MultivariateSeries:
    """Read a comma-separated file of numeric channels into a channel-major series.

    ``header`` and ``date_column`` are detected when left as None: the first
    row is a header if any cell after the first is non-numeric or the first
    cell reads ``date``; the first column holds timestamps if its first data
    cell is non-numeric.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise TooFewRowsError(f"{path}: file is empty")
    first = [c.strip() for c in rows[0]]
    if header is None:
        header = first[0].lower() == "date" or not all(_is_number(c) for c in first[1:])
    names = first if header else None
    data = rows[1:] if header else rows
    if len(data) < 2:
        raise TooFewRowsError(f"{path}: need at least 2 data rows, found {len(data)}")
    width = len(data[0])
    if date_column is None:
        date_column = (names is not None and names[0].lower() == "date") or not _is_number(data[0][0].strip())
    start = 1 if date_column else 0
    if width - start < 1:
        raise DataError(f"{path}: no numeric channel columns")
    if names is not None and len(names) != width:
        raise RaggedRowError(f"{path}: header has {len(names)} columns, first data row has {width}")
    values = np.empty((len(data), width - start))
    stamps = [] if date_column else None
    for r, row in enumerate(data):
        line = r + (2 if header else 1)
        if len(row) != width:
            raise RaggedRowError(f"{path}:{line}: expected {width} columns, found {len(row)}")
        if date_column:
            stamps.append(row[0].strip())
        for c, cell in enumerate(row[start:]):
            try:
                v = float(cell.strip())
            except ValueError:
                raise NonNumericCellError(f"{path}:{line}: column {c + start + 1} is not numeric: {cell!r}") from None
            if not math.isfinite(v):
                raise NonNumericCellError(f"{path}:{line}: column {c + start + 1} is missing or non-finite: {cell!r}")
            values[r, c] = v
    if names is None:
        channel_names = [f"ch{i + 1}" for i in range(width - start)]
    else:
        channel_names = names[start:]
    return MultivariateSeries(values.T.copy(), channel_names, stamps, frequency_hint)


def write_csv(series: MultivariateSeries, path) -> None:
    """Write a loader-compatible CSV with a ``date`` column."""
    stamps = series.timestamps or [str(t) for t in range(series.length)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *series.channel_names])
        for t in range(series.length):
            w.writerow([stamps[t], *(repr(float(v)) for v in series.values[:, t])])


# -- splits and windows -----------------------------------------------------


def chronological_split(series: MultivariateSeries, ratio: Sequence[float] = (0.7, 0.1, 0.2)) -> DatasetBundle:
    """Contiguous train/val/test ranges with boundaries at floor(T * cumulative ratio)."""
    ratio = tuple(float(r) for r in ratio)
    if len(ratio) != 3 or any(r < 0 for r in ratio) or abs(math.fsum(ratio) - 1.0) > 1e-9:
        raise ConfigError(f"split ratio must be three non-negative fractions summing to 1, got {ratio}")
    n = series.length
    # tolerance absorbs binary-fraction error, e.g. 0.7 + 0.1 = 0.7999999999999999
    b1 = math.floor(n * ratio[0] + 1e-9)
    b2 = math.floor(n * (ratio[0] + ratio[1]) + 1e-9)
    bounds = ((0, b1), (b1, b2), (b2, n))
    for name, (a, b) in zip(SPLITS, bounds):
        if b <= a:
            raise ConfigError(f"{name} split is empty for T={n}, ratio={ratio}")
    return DatasetBundle(series, *bounds, split_ratio=ratio)


def count_windows(length: int, lookback: int, horizon: int, stride: int = 1) -> int:
    width = lookback + horizon
    if width > length:
        return 0
    return (length - width) // stride + 1


def iter_windows(bundle: DatasetBundle, split: str, lookback: int, horizon: int,
                 stride: int = 1) -> Iterator[Window]:
    """Yield windows of width ``lookback + horizon`` from one split, in time order."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    a, b = bundle.range(split)
    if lookback + horizon > b - a:
        raise ConfigError(f"L + H = {lookback} + {horizon} exceeds {split} split length {b - a}")
    width = lookback + horizon
    values = bundle.series.values
    for origin in range(a, b - width + 1, stride):
        yield Window(values[:, origin:origin + width].copy(), origin)


def window_array(bundle: DatasetBundle, split: str, lookback: int, horizon: int,
                 stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """All windows of a split stacked as ``(n, C, L + H)`` plus their origins."""
    wins = list(iter_windows(bundle, split, lookback, horizon, stride))
    return np.stack([w.x for w in wins]), np.array([w.origin for w in wins])


# -- synthetic data -----------------------------------------------------------


@dataclass
class SineSpec:
    period: float
    amplitude: float = 1.0
    phase: float = 0.0


@dataclass
class ChannelSpec:
    sines: list[SineSpec] = field(default_factory=list)
    intercept: float = 0.0
    slope: float = 0.0
    noise_std: float = 0.0
    ar_coef: float = 0.0
    ar_std: float = 0.0
    lag_source: Optional[int] = None
    lag: int = 0
    lag_gain: float = 1.0


@dataclass
class SynthSpec:
    length: int
    channels: list[ChannelSpec]
    seed: int = 0
    start: str = "2020-01-01T00:00:00"
    freq_minutes: int = 60

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        allowed = {"length", "channels", "seed", "start", "freq_minutes"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(f"unknown synth keys: {', '.join(unknown)}")
        if "length" not in d or "channels" not in d:
            raise ConfigError("synth spec needs 'length' and 'channels'")
        channels = []
        ch_allowed = {f for f in ChannelSpec.__dataclass_fields__}
        for i, c in enumerate(d["channels"]):
            bad = sorted(set(c) - ch_allowed)
            if bad:
                raise ConfigError(f"channel {i}: unknown keys: {', '.join(bad)}")
            c = dict(c)
            c["sines"] = [SineSpec(**s) for s in c.get("sines", [])]
            channels.append(ChannelSpec(**c))
        rest = {k: v for k, v in d.items() if k != "channels"}
        return cls(channels=channels, **rest)

    def equation(self) -> str:
        lines = ["x_c(t) = intercept + slope*t + sum_k A_k sin(2*pi*t/p_k + phi_k) + ar_c(t) "
                 "+ gain*x_src(t - lag) + eps_c(t)",
                 "ar_c(t) = ar_coef*ar_c(t-1) + N(0, ar_std^2);  eps_c(t) ~ N(0, noise_std^2)",
                 "noise streams: numpy PCG64 seeded from SeedSequence(seed), one child per channel"]
        for i, c in enumerate(self.channels):
            terms = [f"{c.intercept:g}"]
            if c.slope:
                terms.append(f"{c.slope:g}*t")
            terms += [f"{s.amplitude:g}*sin(2*pi*t/{s.period:g} + {s.phase:g})" for s in c.sines]
            if c.ar_std:
                terms.append(f"AR1(coef={c.ar_coef:g}, std={c.ar_std:g})")
            if c.lag_source is not None:
                terms.append(f"{c.lag_gain:g}*x_{c.lag_source}(t-{c.lag})")
            if c.noise_std:
                terms.append(f"N(0, {c.noise_std:g}^2)")
            lines.append(f"x_{i}(t) = " + " + ".join(terms))
        return "\n".join(lines)


def synth_generate(spec: SynthSpec) -> MultivariateSeries:
    """Deterministic multichannel signal from a :class:`SynthSpec`.

    Lagged couplings reference the full (noisy) source channel, which must
    have a lower index. Samples before t=0 needed by a lag are generated by
    running every channel over an extended range and discarding the prefix.
    """
    if spec.length < 1:
        raise ConfigError(f"synthetic length must be >= 1, got {spec.length}")
    if not spec.channels:
        raise ConfigError("synthetic spec needs at least one channel")
    for i, c in enumerate(spec.channels):
        if c.lag_source is not None and not (0 <= c.lag_source < i):
            raise ConfigError(f"channel {i}: lag_source must index an earlier channel")
        if c.lag < 0:
            raise ConfigError(f"channel {i}: lag must be >= 0")
    pad = sum(c.lag for c in spec.channels if c.lag_source is not None)
    n = spec.length + pad
    t = np.arange(n, dtype=np.float64) - pad
    rngs = [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(spec.seed).spawn(len(spec.channels))]
    out = np.zeros((len(spec.channels), n))
    for i, (c, rng) in enumerate(zip(spec.channels, rngs)):
        x = c.intercept + c.slope * t
        for s in c.sines:
            x = x + s.amplitude * np.sin(2.0 * np.pi * t / s.period + s.phase)
        if c.ar_std:
            shocks = rng.normal(0.0, c.ar_std, size=n)
            ar = np.empty(n)
            acc = 0.0
            for k in range(n):
                acc = c.ar_coef * acc + shocks[k]
                ar[k] = acc
            x = x + ar
        if c.lag_source is not None:
            src = out[c.lag_source]
            lagged = np.zeros(n)
            lagged[c.lag:] = src[:n - c.lag] if c.lag else src
            x = x + c.lag_gain * lagged
        if c.noise_std:
            x = x + rng.normal(0.0, c.noise_std, size=n)
        out[i] = x
    values = out[:, pad:]
    start = np.datetime64(spec.start)
    step = np.timedelta64(spec.freq_minutes, "m")
    stamps = [str(start + k * step) for k in range(spec.length)]
    return MultivariateSeries(values, [f"ch{i + 1}" for i in range(len(spec.channels))], stamps,
                              f"{spec.freq_minutes}m")


def sine_suite_spec(length: int = 2000, seed: int = 0, noise_std: float = 0.1) -> SynthSpec:
    """Two-channel sine-plus-noise benchmark used by the learning checks."""
    return SynthSpec(length=length, seed=seed, channels=[
        ChannelSpec(sines=[SineSpec(24, 1.0, 0.0)], noise_std=noise_std),
        ChannelSpec(sines=[SineSpec(48, 0.8, 1.0), SineSpec(12, 0.3, 0.5)], noise_std=noise_std),
    ])
