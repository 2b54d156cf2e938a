"""Speed series ingestion, sample assembly, chronological splits, scaling and synthesis."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph import PhysicalGraph

log = logging.getLogger(__name__)

STEPS_PER_DAY = 288
INCLUDE_PREDICTION_WINDOW = "include"
PREVIOUS_HOUR = "prev-hour"
WINDOW_MODES = (INCLUDE_PREDICTION_WINDOW, PREVIOUS_HOUR)


@dataclass(frozen=True)
class SpeedSeries:
    values: np.ndarray  # (timestamps, N)
    sensor_ids: tuple[str, ...]
    interval_minutes: int = 5
    steps_per_day: int = STEPS_PER_DAY

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"speed matrix must be 2-D, got shape {v.shape}")
        if v.shape[0] % self.steps_per_day:
            raise ValueError(f"{v.shape[0]} rows is not a whole number of {self.steps_per_day}-step days")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("speeds must be finite and nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if len(self.sensor_ids) != v.shape[1]:
            raise ValueError(f"{len(self.sensor_ids)} sensor ids for {v.shape[1]} columns")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_days(self) -> int:
        return self.n_steps // self.steps_per_day


def _parse_float(cell: str):
    try:
        return float(cell)
    except ValueError:
        return None


def load_speed_csv(path, steps_per_day: int = STEPS_PER_DAY) -> SpeedSeries:
    """Read a comma-separated speed table (rows = intervals, columns = sensors).

    A first row containing any non-numeric cell is taken as the sensor-id header.
    """
    rows: list[list[float]] = []
    sensor_ids = None
    width = None
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(csv.reader(fh), start=1):
            if not raw or all(not c.strip() for c in raw):
                continue
            cells = [c.strip() for c in raw]
            if width is None:
                width = len(cells)
                parsed = [_parse_float(c) for c in cells]
                if any(p is None for p in parsed):
                    sensor_ids = tuple(cells)
                    continue
            elif len(cells) != width:
                raise ValueError(f"{path}: row {lineno} has {len(cells)} columns, expected {width}")
            row = []
            for col, c in enumerate(cells, start=1):
                x = _parse_float(c)
                if x is None or c == "":
                    raise ValueError(f"{path}: row {lineno}, column {col}: non-numeric cell {c!r}")
                row.append(x)
            rows.append(row)
    if width is None or not rows:
        raise ValueError(f"{path}: no data rows")
    if len(rows) % steps_per_day:
        raise ValueError(f"{path}: {len(rows)} data rows leave a partial trailing day "
                         f"({len(rows) % steps_per_day} extra rows after row {len(rows) - len(rows) % steps_per_day})")
    if sensor_ids is None:
        sensor_ids = tuple(str(i) for i in range(width))
    return SpeedSeries(np.array(rows), sensor_ids, steps_per_day=steps_per_day)


def write_speed_csv(series: SpeedSeries, path) -> None:
    """Header of sensor IDs, omitted when the IDs are just column positions."""
    ids = tuple(series.sensor_ids)
    default = ids == tuple(str(i) for i in range(series.n_nodes))
    if not default and all(_parse_float(i) is not None for i in ids):
        raise ValueError("numeric sensor IDs would be read back as a data row; use non-numeric IDs")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if not default:
            w.writerow(ids)
        for row in series.values:
            w.writerow([repr(float(x)) for x in row])


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    x: np.ndarray  # (N*T, P+1) timestamp-major; historical oldest->newest, current day last
    y: np.ndarray  # (N, n)
    anchor: int


@dataclass(frozen=True)
class SampleSet:
    """Stacked samples sharing one window geometry."""

    x: np.ndarray  # (S, N*T, P+1)
    y: np.ndarray  # (S, N, n)
    anchors: np.ndarray
    N: int
    T: int
    P: int
    n: int
    mode: str
    skipped: int = 0

    def __len__(self):
        return int(self.anchors.shape[0])

    def __getitem__(self, k) -> Sample:
        return Sample(self.x[k], self.y[k], int(self.anchors[k]))

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.x[idx], self.y[idx], self.anchors[idx], self.N, self.T,
                         self.P, self.n, self.mode)

    @property
    def current(self) -> np.ndarray:
        """Current-day window as ``(S, T, N)``."""
        return self.x[:, :, self.P].reshape(len(self), self.T, self.N)

    @property
    def historical(self) -> np.ndarray:
        """Historical columns as ``(S, T, N, P)``, oldest day first."""
        return self.x[:, :, : self.P].reshape(len(self), self.T, self.N, self.P)


def _check_mode(mode: str) -> str:
    if mode not in WINDOW_MODES:
        raise ValueError(f"unknown window mode {mode!r}; expected one of {WINDOW_MODES}")
    return mode


def sample_indices(anchor: int, T: int, n: int, P: int, mode: str, steps_per_day: int):
    """Series indices a sample reads: ``(current (T,), historical (T, P), target (n,))``.

    Historical column ``k`` holds day ``P - k`` back, so the newest day sits next
    to the current-day column.
    """
    _check_mode(mode)
    w = np.arange(1, T + 1)
    current = anchor - T + w
    base = anchor + n - T + w if mode == INCLUDE_PREDICTION_WINDOW else current
    days_back = np.arange(P, 0, -1)
    historical = base[:, None] - days_back[None, :] * steps_per_day
    target = anchor + np.arange(1, n + 1)
    return current, historical, target


def earliest_anchor(T: int, n: int, P: int, mode: str, steps_per_day: int) -> int:
    """Smallest anchor whose every referenced index is nonnegative."""
    first_hist_base = (n - T + 1) if mode == INCLUDE_PREDICTION_WINDOW else (1 - T)
    return max(T - 1, P * steps_per_day - first_hist_base) if P else T - 1


def assemble_sample(series: SpeedSeries, anchor: int, T: int = 12, n: int = 12, P: int = 7,
                    mode: str = INCLUDE_PREDICTION_WINDOW) -> Sample:
    """Build one sample anchored at the last observed step ``anchor``."""
    s = assemble_samples(series, [anchor], T, n, P, mode)
    if len(s) == 0:
        raise ValueError(f"anchor {anchor} lacks history or future for T={T}, n={n}, P={P}")
    return s[0]


def assemble_samples(series: SpeedSeries, anchors, T: int = 12, n: int = 12, P: int = 7,
                     mode: str = INCLUDE_PREDICTION_WINDOW) -> SampleSet:
    """Vectorised :func:`assemble_sample` over many anchors; invalid anchors are skipped."""
    _check_mode(mode)
    if T < 1 or n < 1 or P < 0:
        raise ValueError(f"need T >= 1, n >= 1, P >= 0 (got T={T}, n={n}, P={P})")
    anchors = np.asarray(list(anchors), dtype=np.int64)
    lo = earliest_anchor(T, n, P, mode, series.steps_per_day)
    ok = (anchors >= lo) & (anchors + n < series.n_steps)
    skipped = int((~ok).sum())
    if skipped:
        log.info("skipped %d anchors lacking history or future", skipped)
    anchors = anchors[ok]
    N, V = series.n_nodes, series.values
    S = anchors.shape[0]
    cur, hist, tgt = sample_indices(0, T, n, P, mode, series.steps_per_day)
    x = np.empty((S, T, N, P + 1))
    if S:
        x[:, :, :, P] = V[anchors[:, None] + cur[None, :]]
        if P:
            idx = anchors[:, None, None] + hist[None]  # (S, T, P)
            x[:, :, :, :P] = V[idx].transpose(0, 1, 3, 2)
    y = V[anchors[:, None] + tgt[None, :]].transpose(0, 2, 1) if S else np.empty((0, N, n))
    return SampleSet(x.reshape(S, T * N, P + 1), np.ascontiguousarray(y), anchors,
                     N, T, P, n, mode, skipped)


# ---------------------------------------------------------------------------
# Splits and scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_end: int
    val_end: int
    total: int

    def __post_init__(self):
        if not 0 < self.train_end < self.val_end <= self.total:
            raise ValueError(f"need 0 < train_end < val_end <= total, got "
                             f"{self.train_end}, {self.val_end}, {self.total}")

    def bounds(self, name: str) -> tuple[int, int]:
        return {"train": (0, self.train_end), "val": (self.train_end, self.val_end),
                "test": (self.val_end, self.total)}[name]

    def anchors(self, name: str, T: int, n: int) -> np.ndarray:
        """Anchors whose current window and targets lie inside split ``name``."""
        lo, hi = self.bounds(name)
        return np.arange(lo + T - 1, hi - n)


def make_splits(series: SpeedSeries, train_fraction: float = 0.70, val_fraction: float = 0.15,
                train_end: int | None = None, val_end: int | None = None) -> SplitSpec:
    """Chronological day-aligned split.

    Without explicit boundaries: ``floor(0.7 D)`` train days, ``floor(0.15 D)``
    test days and the remainder for validation.
    """
    spd = series.steps_per_day
    days = series.n_days
    if train_end is None:
        train_days = int(np.floor(train_fraction * days))
        test_days = int(np.floor((1.0 - train_fraction - val_fraction) * days + 1e-9))
        train_end = train_days * spd
        if val_end is None:
            val_end = (days - test_days) * spd
    elif val_end is None:
        rest = days - train_end // spd
        val_end = train_end + (rest - rest // 2) * spd
    for name, b in (("train_end", train_end), ("val_end", val_end)):
        if b % spd:
            raise ValueError(f"{name}={b} is not on a day boundary ({spd} steps per day)")
    return SplitSpec(int(train_end), int(val_end), series.n_steps)


def build_split_samples(series: SpeedSeries, split: SplitSpec, T: int, n: int, P: int,
                        mode: str) -> dict[str, SampleSet]:
    return {name: assemble_samples(series, split.anchors(name, T, n), T, n, P, mode)
            for name in ("train", "val", "test")}


@dataclass(frozen=True)
class ScalerParams:
    mean: float
    std: float

    @classmethod
    def identity(cls) -> "ScalerParams":
        return cls(0.0, 1.0)


def fit_scaler(series: SpeedSeries, split: SplitSpec) -> ScalerParams:
    train = series.values[: split.train_end]
    mean = float(train.mean())
    std = float(train.std())
    return ScalerParams(mean, std if std > 0 else 1.0)


def apply_scaler(x, scaler: ScalerParams):
    return (np.asarray(x) - scaler.mean) / scaler.std


def invert_scaler(x, scaler: ScalerParams):
    return np.asarray(x) * scaler.std + scaler.mean


def scale_samples(samples: SampleSet, scaler: ScalerParams) -> SampleSet:
    return SampleSet(apply_scaler(samples.x, scaler), apply_scaler(samples.y, scaler),
                     samples.anchors, samples.N, samples.T, samples.P, samples.n,
                     samples.mode, samples.skipped)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def row_normalized(adjacency) -> np.ndarray:
    A = adjacency.to_dense()
    deg = A.sum(axis=1, keepdims=True)
    return np.divide(A, deg, out=np.zeros_like(A), where=deg > 0)


def generate_synthetic(graph: PhysicalGraph, days: int, seed: int, noise_std: float = 0.5,
                       amplitude: float = 3.0, regional_std: float = 0.2, regional_timescale: float = 48.0,
                       mean_level: float = 60.0, self_weight: float = 0.55, neighbor_weight: float = 0.35,
                       steps_per_day: int = STEPS_PER_DAY, burn_in: int | None = None) -> SpeedSeries:
    """Graph-coupled AR(1) speeds with a daily cycle.

    ``x[t+1] = 0.55 x[t] + 0.35 Ahat x[t] + c + r[t] + a sin(2 pi t / 288 + phase) + noise``

    ``Ahat`` is the row-normalised adjacency and ``c`` puts the long-run level at
    ``mean_level``. ``r`` is a slow network-wide AR(1) drift (stationary std
    ``regional_std``, e-folding time ``regional_timescale`` steps) standing in for
    weather or demand swings that repeat-the-past forecasts cannot anticipate.
    Values are clipped at zero.
    """
    rng = np.random.default_rng(seed)
    N = graph.n_nodes
    Ahat = row_normalized(graph.adjacency)
    self_w, nbr_w = self_weight, neighbor_weight
    if self_w < 0 or nbr_w < 0 or self_w + nbr_w >= 1.0:
        raise ValueError("self_weight and neighbor_weight must be nonnegative with sum below 1")
    # isolated nodes keep all their mass on themselves so every row has the same gain
    gain = self_w + nbr_w * (Ahat.sum(axis=1) > 0)
    drive = mean_level * (1.0 - gain)
    phase = rng.uniform(0.0, np.pi / 2, size=N)
    burn_in = steps_per_day if burn_in is None else burn_in
    rho = np.exp(-1.0 / regional_timescale) if regional_timescale > 0 else 0.0
    innov = regional_std * np.sqrt(1.0 - rho * rho)
    total = days * steps_per_day
    x = np.full(N, mean_level)
    r = regional_std * rng.standard_normal()
    out = np.empty((total, N))
    for step in range(-burn_in, total):
        season = amplitude * np.sin(2.0 * np.pi * (step % steps_per_day) / steps_per_day + phase)
        x = self_w * x + nbr_w * (Ahat @ x) + drive + r + season + noise_std * rng.standard_normal(N)
        np.maximum(x, 0.0, out=x)
        r = rho * r + innov * rng.standard_normal()
        if step >= 0:
            out[step] = x
    return SpeedSeries(out, graph.sensor_ids, steps_per_day=steps_per_day)
