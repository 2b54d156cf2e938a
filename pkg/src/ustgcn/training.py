"""Optimisation loop, per-horizon metrics and naive baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .dataset import INCLUDE_PREDICTION_WINDOW, SampleSet, ScalerParams, apply_scaler, invert_scaler
from .graph import NEIGHBORS_AND_SELF, STAdjacency
from .model import loss_and_grads, predict

log = logging.getLogger(__name__)

REPORT_STEPS = (3, 6, 9, 12)
MAPE_MASK = 1.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    base_lr: float = 1e-3
    decay: float = 0.5
    decay_every: int = 8
    decay_until: int = 24
    floor_lr: float = 1e-4
    batch_size: int = 32
    K: int = 3
    P: int = 7
    T: int = 12
    n: int = 12
    window_mode: str = INCLUDE_PREDICTION_WINDOW
    adjacency_variant: str = NEIGHBORS_AND_SELF
    h: int = 64
    seed: int = 0
    scaling: bool = True
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        for key in ("base_lr", "floor_lr", "decay"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("T", "n", "batch_size", "h", "decay_every"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.P < 0 or self.K < 0:
            raise ValueError("P and K must be nonnegative")


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Halve every ``decay_every`` epochs until ``decay_until``, then hold ``floor_lr``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch >= config.decay_until:
        return config.floor_lr
    return config.base_lr * config.decay ** (epoch // config.decay_every)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HorizonMetrics:
    step: int
    mae: float
    rmse: float
    mape: float | None  # None when every target at this step is masked
    count: int
    masked: int


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple[HorizonMetrics, ...]
    interval_minutes: int = 5

    def at(self, step: int) -> HorizonMetrics:
        for r in self.rows:
            if r.step == step:
                return r
        raise KeyError(f"no metrics for horizon step {step}")

    def to_csv(self) -> str:
        lines = ["horizon_min,MAE,RMSE,MAPE"]
        for r in self.rows:
            mape = "nan" if r.mape is None else f"{r.mape:.6f}"
            lines.append(f"{r.step * self.interval_minutes},{r.mae:.6f},{r.rmse:.6f},{mape}")
        return "\n".join(lines) + "\n"

    def format_table(self, title: str = "") -> str:
        out = [title] if title else []
        out.append(f"{'horizon':>8} {'MAE':>9} {'RMSE':>9} {'MAPE%':>9}")
        for r in self.rows:
            mape = "undef" if r.mape is None else f"{r.mape:9.4f}"
            out.append(f"{r.step * self.interval_minutes:>5}min {r.mae:9.4f} {r.rmse:9.4f} {mape:>9}")
        return "\n".join(out)


def report_steps(n: int) -> tuple[int, ...]:
    steps = tuple(s for s in REPORT_STEPS if s <= n)
    return steps or tuple(range(1, n + 1))


def compute_metrics(pred, target, steps=None, mask_threshold: float = MAPE_MASK) -> MetricsReport:
    """MAE, RMSE and masked MAPE per horizon step; inputs are ``(..., n)`` in original units."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise nx.ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    n = pred.shape[-1]
    p2 = pred.reshape(-1, n)
    t2 = target.reshape(-1, n)
    rows = []
    for step in steps or report_steps(n):
        e = p2[:, step - 1] - t2[:, step - 1]
        y = t2[:, step - 1]
        keep = np.abs(y) >= mask_threshold
        mape = float(100.0 * np.mean(np.abs(e[keep]) / np.abs(y[keep]))) if keep.any() else None
        mae = float(np.mean(np.abs(e))) if e.size else math.nan
        rmse = float(np.sqrt(np.mean(e * e))) if e.size else math.nan
        rows.append(HorizonMetrics(step, mae, rmse, mape, int(e.size), int((~keep).sum())))
    return MetricsReport(tuple(rows))


def evaluate(params, adj: STAdjacency, samples: SampleSet, scaler: ScalerParams,
             steps=None) -> MetricsReport:
    """Metrics of the model on raw (unscaled) ``samples``, in original units."""
    return compute_metrics(predict_original(params, adj, samples, scaler), samples.y, steps)


def predict_original(params, adj: STAdjacency, samples: SampleSet, scaler: ScalerParams) -> np.ndarray:
    pred = predict(adj, apply_scaler(samples.x, scaler), params)
    return invert_scaler(pred, scaler)


def persistence_baseline(samples: SampleSet, steps=None) -> MetricsReport:
    last = samples.current[:, -1, :]  # (S, N)
    pred = np.repeat(last[:, :, None], samples.n, axis=2)
    return compute_metrics(pred, samples.y, steps)


def historical_average_baseline(samples: SampleSet, steps=None) -> MetricsReport:
    """Mean of the historical columns at the window position aligned with each horizon."""
    if samples.mode != INCLUDE_PREDICTION_WINDOW:
        raise ValueError("historical average needs include-prediction-window samples")
    if samples.P < 1:
        raise ValueError("historical average needs at least one historical day")
    hist = samples.historical.mean(axis=-1)  # (S, T, N)
    # window position w holds day-shifted index anchor + n - T + w; horizon h aligns with w = T - n + h
    pos = samples.T - samples.n + np.arange(1, samples.n + 1) - 1
    if pos.min() < 0:
        raise ValueError(f"horizon n={samples.n} exceeds window T={samples.T}; alignment undefined")
    pred = hist[:, pos, :].transpose(0, 2, 1)
    return compute_metrics(pred, samples.y, steps)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_mse: float
    val_mae: float


@dataclass
class TrainResult:
    params: dict
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    clipped_steps: int = 0

    def log_lines(self) -> list[str]:
        return ["epoch,lr,train_mse,val_mae"] + [
            f"{r.epoch},{r.lr!r},{r.train_mse!r},{r.val_mae!r}" for r in self.log]


def train(params: dict, adj: STAdjacency, train_set: SampleSet, config: TrainConfig,
          scaler: ScalerParams | None = None, val_set: SampleSet | None = None,
          on_epoch=None) -> TrainResult:
    """Mini-batch Adam on scaled MSE; returns the parameters of the best validation epoch.

    ``train_set``/``val_set`` hold samples in original units; ``scaler`` maps them
    to model space. Without a validation set the final parameters are returned.
    """
    if len(train_set) == 0:
        raise ValueError("no training samples")
    scaler = scaler or ScalerParams.identity()
    x_all = apply_scaler(train_set.x, scaler)
    y_all = apply_scaler(train_set.y, scaler)
    rng = np.random.default_rng(config.seed)
    state = nx.AdamState()
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    result = TrainResult(params=params)
    best_mae = math.inf
    select_step = config.n
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_grads(adj, x_all[idx], y_all[idx], params)
            if not math.isfinite(loss):
                raise FloatingPointError(f"nonfinite loss at epoch {epoch}, batch {b}")
            grads, norm = nx.clip_global_norm(grads, config.clip_norm)
            if norm > config.clip_norm:
                result.clipped_steps += 1
                log.debug("epoch %d batch %d: gradient norm %.3g clipped to %.3g",
                          epoch, b, norm, config.clip_norm)
            params, state = nx.adam_step(params, grads, state, lr)
            total += loss * len(idx)
            count += len(idx)
        train_mse = total / count
        if val_set is not None and len(val_set):
            val_mae = evaluate(params, adj, val_set, scaler, steps=(select_step,)).rows[0].mae
        else:
            val_mae = math.nan
        result.log.append(EpochRecord(epoch, lr, train_mse, val_mae))
        if val_set is None or not len(val_set):
            result.params, result.best_epoch = params, epoch
        elif val_mae < best_mae:
            best_mae, result.params, result.best_epoch = val_mae, params, epoch
        if on_epoch is not None:
            on_epoch(result.log[-1])
    if result.clipped_steps:
        log.info("gradient clipping triggered on %d steps", result.clipped_steps)
    return result
