"""Executable invariant battery.

Each suite builds random instances, checks one structural property of the
pipeline against an independent dense reimplementation (kept in this module so it
shares nothing with the sparse/tape code paths) and returns a :class:`SuiteResult`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .dataset import SampleSet, ScalerParams, apply_scaler, invert_scaler
from .graph import (NEIGHBORS_AND_SELF, SELF_ONLY, PhysicalGraph, build_adjacency_gaussian_neighbor,
                    build_st_adjacency, lower_block_violations)
from .model import ForwardTrace, init_params, loss_and_grads, model_forward, predict
from .training import TrainConfig, compute_metrics, evaluate, lr_at_epoch

VARIANTS = (NEIGHBORS_AND_SELF, SELF_ONLY)


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str
    cases: int
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<22} {self.cases:>4} cases {self.seconds:6.2f}s  {self.detail}"


# ---------------------------------------------------------------------------
# Dense reference pieces
# ---------------------------------------------------------------------------


def random_graph(rng: np.random.Generator, N: int, density: float | None = None) -> PhysicalGraph:
    density = rng.uniform(0.0, 1.0) if density is None else density
    pairs = [(i, j, float(rng.uniform(0.0, 0.5))) for i in range(N) for j in range(i + 1, N)
             if rng.random() < density]
    return build_adjacency_gaussian_neighbor(pairs, N, delta=0.1)


def dense_st(A: np.ndarray, T: int, variant: str) -> np.ndarray:
    N = A.shape[0]
    lower = A + np.eye(N) if variant == NEIGHBORS_AND_SELF else np.eye(N)
    out = np.zeros((N * T, N * T))
    for t in range(T):
        out[t * N:(t + 1) * N, t * N:(t + 1) * N] = A
        for tp in range(t):
            out[t * N:(t + 1) * N, tp * N:(tp + 1) * N] = lower
    return out


def dense_normalize(raw: np.ndarray) -> np.ndarray:
    deg = raw.sum(axis=1)
    inv = np.array([1.0 / math.sqrt(d) if d > 0 else 0.0 for d in deg])
    return inv[:, None] * raw * inv[None, :]


def dense_model(A: np.ndarray, T: int, x: np.ndarray, params: dict, K: int, variant: str) -> np.ndarray:
    N = A.shape[0]
    op = dense_normalize(dense_st(A, T, variant))
    h = x
    for l in range(K):
        wt = np.repeat(params[f"temp.{l}"], N, axis=0)
        h = np.maximum(np.hstack([h, op @ (h * wt)]) @ params[f"final.{l}"], 0.0)
    d = h.shape[1]
    z = np.hstack([h[t * N:(t + 1) * N] for t in range(T)]).reshape(N, T * d)
    hidden = np.maximum(z @ params["head.F"] @ params["head.W1"] + params["head.b1"], 0.0)
    return hidden @ params["head.W2"] + params["head.b2"]


def _instance(rng, N, T, K, d0=3, h=5, n=2, variant=NEIGHBORS_AND_SELF):
    g = random_graph(rng, N)
    adj = build_st_adjacency(g, T, variant)
    params = init_params(T, d0, K, h, n, int(rng.integers(2**31)))
    for l in range(K):
        params[f"temp.{l}"] = rng.uniform(0.5, 1.5, size=(T, d0))
    # nonzero biases keep hidden units off the relu kink, where central differences are meaningless
    params["head.b1"] = rng.uniform(0.05, 0.5, size=h) * rng.choice([-1.0, 1.0], size=h)
    params["head.b2"] = rng.normal(size=n)
    return g, adj, params, rng.normal(size=(N * T, d0))


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def suite_triangularity(rng, scale: float = 1.0, **_) -> tuple[bool, str, int]:
    cases = max(1, int(100 * scale))
    for c in range(cases):
        N, T = int(rng.integers(1, 21)), int(rng.integers(1, 13))
        variant = VARIANTS[c % 2]
        adj = build_st_adjacency(random_graph(rng, N), T, variant)
        bad = lower_block_violations(adj.normalized, N)
        if bad:
            return False, f"case {c} (N={N}, T={T}, {variant}): entries above the block diagonal at {bad[:3]}", cases
    return True, "no stored entry above the block diagonal", cases


def suite_causality(rng, scale: float = 1.0, **_) -> tuple[bool, str, int]:
    cases = max(1, int(50 * scale))
    for c in range(cases):
        N, T, K = int(rng.integers(1, 9)), int(rng.integers(2, 7)), int(rng.integers(1, 4))
        _, adj, params, x = _instance(rng, N, T, K, variant=VARIANTS[c % 2])
        tp = int(rng.integers(1, T))
        x2 = x.copy()
        x2[tp * N:] += rng.normal(size=x2[tp * N:].shape)
        a, b = ForwardTrace(), ForwardTrace()
        model_forward(adj, x, params, trace=a)
        model_forward(adj, x2, params, trace=b)
        for l, (la, lb) in enumerate(zip(a.layers, b.layers)):
            if la[:tp * N].tobytes() != lb[:tp * N].tobytes():
                return False, f"case {c}: layer {l} rows before timestamp {tp} changed", cases
    return True, "earlier-timestamp embeddings bit-identical under later perturbation", cases


def suite_gradient(rng, scale: float = 1.0, **_) -> tuple[bool, str, int]:
    cases = max(1, int(2 * scale))
    worst = 0.0
    for _c in range(cases):
        _, adj, params, x = _instance(rng, 4, 3, 2, d0=3, h=5, n=2)
        y = rng.normal(size=(4, 2))
        _, grads = loss_and_grads(adj, x, y, params)

        def f(p):
            return float(np.mean((model_forward(adj, x, p) - y) ** 2))

        worst = max(worst, nx.finite_diff_check(f, grads, params, h=1e-5))
    return worst <= 1e-5, f"max relative error {worst:.2e} (limit 1e-5)", cases


def suite_dense_oracle(rng, scale: float = 1.0, **_) -> tuple[bool, str, int]:
    cases = max(1, int(25 * scale))
    worst = 0.0
    for c in range(cases):
        N, T, K = int(rng.integers(1, 7)), int(rng.integers(1, 5)), int(rng.integers(0, 4))
        variant = VARIANTS[c % 2]
        g, adj, params, x = _instance(rng, N, T, K, variant=variant)
        ref = dense_model(g.adjacency.to_dense(), T, x, params, K, variant)
        worst = max(worst, float(np.max(np.abs(model_forward(adj, x, params) - ref))))
    return worst <= 1e-10, f"max abs error {worst:.2e} (limit 1e-10)", cases


def suite_normalization(rng, scale: float = 1.0, corrupt: bool = False, **_) -> tuple[bool, str, int]:
    """``corrupt`` perturbs one stored entry of the operator under test (negative control)."""
    cases = max(1, int(50 * scale))
    worst = 0.0
    for c in range(cases):
        N, T = int(rng.integers(1, 13)), int(rng.integers(1, 7))
        g = random_graph(rng, N)
        norm = build_st_adjacency(g, T, VARIANTS[c % 2]).normalized.to_dense()
        if corrupt and c == cases - 1:
            r, col = np.argwhere(norm != 0)[-1] if norm.any() else (0, 0)
            norm[r, col] += 1e-6
        err = np.abs(norm - dense_normalize(dense_st(g.adjacency.to_dense(), T, VARIANTS[c % 2])))
        worst = max(worst, float(err.max()))
        if err.max() > 1e-12:
            r, col = np.unravel_index(int(np.argmax(err)), err.shape)
            return False, f"case {c} (N={N}, T={T}): entry ({r}, {col}) off by {err[r, col]:.3e}", cases
    return True, f"max entrywise error {worst:.2e} (limit 1e-12)", cases


def suite_metric_units(rng, scale: float = 1.0, **_) -> tuple[bool, str, int]:
    r = compute_metrics(np.array([[3.0], [2.0]]), np.array([[2.0], [4.0]]), steps=(1,)).rows[0]
    if abs(r.mae - 1.5) > 1e-12 or abs(r.rmse - math.sqrt(2.5)) > 1e-12 or abs(r.mape - 50.0) > 1e-9:
        return False, f"hand example gave MAE {r.mae}, RMSE {r.rmse}, MAPE {r.mape}", 1
    cases = max(1, int(5 * scale))
    for c in range(cases):
        N, T, n = int(rng.integers(1, 6)), 4, 2
        _, adj, params, _x = _instance(rng, N, T, 1, d0=2, n=n)
        S = 6
        x = rng.uniform(20, 80, size=(S, N * T, 2))
        y = rng.uniform(20, 80, size=(S, N, n))
        samples = SampleSet(x, y, np.arange(S), N, T, 1, n, "include")
        scaler = ScalerParams(float(rng.uniform(40, 70)), float(rng.uniform(5, 15)))
        manual = invert_scaler(predict(adj, apply_scaler(x, scaler), params), scaler)
        if evaluate(params, adj, samples, scaler, steps=(1, 2)) != compute_metrics(manual, y, steps=(1, 2)):
            return False, f"case {c}: evaluate does not score inverted predictions", cases + 1
        rep = evaluate(params, adj, samples, scaler, steps=(1, 2))
        if any(row.rmse < row.mae for row in rep.rows):
            return False, f"case {c}: RMSE below MAE", cases + 1
    return True, "metrics computed on inverted predictions; hand example exact", cases + 1


def suite_schedule(rng=None, scale: float = 1.0, **_) -> tuple[bool, str, int]:
    cfg = TrainConfig()
    table = [(range(0, 8), 0.001), (range(8, 16), 0.0005), (range(16, 24), 0.00025), (range(24, 500), 0.0001)]
    for epochs, lr in table:
        for e in epochs:
            if lr_at_epoch(cfg, e) != lr:
                return False, f"epoch {e}: got {lr_at_epoch(cfg, e)}, expected {lr}", 500
    return True, "epochs 0..499 match the step table", 500


SUITES: dict[str, Callable] = {
    "triangularity": suite_triangularity,
    "causality": suite_causality,
    "gradient": suite_gradient,
    "dense-oracle": suite_dense_oracle,
    "normalization-oracle": suite_normalization,
    "metric-unit": suite_metric_units,
    "schedule": suite_schedule,
}


def run_suites(names=None, seed: int = 0, scale: float = 1.0, corrupt_normalization: bool = False) -> list[SuiteResult]:
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {sorted(SUITES)}")
    results = []
    for name in names:
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            ok, detail, cases = SUITES[name](rng, scale=scale, corrupt=corrupt_normalization)
        except Exception as exc:  # a crash is a failed suite, not a crashed battery
            ok, detail, cases = False, f"raised {type(exc).__name__}: {exc}", 0
        results.append(SuiteResult(name, ok, detail, cases, time.perf_counter() - t0))
    return results
