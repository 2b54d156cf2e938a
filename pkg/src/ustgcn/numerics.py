"""Dense/sparse primitives, a small reverse-mode tape, Adam and a gradient checker.

Dense tensors are plain float64 ``numpy`` arrays. Every differentiable op accepts
either arrays or :class:`Var` handles; when at least one input lives on a
:class:`GradientTape` the op is recorded so :func:`backward` can replay it.
Ops with a leading batch axis (``(B, rows, cols)``) are supported where the
model needs them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

DenseTensor = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


# ---------------------------------------------------------------------------
# Sparse matrix (CSR)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Immutable CSR matrix of float64 weights.

    Row ``r`` owns ``col_indices[row_starts[r]:row_starts[r + 1]]`` (strictly
    increasing) and the matching ``weights``; zeros are never stored.
    """

    n_rows: int
    n_cols: int
    row_starts: np.ndarray
    col_indices: np.ndarray
    weights: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        rs = np.ascontiguousarray(self.row_starts, dtype=np.int64)
        ci = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "row_starts", rs)
        object.__setattr__(self, "col_indices", ci)
        object.__setattr__(self, "weights", w)
        for a in (rs, ci, w):
            a.setflags(write=False)
        self._validate()

    def _validate(self):
        if self.n_rows < 0 or self.n_cols < 0:
            raise ShapeError(f"negative matrix size {self.n_rows}x{self.n_cols}")
        rs, ci, w = self.row_starts, self.col_indices, self.weights
        if rs.shape != (self.n_rows + 1,):
            raise ValueError(f"row_starts must have length {self.n_rows + 1}, got {rs.shape[0]}")
        if rs[0] != 0 or rs[-1] != ci.shape[0] or ci.shape != w.shape:
            raise ValueError("row_starts must start at 0 and end at nnz == len(col_indices) == len(weights)")
        if np.any(np.diff(rs) < 0):
            raise ValueError("row_starts must be nondecreasing")
        if ci.size:
            if ci.min() < 0 or ci.max() >= self.n_cols:
                raise ValueError(f"column index out of range [0, {self.n_cols})")
            # strictly increasing inside a row: a non-increase is only allowed at row starts
            step = np.diff(ci) <= 0
            boundary = np.zeros(ci.size - 1, dtype=bool)
            inner_starts = rs[1:-1]
            inner_starts = inner_starts[(inner_starts > 0) & (inner_starts < ci.size)]
            boundary[inner_starts - 1] = True
            if np.any(step & ~boundary):
                raise ValueError("column indices must be strictly increasing within each row")
        if np.any(w == 0.0):
            raise ValueError("explicit zero weights must not be stored")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")

    @classmethod
    def from_coo(cls, n_rows: int, n_cols: int, rows, cols, weights) -> "SparseMatrix":
        """Build from coordinate triplets. Duplicate coordinates are rejected; zeros dropped."""
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        weights = np.asarray(weights, dtype=np.float64).ravel()
        if not (rows.shape == cols.shape == weights.shape):
            raise ShapeError("rows, cols and weights must have equal length")
        if rows.size and (rows.min() < 0 or rows.max() >= n_rows):
            raise ValueError(f"row index out of range [0, {n_rows})")
        keep = weights != 0.0
        rows, cols, weights = rows[keep], cols[keep], weights[keep]
        order = np.lexsort((cols, rows))
        rows, cols, weights = rows[order], cols[order], weights[order]
        if rows.size > 1:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if np.any(dup):
                k = int(np.flatnonzero(dup)[0])
                raise ValueError(f"duplicate entry at ({rows[k]}, {cols[k]})")
        row_starts = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=row_starts[1:])
        return cls(n_rows, n_cols, row_starts, cols, weights)

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        return cls.from_coo(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    @classmethod
    def empty(cls, n_rows: int, n_cols: int) -> "SparseMatrix":
        return cls(n_rows, n_cols, np.zeros(n_rows + 1, dtype=np.int64),
                   np.zeros(0, dtype=np.int64), np.zeros(0))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.col_indices.shape[0])

    def storage_size(self) -> int:
        """Number of array slots held: ``n_rows + 1 + 2 * nnz``."""
        return int(self.row_starts.size + self.col_indices.size + self.weights.size)

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry."""
        if "row_ids" not in self._cache:
            ids = np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.row_starts))
            ids.setflags(write=False)
            self._cache["row_ids"] = ids
        return self._cache["row_ids"]

    def row_sums(self) -> np.ndarray:
        out = np.zeros(self.n_rows)
        np.add.at(out, self.row_ids(), self.weights)
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids(), self.col_indices] = self.weights
        return out

    def transpose(self) -> "SparseMatrix":
        if "T" not in self._cache:
            self._cache["T"] = SparseMatrix.from_coo(
                self.n_cols, self.n_rows, self.col_indices, self.row_ids(), self.weights)
        return self._cache["T"]

    def _csr(self):
        if "csr" not in self._cache:
            self._cache["csr"] = sp.csr_matrix(
                (self.weights, self.col_indices, self.row_starts), shape=self.shape)
        return self._cache["csr"]

    def matmul(self, d: np.ndarray) -> np.ndarray:
        """``self @ d`` for ``d`` of shape ``(n_cols, p)`` or ``(B, n_cols, p)``.

        Each output entry accumulates its row's stored entries in ascending
        column order, so results are reproducible bit for bit.
        """
        if d.ndim not in (2, 3) or d.shape[-2] != self.n_cols:
            raise ShapeError(f"cannot multiply sparse {self.shape} by dense {d.shape}")
        batched = d.ndim == 3
        if batched:
            B, k, p = d.shape
            d = d.transpose(1, 0, 2).reshape(k, B * p)
        out = np.asarray(self._csr() @ np.ascontiguousarray(d, dtype=np.float64))
        if batched:
            out = out.reshape(self.n_rows, B, p).transpose(1, 0, 2)
        return out


# ---------------------------------------------------------------------------
# Gradient tape
# ---------------------------------------------------------------------------


class Var:
    """Handle to a value slot on a :class:`GradientTape`."""

    __slots__ = ("value", "tape", "slot")

    def __init__(self, value: np.ndarray, tape: "GradientTape", slot: int):
        self.value = value
        self.tape = tape
        self.slot = slot

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(slot={self.slot}, shape={self.value.shape})"


class GradientTape:
    """Ordered record of primitive ops; replayed in reverse by :func:`backward`."""

    def __init__(self):
        self.records: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self.params: dict[str, int] = {}
        self._shapes: list[tuple[int, ...]] = []

    def _new_slot(self, value: np.ndarray) -> int:
        self._shapes.append(np.shape(value))
        return len(self._shapes) - 1

    def watch(self, value, name: str) -> Var:
        """Register a parameter leaf under ``name``."""
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        value = np.asarray(value, dtype=np.float64)
        slot = self._new_slot(value)
        self.params[name] = slot
        return Var(value, self, slot)

    def record(self, value: np.ndarray, inputs: Sequence, vjp: Callable) -> Var:
        slots = tuple(x.slot if isinstance(x, Var) else None for x in inputs)
        slot = self._new_slot(value)
        self.records.append((slot, slots, vjp))
        return Var(value, self, slot)


def _unwrap(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> GradientTape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = x.tape
    return tape


def _emit(value, inputs, vjp):
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    return tape.record(value, inputs, vjp)


def backward(tape: GradientTape, loss: Var) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``loss`` for every parameter registered on ``tape``.

    Parameters that the loss does not depend on get exact zeros.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ValueError("loss must be a value recorded on this tape")
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.slot: np.ones_like(loss.value)}
    for out_slot, in_slots, vjp in reversed(tape.records):
        g = grads.pop(out_slot, None)
        if g is None:
            continue
        for s, gi in zip(in_slots, vjp(g)):
            if s is None or gi is None:
                continue
            if s in grads:
                grads[s] = grads[s] + gi
            else:
                grads[s] = gi
    return {name: grads.get(slot, np.zeros(tape._shapes[slot]))
            for name, slot in tape.params.items()}


# ---------------------------------------------------------------------------
# Differentiable ops
# ---------------------------------------------------------------------------


def _sum_to_2d(g: np.ndarray, shape) -> np.ndarray:
    # collapse leading batch axes when the operand itself was unbatched
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def dense_matmul(a, b):
    """``a @ b`` with ``a`` of shape ``(m, k)`` or ``(B, m, k)`` and ``b`` ``(k, p)``."""
    av, bv = _unwrap(a), _unwrap(b)
    if av.ndim not in (2, 3) or bv.ndim != 2 or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {av.shape} x {bv.shape}")
    out = av @ bv

    def vjp(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit(out, (a, b), vjp)


def sparse_dense_matmul(s: SparseMatrix, d):
    """``s @ d``; differentiable in ``d`` only."""
    dv = _unwrap(d)
    out = s.matmul(dv)
    return _emit(out, (d,), lambda g: (s.transpose().matmul(g),))


def elementwise_mul_broadcast(x, w, n_per_block: int):
    """Scale row ``t * n_per_block + i`` of ``x`` by row ``t`` of ``w``."""
    xv, wv = _unwrap(x), _unwrap(w)
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1]:
        raise ShapeError(f"cannot broadcast weights {wv.shape} over {xv.shape}")
    rows, T = xv.shape[-2], wv.shape[0]
    if rows % T != 0 or rows // T != n_per_block:
        raise ShapeError(f"{rows} rows do not split into {T} blocks of {n_per_block}")
    wide = np.repeat(wv, n_per_block, axis=0)
    out = xv * wide

    def vjp(g):
        gw = _sum_to_2d(g * xv, (rows, wv.shape[1]))
        gw = gw.reshape(T, n_per_block, wv.shape[1]).sum(axis=1)
        return g * wide, gw

    return _emit(out, (x, w), vjp)


def relu(x):
    xv = _unwrap(x)
    mask = xv > 0
    return _emit(np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,))


def concat_columns(parts):
    vals = [_unwrap(p) for p in parts]
    if not vals:
        raise ShapeError("nothing to concatenate")
    lead = vals[0].shape[:-1]
    for v in vals[1:]:
        if v.shape[:-1] != lead:
            raise ShapeError(f"row mismatch in concat: {vals[0].shape} vs {v.shape}")
    if len(vals) == 1:
        return parts[0]
    out = np.concatenate(vals, axis=-1)
    edges = np.cumsum([v.shape[-1] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, edges, axis=-1))

    return _emit(out, tuple(parts), vjp)


def add_bias(x, b):
    """Add vector ``b`` to every row of ``x``."""
    xv, bv = _unwrap(x), _unwrap(b)
    if bv.ndim != 1 or bv.shape[0] != xv.shape[-1]:
        raise ShapeError(f"bias {bv.shape} does not match {xv.shape}")
    return _emit(xv + bv, (x, b), lambda g: (g, g.reshape(-1, bv.shape[0]).sum(axis=0)))


def timestamps_to_columns(x, n_per_block: int):
    """Regroup a timestamp-major ``(N*T, d)`` matrix into ``(N, T*d)``.

    Output row ``i`` is ``x[i] || x[N + i] || ... || x[(T-1)*N + i]``.
    """
    xv = _unwrap(x)
    rows, d = xv.shape[-2:]
    if rows % n_per_block:
        raise ShapeError(f"{rows} rows not divisible by block size {n_per_block}")
    T = rows // n_per_block
    lead = xv.shape[:-2]
    k = len(lead)
    perm = tuple(range(k)) + (k + 1, k, k + 2)
    out = xv.reshape(lead + (T, n_per_block, d)).transpose(perm).reshape(lead + (n_per_block, T * d))

    def vjp(g):
        back = g.reshape(lead + (n_per_block, T, d)).transpose(perm).reshape(lead + (rows, d))
        return (back,)

    return _emit(out, (x,), vjp)


def mse_loss(pred, target):
    pv, tv = _unwrap(pred), _unwrap(target)
    if pv.shape != tv.shape:
        raise ShapeError(f"mse shape mismatch: {pv.shape} vs {tv.shape}")
    diff = pv - tv
    out = np.asarray(np.mean(diff * diff))
    return _emit(out, (pred,), lambda g: (g * 2.0 * diff / diff.size,))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new parameter arrays; ``state`` is updated in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"nonfinite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    new = dict(params)
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(params[name])
            v = np.zeros_like(params[name])
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return new, state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# Verification harness
# ---------------------------------------------------------------------------


def numeric_gradient(f: Callable[[dict[str, np.ndarray]], float],
                     params: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``f`` w.r.t. every coordinate of every parameter."""
    if h <= 0:
        raise ValueError("step h must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(work))
            flat[i] = orig - h
            fm = float(f(work))
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        out[name] = g.reshape(arr.shape)
    return out


def finite_diff_check(f: Callable[[dict[str, np.ndarray]], float],
                      analytic: dict[str, np.ndarray],
                      params: dict[str, np.ndarray], h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1e-8, |numeric|)``."""
    numeric = numeric_gradient(f, params, h)
    worst = 0.0
    for name, num in numeric.items():
        ana = np.asarray(analytic.get(name, np.zeros_like(num)))
        rel = np.abs(ana - num) / np.maximum(1e-8, np.abs(num))
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst
