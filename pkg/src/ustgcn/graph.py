"""Physical sensor graph and the block lower-triangular spatio-temporal operator.

Node ``i`` at window position ``t`` (0-based) lives at row ``t * N + i`` of the
spatio-temporal matrix, so block ``(t, t')`` covers rows ``t*N:(t+1)*N`` and
columns ``t'*N:(t'+1)*N``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .numerics import SparseMatrix

NEIGHBORS_AND_SELF = "self-and-neighbors"
SELF_ONLY = "self-only"
VARIANTS = (NEIGHBORS_AND_SELF, SELF_ONLY)


@dataclass(frozen=True)
class PhysicalGraph:
    n_nodes: int
    adjacency: SparseMatrix
    sensor_ids: tuple[str, ...]

    @property
    def n_edges(self) -> int:
        """Stored (directed) entries of the adjacency."""
        return self.adjacency.nnz


@dataclass(frozen=True)
class STAdjacency:
    N: int
    T: int
    raw: SparseMatrix
    normalized: SparseMatrix
    degree: np.ndarray
    variant: str = NEIGHBORS_AND_SELF


def _check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown adjacency variant {variant!r}; expected one of {VARIANTS}")
    return variant


def gaussian_weight(d, delta: float):
    return np.exp(-np.square(d) / delta)


def _symmetric_graph(weights: dict[tuple[int, int], float], n_nodes: int, sensor_ids) -> PhysicalGraph:
    rows, cols, vals = [], [], []
    for (i, j), w in weights.items():
        rows.append(i)
        cols.append(j)
        vals.append(w)
    adj = SparseMatrix.from_coo(n_nodes, n_nodes, rows, cols, vals)
    if sensor_ids is None:
        sensor_ids = tuple(str(i) for i in range(n_nodes))
    sensor_ids = tuple(sensor_ids)
    if len(sensor_ids) != n_nodes:
        raise ValueError(f"{len(sensor_ids)} sensor ids given for {n_nodes} nodes")
    return PhysicalGraph(n_nodes, adj, sensor_ids)


def _collect(triples, n_nodes: int, delta: float, keep) -> dict[tuple[int, int], float]:
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    seen: dict[tuple[int, int], float] = {}
    out: dict[tuple[int, int], float] = {}
    for i, j, d in triples:
        i, j, d = int(i), int(j), float(d)
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise ValueError(f"node index out of range in pair ({i}, {j}) for N={n_nodes}")
        if i == j:
            raise ValueError(f"self pair ({i}, {i}) not allowed")
        if not d >= 0 or math.isinf(d):
            raise ValueError(f"distance for ({i}, {j}) must be finite and nonnegative, got {d}")
        key = (min(i, j), max(i, j))
        if key in seen and seen[key] != d:
            raise ValueError(f"contradictory distances for pair {key}: {seen[key]} vs {d}")
        seen[key] = d
        w = float(gaussian_weight(d, delta))
        if keep(w) and w > 0.0:
            out[(i, j)] = w
            out[(j, i)] = w
    return out


def build_adjacency_gaussian_threshold(distances: Iterable[tuple[int, int, float]], n_nodes: int,
                                       delta: float = 0.1, epsilon: float = 0.5,
                                       sensor_ids: Sequence[str] | None = None) -> PhysicalGraph:
    """Keep ``exp(-d^2/delta)`` as the edge weight wherever it reaches ``epsilon``."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    weights = _collect(distances, n_nodes, delta, lambda w: w >= epsilon)
    return _symmetric_graph(weights, n_nodes, sensor_ids)


def build_adjacency_gaussian_neighbor(neighbor_pairs: Iterable[tuple[int, int, float]], n_nodes: int,
                                      delta: float = 0.1,
                                      sensor_ids: Sequence[str] | None = None) -> PhysicalGraph:
    """Weight every declared neighbour pair by the Gaussian kernel, no threshold."""
    weights = _collect(neighbor_pairs, n_nodes, delta, lambda w: True)
    return _symmetric_graph(weights, n_nodes, sensor_ids)


def build_st_adjacency(g: PhysicalGraph, T: int, variant: str = NEIGHBORS_AND_SELF) -> STAdjacency:
    """Assemble the ``NT x NT`` operator: ``A`` on diagonal blocks, ``A + I`` (or ``I``)
    strictly below, nothing above. Also returns its symmetric normalization."""
    _check_variant(variant)
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    N = g.n_nodes
    A = g.adjacency
    if np.any(A.row_ids() == A.col_indices):
        raise ValueError("physical adjacency must have an empty diagonal")
    a_rows, a_cols, a_w = A.row_ids(), A.col_indices, A.weights
    eye = np.arange(N, dtype=np.int64)
    if variant == NEIGHBORS_AND_SELF:
        lo_rows = np.concatenate([a_rows, eye])
        lo_cols = np.concatenate([a_cols, eye])
        lo_w = np.concatenate([a_w, np.ones(N)])
    else:
        lo_rows, lo_cols, lo_w = eye, eye, np.ones(N)

    rows, cols, vals = [], [], []
    for t in range(T):
        for tp in range(t):
            rows.append(lo_rows + t * N)
            cols.append(lo_cols + tp * N)
            vals.append(lo_w)
        rows.append(a_rows + t * N)
        cols.append(a_cols + t * N)
        vals.append(a_w)
    raw = SparseMatrix.from_coo(N * T, N * T, np.concatenate(rows), np.concatenate(cols),
                                np.concatenate(vals))
    degree = raw.row_sums()
    return STAdjacency(N, T, raw, symmetric_normalize(raw, degree), degree, variant)


def symmetric_normalize(raw: SparseMatrix, degree) -> SparseMatrix:
    """``D^-1/2 A D^-1/2`` entrywise on the stored pattern; zero degree maps to zero."""
    degree = np.asarray(degree, dtype=np.float64)
    if degree.shape != (raw.n_rows,):
        raise ValueError(f"degree length {degree.shape} does not match {raw.n_rows} rows")
    if np.any(degree < 0):
        raise ValueError(f"negative degree at row {int(np.flatnonzero(degree < 0)[0])}")
    inv_sqrt = np.zeros_like(degree)
    pos = degree > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(degree[pos])
    if raw.n_cols != raw.n_rows:
        raise ValueError("symmetric normalization needs a square matrix")
    w = raw.weights * inv_sqrt[raw.row_ids()] * inv_sqrt[raw.col_indices]
    keep = w != 0.0
    return SparseMatrix.from_coo(raw.n_rows, raw.n_cols, raw.row_ids()[keep],
                                 raw.col_indices[keep], w[keep])


def st_nonzero_count(g: PhysicalGraph, T: int, variant: str = NEIGHBORS_AND_SELF) -> int:
    """Closed-form stored-entry count of the raw spatio-temporal matrix.

    ``T * |E|`` from the diagonal blocks plus ``T(T-1)/2`` lower blocks holding
    ``|E| + N`` (or ``N`` for self-only) entries each.
    """
    _check_variant(variant)
    E, N = g.n_edges, g.n_nodes
    lower = E + N if variant == NEIGHBORS_AND_SELF else N
    return T * E + T * (T - 1) // 2 * lower


def lower_block_violations(adj: SparseMatrix, N: int) -> list[tuple[int, int]]:
    """Coordinates of stored entries that sit in a block above the block diagonal."""
    r, c = adj.row_ids(), adj.col_indices
    bad = (c // N) > (r // N)
    return list(zip(r[bad].tolist(), c[bad].tolist()))


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_distance_file(path, sensor_ids: Sequence[str] | None = None):
    """Parse ``from_id,to_id,distance`` lines.

    Returns ``(triples, sensor_ids)`` with indices assigned by first appearance
    unless ``sensor_ids`` fixes the order.
    """
    index = {s: k for k, s in enumerate(sensor_ids)} if sensor_ids is not None else {}
    order = list(sensor_ids) if sensor_ids is not None else []
    triples = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            a, b, d = (cell.strip() for cell in row)
            if lineno == 1 and not _is_number(d):
                continue  # header
            if not _is_number(d):
                raise ValueError(f"{path}:{lineno}: non-numeric distance {d!r}")
            ids = []
            for sid in (a, b):
                if sid not in index:
                    if sensor_ids is not None:
                        raise ValueError(f"{path}:{lineno}: unknown sensor id {sid!r}")
                    index[sid] = len(order)
                    order.append(sid)
                ids.append(index[sid])
            if ids[0] == ids[1]:
                continue
            triples.append((ids[0], ids[1], float(d)))
    return triples, tuple(order)


def load_graph(path, kind: str = "threshold", delta: float = 0.1, epsilon: float = 0.5,
               sensor_ids: Sequence[str] | None = None, normalize_distances: bool = False) -> PhysicalGraph:
    """Read a distance file and build the physical graph with the chosen kernel rule."""
    triples, ids = read_distance_file(path, sensor_ids)
    if normalize_distances and triples:
        d = np.array([t[2] for t in triples])
        std = d.std() or 1.0
        triples = [(i, j, abs(x - d.mean()) / std) for (i, j, _), x in zip(triples, d)]
    n = len(ids)
    if kind == "threshold":
        return build_adjacency_gaussian_threshold(triples, n, delta, epsilon, ids)
    if kind == "neighbor":
        return build_adjacency_gaussian_neighbor(triples, n, delta, ids)
    raise ValueError(f"unknown adjacency kind {kind!r}")


def random_geometric_distances(n_nodes: int, seed: int, min_step: float = 0.1,
                               max_step: float = 0.25):
    """Random sensor layout grown one node at a time, each within ``max_step`` of an
    earlier node, so the thresholded graph (delta=0.1, epsilon=0.5 admits d <= 0.263)
    is connected. Returns all pairwise ``(i, j, d)`` with ``i < j``."""
    rng = np.random.default_rng(seed)
    pos = np.zeros((n_nodes, 2))
    for k in range(1, n_nodes):
        parent = rng.integers(0, k)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        r = rng.uniform(min_step, max_step)
        pos[k] = pos[parent] + r * np.array([np.cos(angle), np.sin(angle)])
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    return [(i, j, float(dist[i, j])) for i in range(n_nodes) for j in range(i + 1, n_nodes)]


def is_connected(g: PhysicalGraph) -> bool:
    seen = {0} if g.n_nodes else set()
    frontier = list(seen)
    rs, ci = g.adjacency.row_starts, g.adjacency.col_indices
    while frontier:
        u = frontier.pop()
        for v in ci[rs[u]:rs[u + 1]].tolist():
            if v not in seen:
                seen.add(v)
                frontier.append(v)
    return len(seen) == g.n_nodes
