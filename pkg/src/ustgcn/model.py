"""Unified spatio-temporal convolution stack and regression head.

Parameters live in a flat ``dict[str, ndarray]``:

* ``temp.{l}``  ``(T, d)``      per-timestamp feature weights of layer ``l``
* ``final.{l}`` ``(2d, d)``     maps each row's ``[self || aggregated]`` to ``d``
* ``head.F``    ``(T d, T d)``  mixes the per-timestamp embeddings of a node
* ``head.W1``/``head.b1``, ``head.W2``/``head.b2``  two-layer predictor
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .graph import STAdjacency

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    T: int = 12
    d0: int = 8
    K: int = 3
    h: int = 64
    n: int = 12

    def __post_init__(self):
        for name in ("T", "d0", "h", "n"):
            if getattr(self, name) < 1:
                raise ValueError(f"model dimension {name} must be positive, got {getattr(self, name)}")
        if self.K < 0:
            raise ValueError(f"layer count K must be >= 0, got {self.K}")


@dataclass
class ForwardTrace:
    layers: list = field(default_factory=list)  # X_Self per layer, layers[0] is the input
    z_e: object = None
    z_f: object = None
    prediction: object = None


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(T: int, d0: int, K: int, h: int, n: int, seed: int) -> dict[str, np.ndarray]:
    """Temporal weights start at one, every other matrix Glorot-uniform, biases zero."""
    cfg = ModelConfig(T, d0, K, h, n)
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        b = glorot_bound(fan_in, fan_out)
        return rng.uniform(-b, b, size=(fan_in, fan_out))

    d = cfg.d0
    params: dict[str, np.ndarray] = {}
    for l in range(K):
        params[f"temp.{l}"] = np.ones((T, d))
        params[f"final.{l}"] = glorot(2 * d, d)
    params["head.F"] = glorot(T * d, T * d)
    params["head.W1"] = glorot(T * d, h)
    params["head.b1"] = np.zeros(h)
    params["head.W2"] = glorot(h, n)
    params["head.b2"] = np.zeros(n)
    return params


def count_parameters(params: dict[str, np.ndarray]) -> int:
    return int(sum(np.size(v) for v in params.values()))


def layer_forward(adj: STAdjacency, x, temp, final):
    """One unified convolution: aggregate ``x * W_temp`` over the normalized
    spatio-temporal operator, then ``relu([x || aggregated] @ W_final)``."""
    rows = x.shape[-2]
    if rows != adj.N * adj.T:
        raise nx.ShapeError(f"input has {rows} rows, adjacency expects {adj.N * adj.T}")
    weighted = nx.elementwise_mul_broadcast(x, temp, adj.N)
    x_st = nx.sparse_dense_matmul(adj.normalized, weighted)
    return nx.relu(nx.dense_matmul(nx.concat_columns([x, x_st]), final))


def model_forward(adj: STAdjacency, x, params, K: int | None = None, trace: ForwardTrace | None = None):
    """Prediction of shape ``(N, n)`` (or ``(B, N, n)`` for a batch of inputs).

    ``params`` may hold arrays or tape :class:`~ustgcn.numerics.Var` handles.
    """
    if K is None:
        K = sum(1 for k in params if k.startswith("final."))
    xv = x.value if isinstance(x, nx.Var) else np.asarray(x)
    if xv.shape[-2] != adj.N * adj.T:
        raise nx.ShapeError(f"sample has {xv.shape[-2]} rows, adjacency expects N*T={adj.N * adj.T}")
    h = x
    if trace is not None:
        trace.layers.append(h)
    for l in range(K):
        h = layer_forward(adj, h, params[f"temp.{l}"], params[f"final.{l}"])
        if trace is not None:
            trace.layers.append(h)
    z = nx.timestamps_to_columns(h, adj.N)
    z_f = nx.dense_matmul(z, params["head.F"])
    hidden = nx.relu(nx.add_bias(nx.dense_matmul(z_f, params["head.W1"]), params["head.b1"]))
    pred = nx.add_bias(nx.dense_matmul(hidden, params["head.W2"]), params["head.b2"])
    if trace is not None:
        trace.z_e, trace.z_f, trace.prediction = h, z_f, pred
    return pred


def loss_and_grads(adj: STAdjacency, x, y, params) -> tuple[float, dict[str, np.ndarray]]:
    """MSE of the batch prediction against ``y`` and its parameter gradients."""
    tape = nx.GradientTape()
    watched = {k: tape.watch(v, k) for k, v in params.items()}
    loss = nx.mse_loss(model_forward(adj, x, watched), y)
    return float(loss.value), nx.backward(tape, loss)


def predict(adj: STAdjacency, x, params, batch: int = 512) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 2:
        return model_forward(adj, x, params)
    out = [model_forward(adj, x[i:i + batch], params) for i in range(0, x.shape[0], batch)]
    return np.concatenate(out, axis=0) if out else np.empty((0,))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict[str, np.ndarray], fingerprint: dict) -> None:
    """Write an ``.npz`` holding every parameter array plus a JSON header."""
    meta = {"version": CHECKPOINT_VERSION, "fingerprint": fingerprint,
            "shapes": {k: list(v.shape) for k, v in params.items()}}
    arrays = {f"param/{k}": np.asarray(v, dtype=np.float64) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    for k, shape in meta["shapes"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"checkpoint array {k!r} has shape {params[k].shape}, header says {shape}")
    return params, meta["fingerprint"]
