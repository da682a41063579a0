"""Small multi-quantile forecasters (linear autoregressor, one-hidden-layer
MLP) with hand-written backpropagation of the masked pinball objective.

Each node's ``t_in`` history is mapped to a ``t_out x Q`` block.  In shared
mode every node uses the same weights; in per-node mode weights carry a
leading node axis and the forward pass needs the node indices of the columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import pinball
from .numerics import ContractError, RandomStream


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "linear"
    t_in: int = 12
    t_out: int = 12
    n_quantiles: int = 3
    hidden: int = 32
    shared: bool = True
    n_nodes: int | None = None  # required when shared is False

    def __post_init__(self):
        if self.arch not in ("linear", "mlp"):
            raise ContractError(f"unknown architecture {self.arch!r}")
        if self.arch == "mlp" and self.hidden < 1:
            raise ContractError("mlp hidden width must be >= 1")
        if min(self.t_in, self.t_out, self.n_quantiles) < 1:
            raise ContractError("t_in, t_out and n_quantiles must be positive")
        if not self.shared and not self.n_nodes:
            raise ContractError("per-node parameters need n_nodes")

    @property
    def n_out(self) -> int:
        return self.t_out * self.n_quantiles

    def shapes(self) -> dict[str, tuple[int, ...]]:
        lead = () if self.shared else (self.n_nodes,)
        if self.arch == "linear":
            return {"W": lead + (self.t_in, self.n_out), "b": lead + (self.n_out,)}
        return {
            "W1": lead + (self.t_in, self.hidden),
            "b1": lead + (self.hidden,),
            "W2": lead + (self.hidden, self.n_out),
            "b2": lead + (self.n_out,),
        }


@dataclass
class ModelParams:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].reshape(-1) for k in self.spec.shapes()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        out, pos = {}, 0
        for name, shape in self.spec.shapes().items():
            size = int(np.prod(shape))
            out[name] = vec[pos : pos + size].reshape(shape).copy()
            pos += size
        if pos != vec.size:
            raise ContractError(f"flat vector has {vec.size} entries, model needs {pos}")
        return ModelParams(self.spec, out)

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.spec.shapes().values())


def init_params(spec: ModelSpec, stream: RandomStream) -> ModelParams:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    tensors = {}
    for name, shape in spec.shapes().items():
        if name.startswith("b"):
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[-2])
            tensors[name] = stream.uniform(-bound, bound, shape)
    return ModelParams(spec, tensors)


def _node_weights(params: ModelParams, name: str, nodes):
    w = params.tensors[name]
    if params.spec.shared:
        return w
    if nodes is None:
        return w
    return w[np.asarray(nodes)]


def _as_batch(inputs: np.ndarray):
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ContractError(f"input must be [t_in, n] or [B, t_in, n], got {x.shape}")
    return x, single


def _forward_cache(params: ModelParams, inputs, nodes=None):
    """Node-major forward pass: returns out [B, n, t_out, Q] and a backprop cache."""
    spec = params.spec
    x, single = _as_batch(inputs)
    if x.shape[1] != spec.t_in:
        raise ContractError(f"input has {x.shape[1]} steps, model expects t_in={spec.t_in}")
    if not spec.shared:
        n_cols = x.shape[2]
        expected = spec.n_nodes if nodes is None else len(nodes)
        if n_cols != expected:
            raise ContractError(f"input has {n_cols} node columns, node index list has {expected}")
    xn = x.transpose(0, 2, 1)  # [B, n, t_in]
    cache = {"xn": xn}
    if spec.arch == "linear":
        W, b = _node_weights(params, "W", nodes), _node_weights(params, "b", nodes)
        out = _apply(xn, W, b, spec.shared)
    else:
        W1, b1 = _node_weights(params, "W1", nodes), _node_weights(params, "b1", nodes)
        W2, b2 = _node_weights(params, "W2", nodes), _node_weights(params, "b2", nodes)
        h = np.tanh(_apply(xn, W1, b1, spec.shared))
        cache["h"] = h
        out = _apply(h, W2, b2, spec.shared)
    B, n = xn.shape[:2]
    return out.reshape(B, n, spec.t_out, spec.n_quantiles), cache, single


def _apply(x, W, b, shared):
    if shared:
        return x @ W + b
    return np.einsum("bni,nio->bno", x, W) + b


def forward(params: ModelParams, inputs, nodes=None, noncrossing: bool = False) -> np.ndarray:
    """Predictions [t_out, n, Q] for a [t_in, n] block, or [B, t_out, n, Q] for a batch."""
    out, _, single = _forward_cache(params, inputs, nodes)
    pred = out.transpose(0, 2, 1, 3)
    if noncrossing:
        pred = np.sort(pred, axis=-1)
    return pred[0] if single else pred


def batch_loss_tensor(pred: np.ndarray, targets: np.ndarray, levels) -> np.ndarray:
    """Horizon-averaged pinball per (window, node, quantile) for a batch."""
    return pinball(targets[..., None], pred, np.asarray(levels)).mean(axis=1)


def backward(params: ModelParams, inputs, targets, weights, levels, nodes=None, normalize: bool = True):
    """Gradient of the masked objective sum(v * l) / sum(v) (or sum(v * l)).

    ``weights`` broadcasts to [B, n, Q]; ``levels`` are the quantile levels
    the heads are trained at.  Returns (grads dict, loss).
    """
    spec = params.spec
    out, cache, single = _forward_cache(params, inputs, nodes)  # [B, n, t_out, Q]
    y = np.asarray(targets, dtype=np.float64)
    if single:
        y = y[None]
    B, n, t_out, Q = out.shape
    if y.shape != (B, t_out, n):
        raise ContractError(f"target shape {y.shape} does not match prediction {(B, t_out, n)}")
    levels = np.asarray(levels, dtype=np.float64)
    v = np.broadcast_to(np.asarray(weights, dtype=np.float64), (B, n, Q))
    total = float(v.sum())
    if total == 0.0:
        return {k: np.zeros_like(t) for k, t in params.tensors.items()}, 0.0
    scale = total if normalize else 1.0

    diff = np.ascontiguousarray(y.transpose(0, 2, 1))[..., None] - out
    # d pinball / d y_hat; the kink (diff == 0) takes the y_hat <= y branch
    slope = (diff < 0) - levels
    dout = (slope * (v / (t_out * scale))[:, :, None, :]).reshape(B, n, spec.n_out)
    # pinball = -diff * slope, so the weighted objective is a single dot product
    loss = -float(np.dot(diff.reshape(-1), dout.reshape(-1)))

    grads = {}
    if spec.arch == "linear":
        grads["W"], grads["b"] = _apply_grads(params, "W", "b", cache["xn"], dout, nodes)
    else:
        h = cache["h"]
        grads["W2"], grads["b2"] = _apply_grads(params, "W2", "b2", h, dout, nodes)
        W2 = _node_weights(params, "W2", nodes)
        if spec.shared:
            dh = dout @ W2.T
        else:
            dh = np.einsum("bno,nho->bnh", dout, W2)
        dz = dh * (1.0 - h * h)
        grads["W1"], grads["b1"] = _apply_grads(params, "W1", "b1", cache["xn"], dz, nodes)
    return grads, loss


def _apply_grads(params, wname, bname, x, dout, nodes):
    if params.spec.shared:
        x2 = x.reshape(-1, x.shape[-1])
        d2 = dout.reshape(-1, dout.shape[-1])
        return x2.T @ d2, d2.sum(axis=0)
    gW_sub = np.einsum("bni,bno->nio", x, dout)
    gb_sub = dout.sum(axis=0)
    if nodes is None:
        return gW_sub, gb_sub
    gW = np.zeros_like(params.tensors[wname])
    gb = np.zeros_like(params.tensors[bname])
    gW[np.asarray(nodes)] = gW_sub
    gb[np.asarray(nodes)] = gb_sub
    return gW, gb


def objective_value(params: ModelParams, inputs, targets, weights, levels, nodes=None, normalize: bool = True) -> float:
    """Masked objective computed from a plain forward pass (for gradient checks)."""
    pred = forward(params, inputs, nodes)
    if pred.ndim == 3:
        pred = pred[None]
        targets = np.asarray(targets)[None]
    L = batch_loss_tensor(pred, np.asarray(targets, dtype=np.float64), levels)
    v = np.broadcast_to(np.asarray(weights, dtype=np.float64), L.shape)
    total = float(v.sum())
    if total == 0.0:
        return 0.0
    return float(np.sum(v * L)) / (total if normalize else 1.0)


def flat_grad(params: ModelParams, grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([grads[k].reshape(-1) for k in params.spec.shapes()])
