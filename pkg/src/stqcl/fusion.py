"""Stacking fusion: one linear map from the concatenated expert quantile
outputs to the final quantile heads, shared across (step, node) positions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import pinball, pinball_grad
from .numerics import AdamState, ContractError, RandomStream, adam_step


@dataclass
class FusionParams:
    W: np.ndarray  # [n_experts * Q, Q]
    b: np.ndarray  # [Q]

    @classmethod
    def averaging(cls, n_experts: int, q: int) -> "FusionParams":
        W = np.vstack([np.eye(q) / n_experts] * n_experts)
        return cls(W, np.zeros(q))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W.reshape(-1), self.b])

    def with_flat(self, vec: np.ndarray) -> "FusionParams":
        k = self.W.size
        return FusionParams(vec[:k].reshape(self.W.shape).copy(), vec[k:].copy())


def _stack(experts) -> np.ndarray:
    experts = [np.asarray(e, dtype=np.float64) for e in experts]
    shape = experts[0].shape
    for e in experts[1:]:
        if e.shape != shape:
            raise ContractError(f"expert outputs differ in shape: {shape} vs {e.shape}")
    return np.concatenate(experts, axis=-1)


def fuse(*experts, params: FusionParams) -> np.ndarray:
    """Z = concat(experts) @ W + b at every position; output keeps the expert shape."""
    X = _stack(experts)
    if X.shape[-1] != params.W.shape[0]:
        raise ContractError(f"fusion expects {params.W.shape[0]} stacked heads, got {X.shape[-1]}")
    return X @ params.W + params.b


def fusion_loss(experts, targets, quantiles, params: FusionParams) -> float:
    Z = fuse(*experts, params=params)
    return float(np.mean(pinball(np.asarray(targets)[..., None], Z, np.asarray(quantiles))))


def train_fusion(
    experts,
    targets,
    quantiles,
    stream: RandomStream,
    val_experts=None,
    val_targets=None,
    lr: float = 1e-3,
    max_epochs: int = 200,
    patience: int = 10,
    batch_size: int = 1024,
) -> FusionParams:
    """Fit the fusion layer with Adam on mean pinball loss.

    Starts from plain averaging of the experts.  Early stopping watches the
    validation loss (the training loss when no validation data is given);
    the best parameters seen, including the starting point, are returned.
    """
    X = _stack(experts)
    q = np.asarray(quantiles, dtype=np.float64)
    Q = q.size
    Xf = X.reshape(-1, X.shape[-1])
    yf = np.asarray(targets, dtype=np.float64).reshape(-1)
    if Xf.shape[0] != yf.shape[0]:
        raise ContractError("expert outputs and targets do not align")
    if val_experts is None:
        val_experts, val_targets = experts, targets

    params = FusionParams.averaging(len(experts), Q)
    state = AdamState.fresh(params.flat().shape, lr=lr)
    best = params
    best_loss = fusion_loss(val_experts, val_targets, q, params)
    bad = 0
    n = Xf.shape[0]
    for _ in range(max_epochs):
        order = stream.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            xb, yb = Xf[idx], yf[idx]
            z = xb @ params.W + params.b
            dz = pinball_grad(yb[:, None], z, q) / z.size
            gW = xb.T @ dz
            gb = dz.sum(axis=0)
            flat, state = adam_step(params.flat(), np.concatenate([gW.reshape(-1), gb]), state)
            params = params.with_flat(flat)
        loss = fusion_loss(val_experts, val_targets, q, params)
        if loss < best_loss:
            best, best_loss, bad = params, loss, 0
        else:
            bad += 1
            if bad >= patience:
                break
    return best
