"""Dense float64 arithmetic helpers, seeded random streams, Adam and a
central-difference gradient oracle.

Tensors are plain ``numpy.ndarray`` objects of dtype float64; the helpers
here only enforce the shape/finiteness contracts the rest of the package
relies on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np


class ContractError(ValueError):
    """Raised when an operation is called with inputs violating its contract."""


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message)
        self.index = index


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
        raise NonFiniteError(f"{name} has a non-finite entry at {bad}", bad)
    return arr


# ---------------------------------------------------------------- random


def _label_words(label: str) -> list[int]:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


@dataclass(frozen=True)
class RandomStream:
    """Counter-based (Philox) stream identified by a seed and a label path.

    Two streams with the same seed and path produce identical draws; child
    streams are keyed by their label, so they are independent of how many
    draws the parent has made.
    """

    seed: int
    path: tuple[str, ...] = ()
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        entropy = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF]
        for label in self.path:
            entropy.extend(_label_words(label))
        ss = np.random.SeedSequence(entropy)
        object.__setattr__(self, "_gen", np.random.Generator(np.random.Philox(ss)))

    @property
    def rng(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, x):
        return self._gen.permutation(x)

    def random(self, size=None):
        return self._gen.random(size)


def derive_stream(root: RandomStream, label: str) -> RandomStream:
    return RandomStream(root.seed, root.path + (label,))


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, shape, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0, lr, **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape or state.v.shape != params.shape:
        raise ContractError(
            f"adam_step shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"moments {state.m.shape}/{state.v.shape}"
        )
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params - update, replace(state, m=m, v=v, t=t)


# ---------------------------------------------------------------- gradient oracle


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = tuple(int(j) for j in np.unravel_index(i, x.shape))
            raise NonFiniteError(f"objective is not finite when perturbing coordinate {idx}", idx)
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradient_agreement(analytic: np.ndarray, numeric: np.ndarray, rel_tol: float = 1e-4, abs_floor: float = 1e-7):
    """Return (ok, max relative error) for elementwise gradient agreement.

    An entry passes when the absolute difference is below ``abs_floor`` or the
    difference relative to the larger magnitude is below ``rel_tol``.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(diff <= abs_floor, 0.0, diff / np.where(scale > 0, scale, 1.0))
    worst = float(rel.max()) if rel.size else 0.0
    return worst < rel_tol, worst
