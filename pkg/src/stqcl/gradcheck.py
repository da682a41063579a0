"""Finite-difference verification of the forecaster's analytic gradients over
randomly drawn model and loss configurations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forecaster import ModelSpec, backward, flat_grad, init_params, objective_value, _forward_cache
from .numerics import RandomStream, derive_stream, finite_diff_grad, gradient_agreement

KINK_MARGIN = 1e-3


@dataclass(frozen=True)
class GradcheckCase:
    index: int
    spec: ModelSpec
    batch: int
    n_cols: int
    normalize: bool
    worst: float  # max relative error after the absolute floor
    max_abs: float
    ok: bool


def _random_spec(stream: RandomStream, pinned: dict | None) -> ModelSpec:
    rng = stream.rng
    fields = {
        "arch": ("linear", "mlp")[int(rng.integers(2))],
        "t_in": int(rng.integers(1, 6)),
        "t_out": int(rng.integers(1, 5)),
        "n_quantiles": int(rng.integers(1, 4)),
        "hidden": int(rng.integers(1, 6)),
        "shared": bool(rng.integers(2)),
    }
    fields["n_nodes"] = int(rng.integers(1, 5))
    fields.update(pinned or {})
    if fields["shared"]:
        fields["n_nodes"] = fields.get("n_nodes") if pinned and "n_nodes" in pinned else None
    return ModelSpec(**fields)


def check_case(index: int, stream: RandomStream, pinned: dict | None = None, h: float = 1e-6) -> GradcheckCase:
    rng = stream.rng
    spec = _random_spec(stream, pinned)
    params = init_params(spec, derive_stream(stream, "init"))
    for name, t in params.tensors.items():
        if name.startswith("b"):
            params.tensors[name] = rng.normal(scale=0.3, size=t.shape)
    batch = int(rng.integers(1, 4))
    if spec.shared:
        n_cols, nodes = int(rng.integers(1, 4)), None
    else:
        n_cols = int(rng.integers(1, spec.n_nodes + 1))
        nodes = np.sort(rng.choice(spec.n_nodes, size=n_cols, replace=False))
    x = rng.normal(size=(batch, spec.t_in, n_cols))
    levels = np.sort(rng.uniform(0.02, 0.98, size=spec.n_quantiles))
    weights = rng.integers(0, 2, size=(batch, n_cols, spec.n_quantiles)).astype(float)
    weights[0, 0, 0] = 1.0
    normalize = bool(rng.integers(2))

    out = _forward_cache(params, x, nodes)[0]  # [B, n, t_out, Q]
    y = rng.normal(size=(batch, spec.t_out, n_cols))
    # keep every residual clear of the pinball kink so central differences are exact
    yn = y.transpose(0, 2, 1)[..., None]
    close = np.abs(yn - out) < KINK_MARGIN
    while close.any():
        yn = np.where(close.any(axis=-1, keepdims=True), yn + 10 * KINK_MARGIN, yn)
        close = np.abs(yn - out) < KINK_MARGIN
    y = yn[..., 0].transpose(0, 2, 1)

    grads, _ = backward(params, x, y, weights, levels, nodes, normalize)
    analytic = flat_grad(params, grads)
    f = lambda vec: objective_value(params.with_flat(vec), x, y, weights, levels, nodes, normalize)  # noqa: E731
    numeric = finite_diff_grad(f, params.flat(), h=h)
    ok, worst = gradient_agreement(analytic, numeric)
    max_abs = float(np.max(np.abs(analytic - numeric)))
    return GradcheckCase(index, spec, batch, n_cols, normalize, worst, max_abs, ok)


def run_gradcheck(n_configs: int = 20, seed: int = 0, pinned: dict | None = None) -> list[GradcheckCase]:
    root = RandomStream(seed, ("gradcheck",))
    return [check_case(i, derive_stream(root, f"case-{i}"), pinned) for i in range(n_configs)]
