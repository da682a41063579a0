"""Pinball loss, per-instance loss tensors, masked objectives and the
point/quantile evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractError

DEFAULT_QUANTILES = (0.1, 0.5, 0.9)
MAPE_GUARD = 1e-4


def check_quantiles(quantiles) -> np.ndarray:
    q = np.asarray(quantiles, dtype=np.float64)
    if q.ndim != 1 or q.size == 0 or np.any(q <= 0) or np.any(q >= 1) or np.any(np.diff(q) <= 0):
        raise ContractError(f"quantile levels must be strictly increasing in (0, 1), got {list(q)}")
    return q


def pinball(y, y_hat, alpha):
    """Quantile loss; broadcasts over arrays. ``alpha`` broadcasts against the last axis."""
    diff = np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    # equals alpha*diff for diff >= 0 and (alpha-1)*diff otherwise
    return np.maximum(alpha * diff, (alpha - 1.0) * diff)


def pinball_grad(y, y_hat, alpha):
    """d pinball / d y_hat, using the y_hat <= y branch at the kink."""
    return np.where(np.asarray(y_hat) <= np.asarray(y), -np.asarray(alpha), 1.0 - np.asarray(alpha))


def instance_loss_tensor(predictions, targets, quantiles) -> np.ndarray:
    """Per-instance loss l[node, window, quantile], averaged over the horizon.

    predictions: [W, t_out, N, Q]; targets: [W, t_out, N].
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    q = np.asarray(quantiles, dtype=np.float64)
    if predictions.ndim != 4 or predictions.shape[:3] != targets.shape or predictions.shape[3] != q.size:
        raise ContractError(
            f"prediction shape {predictions.shape} does not align with targets {targets.shape} "
            f"and {q.size} quantiles"
        )
    per_step = pinball(targets[..., None], predictions, q)  # [W, t_out, N, Q]
    return per_step.mean(axis=1).transpose(1, 0, 2)


@dataclass(frozen=True)
class Objective:
    value: float
    active: bool


def masked_objective(L, v, normalize: bool = True) -> Objective:
    L = np.asarray(L, dtype=np.float64)
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), L.shape)
    total = float(np.sum(v))
    if total == 0.0:
        return Objective(0.0, False)
    weighted = float(np.sum(v * L))
    return Objective(weighted / total if normalize else weighted, True)


def spl_objective(L, v, lam: float) -> float:
    L = np.asarray(L, dtype=np.float64)
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), L.shape)
    return float(np.sum(v * L) - lam * np.sum(v))


# ---------------------------------------------------------------- metrics


def point_metrics(y_hat, y) -> tuple[float, float, float]:
    """RMSE, MAE and MAPE (percent). MAPE skips targets with |y| < 1e-4."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ContractError(f"prediction shape {y_hat.shape} != target shape {y.shape}")
    err = y_hat - y
    rmse = float(np.sqrt(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    keep = np.abs(y) >= MAPE_GUARD
    if not np.any(keep):
        raise ContractError("every target is below the MAPE zero guard")
    mape = float(np.mean(np.abs(err[keep]) / np.abs(y[keep])) * 100.0)
    return rmse, mae, mape


def _qkey(alpha: float) -> str:
    return f"q{int(round(alpha * 100)):02d}"


@dataclass
class MetricsReport:
    """Per-horizon metrics: {horizon: {"rmse", "mae", "mape", "q10", "q50", "q90"}}."""

    horizons: dict[int, dict[str, float]]

    def to_json_dict(self) -> dict[str, dict[str, float]]:
        return {str(h): dict(m) for h, m in self.horizons.items()}

    def columns(self) -> list[str]:
        first = next(iter(self.horizons.values()))
        return list(first)

    def mean_qloss(self) -> float:
        vals = [v for m in self.horizons.values() for k, v in m.items() if k.startswith("q")]
        return float(np.mean(vals))


def quantile_report(predictions, targets, quantiles, horizons=(3, 6, 12)) -> MetricsReport:
    """Per-horizon RMSE/MAE/MAPE from the median head plus pinball per head.

    predictions: [W, t_out, N, Q]; targets: [W, t_out, N]; horizons are 1-based.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    q = check_quantiles(quantiles)
    t_out = predictions.shape[1]
    if predictions.shape[:3] != targets.shape or predictions.shape[3] != q.size:
        raise ContractError(f"prediction shape {predictions.shape} does not match targets {targets.shape}")
    for h in horizons:
        if not 1 <= h <= t_out:
            raise ContractError(f"horizon {h} outside 1..{t_out}")
    try:
        median = int(np.flatnonzero(np.isclose(q, 0.5))[0])
    except IndexError:
        raise ContractError("quantile set has no median head for point metrics") from None
    out: dict[int, dict[str, float]] = {}
    for h in horizons:
        pred_h = predictions[:, h - 1]
        y_h = targets[:, h - 1]
        rmse, mae, mape = point_metrics(pred_h[..., median], y_h)
        row = {"rmse": rmse, "mae": mae, "mape": mape}
        for k, alpha in enumerate(q):
            row[_qkey(alpha)] = float(np.mean(pinball(y_h, pred_h[..., k], alpha)))
        out[int(h)] = row
    return MetricsReport(out)


def mean_qloss(predictions, targets, quantiles) -> float:
    """Mean pinball over all windows, steps, nodes and heads."""
    return float(np.mean(pinball(np.asarray(targets)[..., None], predictions, np.asarray(quantiles))))
