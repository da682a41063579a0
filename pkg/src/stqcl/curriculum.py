"""Self-paced curriculum: group difficulty scores, threshold masks, quantile
level scheduling and pace (lambda) advancement.

Loss tensors are indexed ``L[node, window, quantile]``.  Group scores are
the means of ``L`` over the other two axes; a group is active when its score
is strictly below the view's lambda.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import ContractError

VIEWS = ("spatial", "temporal", "quantile")
HARD_TO_EASY_START = (0.02, 0.5, 0.98)


@dataclass(frozen=True)
class DifficultyScores:
    spatial: np.ndarray  # [N]
    temporal: np.ndarray  # [W]
    quantile: np.ndarray  # [Q]

    def view(self, name: str) -> np.ndarray:
        return getattr(self, name)


def _group_mean(L: np.ndarray, axis: int) -> np.ndarray:
    # correctly rounded sums make the scores independent of reduction order
    rows = np.moveaxis(L, axis, 0).reshape(L.shape[axis], -1)
    n = rows.shape[1]
    return np.array([math.fsum(r) / n for r in rows.tolist()])


def score_groups(L) -> DifficultyScores:
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 3:
        raise ContractError(f"loss tensor must be [node, window, quantile], got {L.shape}")
    return DifficultyScores(_group_mean(L, 0), _group_mean(L, 1), _group_mean(L, 2))


def instance_mask(L, lam: float) -> np.ndarray:
    return (np.asarray(L) < lam).astype(np.float64)


def spatial_mask(scores, lam: float) -> np.ndarray:
    """Indices of nodes whose score is strictly below ``lam`` (may be empty)."""
    return np.flatnonzero(np.asarray(scores) < lam)


def temporal_mask(scores, lam: float) -> np.ndarray:
    """Indices of windows whose score is strictly below ``lam`` (may be empty)."""
    return np.flatnonzero(np.asarray(scores) < lam)


def nearest_rank(scores, percentile: float) -> float:
    """Nearest-rank percentile; 100 maps to +inf so every group passes a strict test."""
    if percentile >= 100.0:
        return math.inf
    s = np.sort(np.asarray(scores, dtype=np.float64))
    rank = max(1, math.ceil(percentile / 100.0 * s.size))
    return float(s[rank - 1])


# ---------------------------------------------------------------- masks


@dataclass
class CurriculumMask:
    """Factored indicator tensor.

    ``nodes`` are node indices, ``windows`` are window starts (None = all);
    ``weights`` are per-head loss weights and ``levels`` the quantile levels
    the heads are trained at.
    """

    nodes: np.ndarray | None
    windows: np.ndarray | None
    weights: np.ndarray
    levels: np.ndarray

    def dense(self, n_nodes: int, window_starts) -> np.ndarray:
        window_starts = np.asarray(window_starts)
        node_on = np.ones(n_nodes) if self.nodes is None else np.isin(np.arange(n_nodes), self.nodes).astype(float)
        win_on = (
            np.ones(len(window_starts))
            if self.windows is None
            else np.isin(window_starts, self.windows).astype(float)
        )
        return node_on[:, None, None] * win_on[None, :, None] * np.asarray(self.weights)[None, None, :]

    def is_empty(self) -> bool:
        return (
            (self.nodes is not None and len(self.nodes) == 0)
            or (self.windows is not None and len(self.windows) == 0)
            or not np.any(np.asarray(self.weights) > 0)
        )


def full_mask(levels) -> CurriculumMask:
    levels = np.asarray(levels, dtype=np.float64)
    return CurriculumMask(None, None, np.ones(levels.size), levels)


# ---------------------------------------------------------------- pace


@dataclass
class ViewPace:
    percentile: float  # percentile applied at the next update
    lam: float = math.inf
    mu: int = 300
    increment: float = 10.0
    active: bool = False
    easy_first: bool = True
    included: np.ndarray | None = None  # group indices; None = everything

    def signed(self, scores: np.ndarray) -> np.ndarray:
        return np.asarray(scores) if self.easy_first else -np.asarray(scores)

    @property
    def saturated(self) -> bool:
        return not self.active or self.lam == math.inf


@dataclass
class QuantileSchedule:
    start: np.ndarray
    target: np.ndarray
    progress: float = 0.0
    increment: float = 1.0
    weighting: str = "binary"  # or "level": weight = effective level

    def levels(self) -> np.ndarray:
        p = self.progress
        out = (1.0 - p) * self.start + p * self.target
        out[np.isclose(self.target, 0.5)] = 0.5
        return out


@dataclass
class PaceState:
    spatial: ViewPace
    temporal: ViewPace
    quantile: ViewPace
    schedule: QuantileSchedule
    history: list = field(default_factory=list)

    def view(self, name: str) -> ViewPace:
        return getattr(self, name)

    @property
    def saturated(self) -> bool:
        views_done = all(self.view(v).saturated for v in VIEWS)
        return views_done and (not self.quantile.active or self.schedule.progress >= 1.0)


def make_pace(
    kinds,
    quantiles,
    p0: float = 30.0,
    dp: float = 10.0,
    mu=(300, 300, 300),
    quantile_start=HARD_TO_EASY_START,
    easy_first=(True, True),
    weighting: str = "binary",
) -> PaceState:
    """Pace state before lambda_0 is set; inactive views admit everything."""
    kinds = set(kinds)
    unknown = kinds - set(VIEWS)
    if unknown:
        raise ContractError(f"unknown scheduler view(s): {sorted(unknown)}")
    target = np.asarray(quantiles, dtype=np.float64)
    start = np.asarray(quantile_start, dtype=np.float64)
    if start.shape != target.shape:
        raise ContractError("quantile start levels must match the quantile set")
    if np.any(start <= 0) or np.any(start >= 1):
        raise ContractError("quantile start levels must lie in (0, 1)")
    views = {}
    for name, m, ef in zip(VIEWS, mu, (*easy_first, True)):
        active = name in kinds
        views[name] = ViewPace(
            p0 if active else 100.0,
            lam=-math.inf if active else math.inf,
            mu=int(m),
            increment=dp,
            active=active,
            easy_first=ef,
        )
    q_active = "quantile" in kinds
    inc = 1.0 if p0 >= 100.0 else dp / (100.0 - p0)
    sched = QuantileSchedule(
        start if q_active else target.copy(),
        target,
        0.0 if q_active else 1.0,
        inc,
        weighting,
    )
    return PaceState(views["spatial"], views["temporal"], views["quantile"], sched)


def _apply_view(view: ViewPace, scores: np.ndarray) -> ViewPace:
    """Set lambda from the view's next percentile, grow the inclusion set, bump the percentile."""
    signed = view.signed(scores)
    # lambda never decreases, even when refreshed scores shrink
    lam = max(view.lam, nearest_rank(signed, view.percentile))
    fresh = np.flatnonzero(signed < lam)
    included = fresh if view.included is None else np.union1d(view.included, fresh)
    if lam == math.inf:
        included = None
    return replace(view, lam=lam, included=included, percentile=min(100.0, view.percentile + view.increment))


def _view_empty(view: ViewPace) -> bool:
    return view.included is not None and len(view.included) == 0


def initialize_pace(state: PaceState, scores: DifficultyScores) -> PaceState:
    """Set lambda_0 for every active view from warm-start scores."""
    out = replace(state)
    for name in VIEWS:
        view = out.view(name)
        if view.active:
            setattr(out, name, _apply_view(view, scores.view(name)))
            if name == "quantile" and out.quantile.lam == math.inf:
                out.schedule = replace(out.schedule, progress=1.0)
            out.history = out.history + [_trace_row(out, name, view.percentile, scores, 0)]
    return _resolve_empty(out, scores, iteration=0)


def _trace_row(state: PaceState, name: str, used: float, scores: DifficultyScores, iteration: int) -> dict:
    view = state.view(name)
    return {
        "iteration": iteration,
        "view": name,
        "percentile": used,
        "lambda": view.lam,
        "included": len(scores.view(name)) if view.included is None else int(len(view.included)),
        "levels": [float(x) for x in state.schedule.levels()],
    }


def _resolve_empty(state: PaceState, scores: DifficultyScores, iteration: int) -> PaceState:
    for name in VIEWS:
        while _view_empty(state.view(name)):
            state = _advance_view(state, name, scores, iteration)
    return state


def _advance_view(state: PaceState, name: str, scores: DifficultyScores, iteration: int) -> PaceState:
    view = state.view(name)
    used = view.percentile
    out = replace(state)
    setattr(out, name, _apply_view(view, scores.view(name)))
    if name == "quantile":
        sched = out.schedule
        progress = 1.0 if out.quantile.lam == math.inf else min(1.0, sched.progress + sched.increment)
        out.schedule = replace(sched, progress=progress)
    out.history = state.history + [_trace_row(out, name, used, scores, iteration)]
    return out


def advance_pace(state: PaceState, scores: DifficultyScores, iteration: int) -> PaceState:
    """Advance each active, unsaturated view whose step size divides ``iteration``."""
    out = state
    for name in due_views(state, iteration):
        out = _advance_view(out, name, scores, iteration)
    return _resolve_empty(out, scores, iteration)


def due_views(state: PaceState, iteration: int) -> list[str]:
    out = []
    for name in VIEWS:
        view = state.view(name)
        if not view.active or iteration % view.mu != 0:
            continue
        if view.saturated and (name != "quantile" or state.schedule.progress >= 1.0):
            continue
        out.append(name)
    return out


def quantile_weights(state: PaceState, scores=None) -> tuple[np.ndarray, np.ndarray]:
    """Effective quantile levels and per-head weights for the current phase.

    Heads outside the quantile view's inclusion set get weight 0.  When
    ``scores`` are given the inclusion is recomputed from the view's lambda
    instead of the stored set.
    """
    sched = state.schedule
    levels = sched.levels()
    q = sched.target.size
    view = state.quantile
    if scores is not None:
        q_scores = scores.quantile if isinstance(scores, DifficultyScores) else np.asarray(scores)
        on = view.signed(q_scores) < view.lam
    elif view.included is None:
        on = np.ones(q, dtype=bool)
    else:
        on = np.isin(np.arange(q), view.included)
    weights = on.astype(np.float64)
    if sched.weighting == "level":
        weights = weights * levels
    return levels, weights


def current_mask(state: PaceState, window_starts) -> CurriculumMask:
    window_starts = np.asarray(window_starts)
    levels, weights = quantile_weights(state)
    nodes = state.spatial.included
    windows = None if state.temporal.included is None else window_starts[state.temporal.included]
    return CurriculumMask(
        None if nodes is None else np.asarray(nodes),
        windows,
        weights,
        levels,
    )
