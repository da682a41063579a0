"""Monte Carlo model of batch utilization under stratified sampling.

Each iteration draws a ``b x N`` hard/easy matrix (rows are windows, columns
are nodes).  An instance-level scheduler leaves excluded entries in place as
unusable slots.  Group-level schedulers drop whole groups instead: the spatial
one removes majority-hard columns, the temporal one swaps majority-hard rows
for freshly drawn majority-easy rows.  Waste is counted in matrix slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EmptyInclusionError
from .numerics import ContractError, RandomStream

PLACEMENTS = ("independent", "node", "time")
SIM_SCHEDULERS = ("instance", "spatial", "temporal")
_MAX_REDRAWS = 1000


@dataclass(frozen=True)
class SimConfig:
    n_nodes: int = 20
    batch_groups: int = 64
    hard_fraction: float = 0.3
    placement: str = "independent"
    iterations: int = 1000
    seed: int = 0

    def validate(self) -> "SimConfig":
        if self.n_nodes < 1:
            raise ContractError("n_nodes must be >= 1")
        if self.batch_groups < 1:
            raise ContractError("batch_groups must be >= 1")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ContractError(f"hard_fraction must lie in [0, 1], got {self.hard_fraction}")
        if self.placement not in PLACEMENTS:
            raise ContractError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")
        return self


@dataclass(frozen=True)
class SimReport:
    scheduler: str
    placement: str
    hard_fraction: float
    utilization_mean: float
    utilization_std: float
    wasted_fraction: float  # wasted slots / occupied slots, pooled over iterations
    throughput: float  # useful slots per iteration
    impurity: float  # share of trained slots that are hard
    empty_iterations: int
    iterations: int


def draw_matrix(cfg: SimConfig, stream: RandomStream, rows: int | None = None) -> np.ndarray:
    """Boolean hard-instance matrix [rows, N] under the configured placement."""
    b = cfg.batch_groups if rows is None else rows
    f = cfg.hard_fraction
    if cfg.placement == "independent":
        return stream.random((b, cfg.n_nodes)) < f
    if cfg.placement == "node":
        cols = stream.random(cfg.n_nodes) < f
        return np.broadcast_to(cols, (b, cfg.n_nodes)).copy()
    rows_hard = stream.random(b) < f
    return np.broadcast_to(rows_hard[:, None], (b, cfg.n_nodes)).copy()


def _temporal_fill(hard: np.ndarray, cfg: SimConfig, stream: RandomStream) -> np.ndarray:
    keep = hard.mean(axis=1) <= 0.5
    out = hard[keep]
    need = hard.shape[0] - out.shape[0]
    for _ in range(_MAX_REDRAWS):
        if need == 0:
            return out
        fresh = draw_matrix(cfg, stream, rows=need)
        ok = fresh[fresh.mean(axis=1) <= 0.5]
        out = np.concatenate([out, ok])
        need -= ok.shape[0]
    raise EmptyInclusionError("no easy rows available to refill the batch; the pace must advance")


def simulate(cfg: SimConfig, scheduler: str) -> SimReport:
    cfg.validate()
    if scheduler not in SIM_SCHEDULERS:
        raise ContractError(f"scheduler must be one of {SIM_SCHEDULERS}, got {scheduler!r}")
    if scheduler != "instance" and cfg.hard_fraction == 1.0:
        raise EmptyInclusionError("every group is hard: the batch matrix is empty; the pace must advance")
    stream = RandomStream(cfg.seed, ("sim", cfg.placement, scheduler))
    util, useful_total, occupied_total, hard_trained = [], 0, 0, 0
    empty = 0
    for _ in range(cfg.iterations):
        hard = draw_matrix(cfg, stream)
        if scheduler == "instance":
            occupied = hard.size
            useful = occupied - int(hard.sum())
            trained_hard = 0
        elif scheduler == "spatial":
            kept = hard[:, hard.mean(axis=0) <= 0.5]
            occupied = useful = kept.size
            trained_hard = int(kept.sum())
        else:
            kept = _temporal_fill(hard, cfg, stream)
            occupied = useful = kept.size
            trained_hard = int(kept.sum())
        if occupied == 0:
            empty += 1
            continue
        util.append(useful / occupied)
        useful_total += useful
        occupied_total += occupied
        hard_trained += trained_hard
    if not util:
        raise EmptyInclusionError("every iteration produced an empty batch matrix")
    u = np.asarray(util)
    return SimReport(
        scheduler=scheduler,
        placement=cfg.placement,
        hard_fraction=float(cfg.hard_fraction),
        utilization_mean=float(u.mean()),
        utilization_std=float(u.std()),
        wasted_fraction=(occupied_total - useful_total) / occupied_total,
        throughput=useful_total / cfg.iterations,
        impurity=hard_trained / useful_total if useful_total else 0.0,
        empty_iterations=empty,
        iterations=cfg.iterations,
    )


def sweep(base: SimConfig, fractions, placements=PLACEMENTS, schedulers=SIM_SCHEDULERS) -> list[SimReport]:
    """All (scheduler, placement, f) combinations; combinations that empty the batch are skipped."""
    out = []
    for f in fractions:
        for placement in placements:
            cfg = SimConfig(base.n_nodes, base.batch_groups, float(f), placement, base.iterations, base.seed)
            for kind in schedulers:
                try:
                    out.append(simulate(cfg, kind))
                except EmptyInclusionError:
                    continue
    return out
