"""Datasets, synthetic generation, normalization, windowing, splits and
stratified batch sampling.

A window is identified by its start row ``s``: the input block is
``values[s : s + t_in]`` and the target block is
``values[s + t_in : s + t_in + t_out]``.  The forecast anchor (last observed
row) is therefore ``s + t_in - 1``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numerics import ContractError, RandomStream

STD_FLOOR = 1e-8


class DataError(ValueError):
    """Malformed or insufficient data."""


class EmptyInclusionError(RuntimeError):
    """No window or node is currently included; the pace must be advanced."""


@dataclass
class STDataset:
    values: np.ndarray  # [T_total, N]
    node_ids: list[str]
    timestamps: list[str] = field(default_factory=list)
    interval_minutes: int = 5
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"values must be 2-D [time, node], got shape {self.values.shape}")
        if self.values.shape[1] != len(self.node_ids):
            raise DataError(f"{self.values.shape[1]} columns but {len(self.node_ids)} node ids")
        if self.values.shape[1] < 1:
            raise DataError("dataset needs at least one node")
        if not self.timestamps:
            self.timestamps = [str(t) for t in range(self.values.shape[0])]

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------- CSV


def load_csv(path, min_rows: int = 24) -> STDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0] != "timestamp" or len(header) < 2:
            raise DataError(f"{path}: line 1: header must be 'timestamp' followed by node ids")
        node_ids = header[1:]
        n = len(node_ids)
        stamps: list[str] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n + 1:
                raise DataError(f"{path}: line {lineno}: expected {n} readings, found {len(row) - 1}")
            try:
                vals = [float(c) for c in row[1:]]
            except ValueError:
                bad = next(c for c in row[1:] if not _is_float(c))
                raise DataError(f"{path}: line {lineno}: non-numeric cell {bad!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}: line {lineno}: missing or non-finite reading")
            stamps.append(row[0])
            rows.append(vals)
    if len(rows) < min_rows:
        raise DataError(f"{path}: {len(rows)} data rows, at least {min_rows} required (t_in + t_out)")
    return STDataset(np.array(rows, dtype=np.float64).reshape(len(rows), n), node_ids, stamps)


def _is_float(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def write_csv(dataset: STDataset, path) -> None:
    """Write with shortest round-trip float formatting and LF line endings."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", *dataset.node_ids])
        for stamp, row in zip(dataset.timestamps, dataset.values):
            writer.writerow([stamp, *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticConfig:
    n_nodes: int = 20
    n_steps: int = 4000
    period: int = 288
    amplitude: float = 50.0
    offset: float = 200.0
    noise_std: float = 2.0
    hard_node_fraction: float = 0.25
    hard_node_noise: float = 4.0
    hard_time_fraction: float = 0.1
    shift_magnitude: float = 1.0
    shift_span: int = 48
    interval_minutes: int = 5
    seed: int = 0

    def validate(self) -> None:
        for name in ("hard_node_fraction", "hard_time_fraction"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {val}")
        if self.hard_node_noise < 1.0:
            raise ContractError(f"hard_node_noise must be >= 1, got {self.hard_node_noise}")
        for name in ("n_nodes", "n_steps", "period", "shift_span"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.noise_std < 0 or self.shift_magnitude < 0 or self.amplitude < 0:
            raise ContractError("noise_std, shift_magnitude and amplitude must be nonnegative")


@dataclass
class SyntheticParts:
    clean: np.ndarray
    noise: np.ndarray
    shift: np.ndarray
    hard_nodes: np.ndarray
    hard_steps: np.ndarray


def synthetic_parts(cfg: SyntheticConfig) -> SyntheticParts:
    """Separate components of the synthetic series (their sum is the data)."""
    cfg.validate()
    root = RandomStream(cfg.seed, ("synthetic",))
    n, t_total = cfg.n_nodes, cfg.n_steps
    phase = root.uniform(0.0, 2.0 * np.pi, n)
    t = np.arange(t_total, dtype=np.float64)[:, None]
    clean = cfg.amplitude * np.sin(2.0 * np.pi * t / cfg.period + phase[None, :]) + cfg.offset

    n_hard = int(round(cfg.hard_node_fraction * n))
    hard_nodes = np.sort(root.permutation(n)[:n_hard])
    scale = np.full(n, cfg.noise_std)
    scale[hard_nodes] *= cfg.hard_node_noise
    noise = root.normal(0.0, 1.0, (t_total, n)) * scale[None, :]

    # regime shifts: fixed-length spans placed at random until the hard fraction is met
    hard_steps = np.zeros(t_total, dtype=bool)
    target = int(round(cfg.hard_time_fraction * t_total))
    span = min(cfg.shift_span, t_total)
    while hard_steps.sum() < target:
        start = int(root.integers(0, t_total - span + 1))
        hard_steps[start : start + span] = True
    sign = np.where(root.random(n) < 0.5, -1.0, 1.0)
    shift = np.zeros((t_total, n))
    shift[hard_steps] = cfg.shift_magnitude * cfg.amplitude * sign[None, :]
    return SyntheticParts(clean, noise, shift, hard_nodes, hard_steps)


def generate_synthetic(cfg: SyntheticConfig) -> STDataset:
    parts = synthetic_parts(cfg)
    values = parts.clean + parts.noise + parts.shift
    ids = [f"n{i:03d}" for i in range(cfg.n_nodes)]
    stamps = [str(i * cfg.interval_minutes) for i in range(cfg.n_steps)]
    return STDataset(values, ids, stamps, cfg.interval_minutes)


# ---------------------------------------------------------------- normalization


@dataclass(frozen=True)
class ZScoreStats:
    mean: np.ndarray
    std: np.ndarray


def zscore_fit(train_values: np.ndarray) -> ZScoreStats:
    train_values = np.asarray(train_values, dtype=np.float64)
    mean = train_values.mean(axis=0)
    std = np.maximum(train_values.std(axis=0), STD_FLOOR)
    return ZScoreStats(mean, std)


def _check_stats(stats: ZScoreStats, n: int) -> None:
    if stats.mean.shape != (n,) or stats.std.shape != (n,):
        raise DataError(f"normalization stats cover {stats.mean.shape[0]} nodes, data has {n}")


def zscore_apply(dataset: STDataset, stats: ZScoreStats) -> STDataset:
    _check_stats(stats, dataset.n_nodes)
    values = (dataset.values - stats.mean) / stats.std
    return replace(dataset, values=values, mean=stats.mean, std=stats.std)


def zscore_invert(values: np.ndarray, stats: ZScoreStats, node_axis: int = -1, nodes=None) -> np.ndarray:
    """Map normalized values back to original units.

    ``node_axis`` says which axis of ``values`` indexes nodes; ``nodes``
    selects a subset of the fitted nodes when the array covers only some.
    """
    values = np.asarray(values, dtype=np.float64)
    mean, std = stats.mean, stats.std
    if nodes is not None:
        mean, std = mean[nodes], std[nodes]
    if values.shape[node_axis] != mean.shape[0]:
        raise DataError(f"normalization stats cover {mean.shape[0]} nodes, array has {values.shape[node_axis]}")
    shape = [1] * values.ndim
    shape[node_axis] = -1
    return values * std.reshape(shape) + mean.reshape(shape)


# ---------------------------------------------------------------- windows and splits


def make_windows(dataset_or_steps, t_in: int, t_out: int) -> np.ndarray:
    t_total = dataset_or_steps if isinstance(dataset_or_steps, (int, np.integer)) else dataset_or_steps.n_steps
    need = t_in + t_out
    if t_total < need:
        raise DataError(f"series has {t_total} steps; at least t_in + t_out = {need} required")
    return np.arange(t_total - need + 1)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if any(not 0.0 < f < 1.0 for f in fr):
            raise ContractError(f"split fractions must lie in (0, 1), got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ContractError(f"split fractions must sum to 1, got {sum(fr)}")


def split(windows, spec: SplitSpec, span: int | None = None):
    """Chronological train/val/test split of window starts.

    With ``span`` (= t_in + t_out) given, windows of a later part whose span
    reaches back into the rows used by the earlier part are dropped, so no
    observation is shared across parts.
    """
    windows = np.asarray(windows)
    n = len(windows)
    if n == 0:
        raise DataError("no windows to split")
    n_train = int(round(spec.train * n))
    n_val = int(round((spec.train + spec.val) * n)) - n_train
    parts = [windows[:n_train], windows[n_train : n_train + n_val], windows[n_train + n_val :]]
    if span is not None:
        for i in (1, 2):
            if len(parts[i - 1]) and len(parts[i]):
                last_row = parts[i - 1][-1] + span - 1
                parts[i] = parts[i][parts[i] > last_row]
    for name, part in zip(("train", "val", "test"), parts):
        if len(part) == 0:
            raise DataError(f"{name} split is empty ({n} windows)")
    return tuple(parts)


def gather(values: np.ndarray, starts, t_in: int, t_out: int, nodes=None):
    """Stack input [B, t_in, n] and target [B, t_out, n] blocks for window starts."""
    starts = np.asarray(starts, dtype=np.int64)
    idx = starts[:, None] + np.arange(t_in + t_out)[None, :]
    block = values[idx]
    if nodes is not None:
        block = block[:, :, np.asarray(nodes)]
    return block[:, :t_in], block[:, t_in:]


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    starts: np.ndarray
    nodes: np.ndarray
    inputs: np.ndarray  # [B, t_in, n_active]
    targets: np.ndarray  # [B, t_out, n_active]


def stratified_batches(
    values: np.ndarray,
    windows,
    batch_size: int,
    mask,
    stream: RandomStream,
    t_in: int,
    t_out: int,
    epoch_size: int | None = None,
) -> Iterator[Batch]:
    """One epoch of stratified batches.

    Every batch holds all included nodes of each selected window, so excluded
    node columns are dropped rather than left as gaps.  Included windows are
    enumerated once in shuffled order; when ``epoch_size`` exceeds their
    count, further included windows are resampled (with replacement) to keep
    the epoch length fixed.

    ``mask`` needs ``windows`` (included window starts, or None for all) and
    ``nodes`` (included node indices, or None for all).
    """
    windows = np.asarray(windows)
    included = windows if mask is None or mask.windows is None else np.asarray(mask.windows)
    if len(included) == 0 or len(_nodes(values, mask)) == 0:
        raise EmptyInclusionError("curriculum mask includes no windows or no nodes; advance the pace")
    order = stream.permutation(included)
    if epoch_size is not None and epoch_size > len(order):
        extra = stream.integers(0, len(included), epoch_size - len(order))
        order = np.concatenate([order, included[extra]])
    for lo in range(0, len(order), batch_size):
        starts = order[lo : lo + batch_size]
        # node inclusion is read per batch so pace updates apply mid-epoch
        nodes = _nodes(values, mask)
        if len(nodes) == 0:
            raise EmptyInclusionError("curriculum mask includes no nodes; advance the pace")
        x, y = gather(values, starts, t_in, t_out, None if mask is None or mask.nodes is None else nodes)
        yield Batch(starts, nodes, x, y)


def _nodes(values: np.ndarray, mask) -> np.ndarray:
    if mask is None or mask.nodes is None:
        return np.arange(values.shape[1])
    return np.asarray(mask.nodes)
def node_columns(n_total: int, nodes: Sequence[int] | None) -> np.ndarray:
    return np.arange(n_total) if nodes is None else np.asarray(nodes)
