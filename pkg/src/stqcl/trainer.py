"""Training loops: vanilla quantile training, single-view self-paced
training, and the three-expert pipeline with stacking fusion."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import curriculum as cl
from .data import STDataset, SplitSpec, ZScoreStats, gather, make_windows, split, stratified_batches, zscore_apply, zscore_fit, zscore_invert
from .forecaster import ModelParams, ModelSpec, backward, flat_grad, forward, init_params
from .fusion import FusionParams, fuse, train_fusion
from .losses import DEFAULT_QUANTILES, MetricsReport, check_quantiles, instance_loss_tensor, mean_qloss, quantile_report
from .numerics import AdamState, ContractError, RandomStream, adam_step, derive_stream

log = logging.getLogger(__name__)

SCHEDULERS = ("none", "spatial", "temporal", "quantile", "all")


@dataclass
class TrainConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES
    lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 64
    seed: int = 0
    mu: tuple[int, int, int] = (300, 300, 300)
    p0: float = 30.0
    dp: float = 10.0
    warm_epochs: int = 5
    scheduler: str = "none"
    quantile_start: tuple[float, ...] = cl.HARD_TO_EASY_START
    quantile_weighting: str = "binary"
    easy_first: tuple[bool, bool] = (True, True)
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    horizons: tuple[int, ...] = (3, 6, 12)
    fusion_lr: float = 1e-3
    fusion_epochs: int = 200

    def validate(self) -> None:
        try:
            check_quantiles(self.quantiles)
        except ContractError as err:
            raise ContractError(f"quantiles: {err}") from None
        if self.model.n_quantiles != len(self.quantiles):
            raise ContractError("model.n_quantiles must match the length of quantiles")
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        for name in ("max_epochs", "patience", "batch_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.warm_epochs < 0:
            raise ContractError(f"warm_epochs must be >= 0, got {self.warm_epochs}")
        if len(self.mu) != 3 or any(m < 1 for m in self.mu):
            raise ContractError(f"mu must hold three positive step sizes, got {list(self.mu)}")
        if not 0 <= self.p0 <= 100:
            raise ContractError(f"p0 must lie in [0, 100], got {self.p0}")
        if self.dp <= 0:
            raise ContractError(f"dp must be positive, got {self.dp}")
        if self.scheduler not in SCHEDULERS:
            raise ContractError(f"scheduler must be one of {SCHEDULERS}, got {self.scheduler!r}")
        if self.quantile_weighting not in ("binary", "level"):
            raise ContractError(f"quantile_weighting must be 'binary' or 'level', got {self.quantile_weighting!r}")
        if len(self.quantile_start) != len(self.quantiles):
            raise ContractError("quantile_start must have one level per quantile")
        if self.fusion_lr <= 0 or self.fusion_epochs < 1:
            raise ContractError("fusion_lr must be positive and fusion_epochs >= 1")
        for h in self.horizons:
            if not 1 <= h <= self.model.t_out:
                raise ContractError(f"horizons: {h} outside 1..{self.model.t_out}")
        try:
            SplitSpec(*self.split)
        except ContractError as err:
            raise ContractError(f"split: {err}") from None


@dataclass
class Prepared:
    """Normalized series with chronological window splits."""

    values: np.ndarray
    raw: np.ndarray
    stats: ZScoreStats
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    t_in: int
    t_out: int

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    def targets(self, starts, normalized: bool = False) -> np.ndarray:
        src = self.values if normalized else self.raw
        return gather(src, starts, self.t_in, self.t_out)[1]


def prepare(dataset: STDataset, t_in: int = 12, t_out: int = 12, spec: SplitSpec = SplitSpec()) -> Prepared:
    windows = make_windows(dataset, t_in, t_out)
    train, val, test = split(windows, spec, span=t_in + t_out)
    stats = zscore_fit(dataset.values[: train[-1] + t_in + t_out])
    norm = zscore_apply(dataset, stats)
    return Prepared(norm.values, dataset.values, stats, train, val, test, t_in, t_out)


def predict(params: ModelParams, prep: Prepared, starts, chunk: int = 512) -> np.ndarray:
    """Normalized raw-head predictions [W, t_out, N, Q]."""
    starts = np.asarray(starts)
    out = []
    for lo in range(0, len(starts), chunk):
        x, _ = gather(prep.values, starts[lo : lo + chunk], prep.t_in, prep.t_out)
        out.append(forward(params, x))
    return np.concatenate(out, axis=0)


def denormalize(pred: np.ndarray, prep: Prepared) -> np.ndarray:
    return zscore_invert(pred, prep.stats, node_axis=2)


def training_loss_tensor(params: ModelParams, prep: Prepared, quantiles) -> np.ndarray:
    """L[node, window, quantile] over the training windows (normalized units)."""
    pred = predict(params, prep, prep.train)
    return instance_loss_tensor(pred, prep.targets(prep.train, normalized=True), quantiles)


def validation_qloss(params: ModelParams, prep: Prepared, quantiles, starts=None) -> float:
    starts = prep.val if starts is None else starts
    pred = denormalize(predict(params, prep, starts), prep)
    return mean_qloss(pred, prep.targets(starts), quantiles)


@dataclass
class RunReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    pace_trace: list[dict] = field(default_factory=list)
    metrics: MetricsReport | None = None
    best_epoch: int = 0
    wall_time: float = 0.0
    experts: dict[str, "RunReport"] = field(default_factory=dict)
    fusion_val_loss: float | None = None


class _Pacer:
    """Owns the pace state and the live mask during self-paced training."""

    def __init__(self, pace: cl.PaceState, prep: Prepared, quantiles):
        self.pace = pace
        self.prep = prep
        self.quantiles = np.asarray(quantiles)
        self.mask = cl.current_mask(pace, prep.train)
        self.iteration = 0

    @property
    def saturated(self) -> bool:
        return self.pace.saturated

    def before_step(self, params: ModelParams) -> None:
        self.iteration += 1
        if not cl.due_views(self.pace, self.iteration):
            return
        scores = cl.score_groups(training_loss_tensor(params, self.prep, self.quantiles))
        self.pace = cl.advance_pace(self.pace, scores, self.iteration)
        fresh = cl.current_mask(self.pace, self.prep.train)
        # batches read the mask lazily, so update in place
        self.mask.nodes, self.mask.windows = fresh.nodes, fresh.windows
        self.mask.weights, self.mask.levels = fresh.weights, fresh.levels


class _Fitter:
    """Epoch loop with Adam, validation tracking and patience-based stopping."""

    def __init__(self, params: ModelParams, prep: Prepared, cfg: TrainConfig, stream: RandomStream):
        self.params = params
        self.prep = prep
        self.cfg = cfg
        self.stream = stream
        self.adam = AdamState.fresh(params.size, lr=cfg.lr)
        self.report = RunReport()
        self.best_params = params.copy()
        self.best_val = np.inf
        self.bad_epochs = 0
        self.full = cl.full_mask(cfg.quantiles)

    @property
    def epochs_done(self) -> int:
        return len(self.report.val_loss)

    def run_epoch(self, pacer: _Pacer | None = None) -> bool:
        """Train one epoch; returns True when early stopping fires."""
        mask = self.full if pacer is None else pacer.mask
        prep = self.prep
        losses = []
        batches = stratified_batches(
            prep.values, prep.train, self.cfg.batch_size, mask, self.stream,
            prep.t_in, prep.t_out, epoch_size=len(prep.train),
        )
        n_batches = -(-len(prep.train) // self.cfg.batch_size)
        for _ in range(n_batches):
            if pacer is not None:
                pacer.before_step(self.params)
                mask = pacer.mask
            batch = next(batches)
            grads, loss = backward(
                self.params, batch.inputs, batch.targets, mask.weights, mask.levels,
                nodes=None if mask.nodes is None else batch.nodes,
            )
            flat, self.adam = adam_step(self.params.flat(), flat_grad(self.params, grads), self.adam)
            self.params = self.params.with_flat(flat)
            losses.append(loss)
        val = validation_qloss(self.params, prep, self.cfg.quantiles)
        self.report.train_loss.append(float(np.mean(losses)))
        self.report.val_loss.append(val)
        if val < self.best_val:
            self.best_val, self.best_params, self.bad_epochs = val, self.params.copy(), 0
            self.report.best_epoch = self.epochs_done
        elif pacer is None or pacer.saturated:
            # patience only counts once the curriculum covers the full objective
            self.bad_epochs += 1
        return self.bad_epochs >= self.cfg.patience

    def finish(self) -> tuple[ModelParams, RunReport]:
        self.params = self.best_params.copy()
        return self.params, self.report


def _root(cfg: TrainConfig) -> RandomStream:
    return RandomStream(cfg.seed)


def _new_fitter(cfg: TrainConfig, prep: Prepared) -> _Fitter:
    root = _root(cfg)
    params = init_params(cfg.model, derive_stream(root, "init"))
    return _Fitter(params, prep, cfg, derive_stream(root, "train"))


def _spec_for(cfg: TrainConfig, prep: Prepared) -> TrainConfig:
    if cfg.model.t_in != prep.t_in or cfg.model.t_out != prep.t_out:
        raise ContractError("model t_in/t_out differ from the prepared windows")
    return cfg


def train_vanilla(cfg: TrainConfig, prep: Prepared) -> tuple[ModelParams, RunReport]:
    cfg.validate()
    _spec_for(cfg, prep)
    t0 = time.perf_counter()
    fitter = _new_fitter(cfg, prep)
    for _ in range(cfg.max_epochs):
        if fitter.run_epoch():
            break
    params, report = fitter.finish()
    report.metrics = evaluate(params, prep, horizons=cfg.horizons, quantiles=cfg.quantiles)
    report.wall_time = time.perf_counter() - t0
    return params, report


def _warm(cfg: TrainConfig, prep: Prepared) -> tuple[_Fitter, cl.DifficultyScores]:
    fitter = _new_fitter(cfg, prep)
    for _ in range(min(cfg.warm_epochs, cfg.max_epochs)):
        fitter.run_epoch()
    scores = cl.score_groups(training_loss_tensor(fitter.params, prep, cfg.quantiles))
    return fitter, scores


def _pace_for(cfg: TrainConfig, kinds: Sequence[str], scores: cl.DifficultyScores) -> cl.PaceState:
    pace = cl.make_pace(
        kinds, cfg.quantiles, cfg.p0, cfg.dp, cfg.mu,
        quantile_start=cfg.quantile_start, easy_first=cfg.easy_first, weighting=cfg.quantile_weighting,
    )
    return cl.initialize_pace(pace, scores)


def warm_start(cfg: TrainConfig, prep: Prepared, kinds: Sequence[str] = cl.VIEWS) -> tuple[ModelParams, cl.PaceState]:
    """Brief full-data training, then lambda_0 per view from the p0-th percentile of its scores."""
    cfg.validate()
    fitter, scores = _warm(cfg, prep)
    return fitter.params.copy(), _pace_for(cfg, kinds, scores)


def _continue_spl(fitter: _Fitter, cfg: TrainConfig, prep: Prepared, pace: cl.PaceState) -> tuple[ModelParams, RunReport]:
    pacer = _Pacer(pace, prep, cfg.quantiles)
    while fitter.epochs_done < cfg.max_epochs:
        if fitter.run_epoch(pacer):
            break
    params, report = fitter.finish()
    report.pace_trace = list(pacer.pace.history)
    return params, report


def train_spl(cfg: TrainConfig, prep: Prepared, kind: str) -> tuple[ModelParams, RunReport]:
    if kind not in cl.VIEWS:
        raise ContractError(f"scheduler kind must be one of {cl.VIEWS}, got {kind!r}")
    cfg.validate()
    _spec_for(cfg, prep)
    t0 = time.perf_counter()
    fitter, scores = _warm(cfg, prep)
    params, report = _continue_spl(fitter, cfg, prep, _pace_for(cfg, [kind], scores))
    report.metrics = evaluate(params, prep, horizons=cfg.horizons, quantiles=cfg.quantiles)
    report.wall_time = time.perf_counter() - t0
    return params, report


@dataclass
class Ensemble:
    experts: dict[str, ModelParams]
    fusion: FusionParams

    def predict(self, prep: Prepared, starts) -> np.ndarray:
        outs = [predict(p, prep, starts) for p in self.experts.values()]
        return fuse(*outs, params=self.fusion)


def train_stqcl(cfg: TrainConfig, prep: Prepared, kinds: Sequence[str] = cl.VIEWS) -> tuple[Ensemble, RunReport]:
    """Shared warm start, one expert per scheduler view, then stacking fusion."""
    cfg.validate()
    _spec_for(cfg, prep)
    t0 = time.perf_counter()
    root = _root(cfg)
    warm, scores = _warm(cfg, prep)
    experts: dict[str, ModelParams] = {}
    report = RunReport()
    for kind in kinds:
        fitter = copy.deepcopy(warm)
        fitter.stream = derive_stream(root, f"expert-{kind}")
        params, sub = _continue_spl(fitter, cfg, prep, _pace_for(cfg, [kind], scores))
        experts[kind] = params
        report.experts[kind] = sub
        report.pace_trace.extend({"expert": kind, **row} for row in sub.pace_trace)
        log.info("expert %s: best epoch %d, val %.5f", kind, sub.best_epoch, min(sub.val_loss))

    norm_targets = lambda starts: prep.targets(starts, normalized=True)  # noqa: E731
    train_out = [predict(p, prep, prep.train) for p in experts.values()]
    val_out = [predict(p, prep, prep.val) for p in experts.values()]
    fusion = train_fusion(
        train_out, norm_targets(prep.train), cfg.quantiles, derive_stream(root, "fusion"),
        val_out, norm_targets(prep.val), lr=cfg.fusion_lr, max_epochs=cfg.fusion_epochs, patience=cfg.patience,
    )
    ens = Ensemble(experts, fusion)
    val_pred = denormalize(ens.predict(prep, prep.val), prep)
    report.fusion_val_loss = mean_qloss(val_pred, prep.targets(prep.val), cfg.quantiles)
    report.metrics = evaluate(ens, prep, horizons=cfg.horizons, quantiles=cfg.quantiles)
    report.wall_time = time.perf_counter() - t0
    return ens, report


def evaluate(model, prep: Prepared, starts=None, horizons=(3, 6, 12), quantiles=DEFAULT_QUANTILES) -> MetricsReport:
    """Metrics in original units on the test windows, heads sorted to remove crossing."""
    starts = prep.test if starts is None else starts
    for h in horizons:
        if not 1 <= h <= prep.t_out:
            raise ContractError(f"horizon {h} outside 1..{prep.t_out}")
    if isinstance(model, Ensemble):
        pred = model.predict(prep, starts)
    elif isinstance(model, ModelParams):
        pred = predict(model, prep, starts)
    else:
        pred = model(prep, starts)
    pred = np.sort(denormalize(pred, prep), axis=-1)
    return quantile_report(pred, prep.targets(starts), quantiles, horizons)


def test_qloss(model, prep: Prepared, quantiles=DEFAULT_QUANTILES) -> float:
    """Mean pinball over all test windows, steps, nodes and heads (original units)."""
    if isinstance(model, Ensemble):
        pred = model.predict(prep, prep.test)
    else:
        pred = predict(model, prep, prep.test)
    pred = np.sort(denormalize(pred, prep), axis=-1)
    return mean_qloss(pred, prep.targets(prep.test), quantiles)


test_qloss.__test__ = False  # not a pytest test
