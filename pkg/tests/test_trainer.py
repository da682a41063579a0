import math
from dataclasses import replace

import numpy as np
import pytest

from stqcl import curriculum as cl
from stqcl.data import STDataset, SyntheticConfig, generate_synthetic, synthetic_parts
from stqcl.forecaster import ModelSpec, backward, init_params
from stqcl.losses import point_metrics, quantile_report
from stqcl.numerics import ContractError, RandomStream
from stqcl.trainer import (
    TrainConfig,
    evaluate,
    predict,
    prepare,
    train_spl,
    train_stqcl,
    train_vanilla,
    validation_qloss,
    warm_start,
)

SMALL = SyntheticConfig(n_nodes=6, n_steps=700, period=48, shift_span=12, seed=3)


@pytest.fixture(scope="module")
def prep():
    return prepare(generate_synthetic(SMALL))


def _cfg(**kw):
    base = dict(max_epochs=6, warm_epochs=1, mu=(10, 10, 10), fusion_epochs=20)
    base.update(kw)
    return TrainConfig(**base)


def test_noiseless_sinusoids_are_learned():
    t = np.arange(1500)
    vals = np.column_stack([2.0 + np.sin(2 * np.pi * t / 48 + ph) for ph in (0.0, 1.0, 2.0)])
    p = prepare(STDataset(vals, ["a", "b", "c"]))
    _, report = train_vanilla(TrainConfig(max_epochs=50), p)
    assert min(report.val_loss) < 1e-3


def test_vanilla_deterministic(prep):
    _, a = train_vanilla(_cfg(max_epochs=3), prep)
    _, b = train_vanilla(_cfg(max_epochs=3), prep)
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss


def test_early_stopping_restores_best(prep):
    cfg = _cfg(max_epochs=40, patience=2, lr=0.05)
    params, report = train_vanilla(cfg, prep)
    assert len(report.train_loss) == len(report.val_loss) <= 40
    best = min(report.val_loss)
    assert report.val_loss[report.best_epoch - 1] == best
    assert validation_qloss(params, prep, cfg.quantiles) == best
    if len(report.val_loss) < 40:
        assert len(report.val_loss) == report.best_epoch + 2


def test_degenerate_spl_matches_vanilla(prep):
    cfg = _cfg(p0=100.0, quantile_start=(0.1, 0.5, 0.9), warm_epochs=0)
    _, van = train_vanilla(cfg, prep)
    for kind in cl.VIEWS:
        _, spl = train_spl(cfg, prep, kind)
        assert spl.train_loss == van.train_loss
        assert spl.val_loss == van.val_loss


def test_spl_trace_monotone(prep):
    for kind in cl.VIEWS:
        _, report = train_spl(_cfg(), prep, kind)
        rows = report.pace_trace
        assert rows and all(r["view"] == kind for r in rows)
        for a, b in zip(rows, rows[1:]):
            assert b["lambda"] >= a["lambda"]
            assert b["percentile"] >= a["percentile"]
            assert b["included"] >= a["included"]


def test_spl_rejects_unknown_kind(prep):
    with pytest.raises(ContractError):
        train_spl(_cfg(), prep, "none")


def test_warm_start_excludes_hard_nodes():
    cfg = SyntheticConfig(n_nodes=12, n_steps=1200, hard_node_fraction=0.25, hard_node_noise=6.0, seed=1)
    p = prepare(generate_synthetic(cfg))
    hard = synthetic_parts(cfg).hard_nodes
    tc = _cfg(warm_epochs=3)
    _, pace = warm_start(tc, p, kinds=("spatial",))
    assert pace.spatial.lam < math.inf
    assert not set(hard.tolist()) & set(pace.spatial.included.tolist())
    _, again = warm_start(tc, p, kinds=("spatial",))
    assert again.spatial.lam == pace.spatial.lam


def test_excluded_nodes_contribute_no_gradient(prep):
    spec = ModelSpec(arch="mlp", hidden=4)
    params = init_params(spec, RandomStream(0))
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 12, 6))
    y = rng.normal(size=(5, 12, 6))
    v = np.ones((5, 6, 3))
    v[:, [1, 4]] = 0.0
    g_masked, _ = backward(params, x, y, v, [0.1, 0.5, 0.9])
    x2, y2 = x.copy(), y.copy()
    x2[:, :, [1, 4]] = rng.normal(size=(5, 12, 2)) * 100
    y2[:, :, [1, 4]] = -50.0
    g_changed, _ = backward(params, x2, y2, v, [0.1, 0.5, 0.9])
    keep = [0, 2, 3, 5]
    g_sub, _ = backward(params, x[:, :, keep], y[:, :, keep], 1.0, [0.1, 0.5, 0.9])
    for k in g_masked:
        assert np.array_equal(g_masked[k], g_changed[k])
        assert np.allclose(g_masked[k], g_sub[k], rtol=1e-12, atol=1e-15)


def test_stqcl_fusion_and_ablation(prep):
    cfg = _cfg()
    ens, report = train_stqcl(cfg, prep)
    assert set(ens.experts) == set(cl.VIEWS)
    assert report.fusion_val_loss <= min(min(r.val_loss) for r in report.experts.values()) + 1e-3
    assert sorted(report.metrics.horizons) == [3, 6, 12]
    ens2, report2 = train_stqcl(cfg, prep, kinds=("spatial", "temporal"))
    assert set(ens2.experts) == {"spatial", "temporal"}
    assert report2.metrics.horizons != report.metrics.horizons
    ens3, report3 = train_stqcl(cfg, prep)
    assert report3.metrics.horizons == report.metrics.horizons
    assert np.array_equal(ens3.fusion.W, ens.fusion.W)


def test_evaluate_perfect_oracle(prep):
    def oracle(p, starts):
        return np.repeat(p.targets(starts, normalized=True)[..., None], 3, axis=-1)

    rep = evaluate(oracle, prep)
    assert all(abs(v) < 1e-9 for m in rep.horizons.values() for v in m.values())


def test_evaluate_constant_median(prep):
    # a zero prediction in normalized units is each node's training mean
    def constant(p, starts):
        return np.zeros((len(starts), p.t_out, p.n_nodes, 3))

    rep = evaluate(constant, prep)
    y = prep.targets(prep.test)
    for h in (3, 6, 12):
        pred = np.broadcast_to(prep.stats.mean, y[:, h - 1].shape)
        rmse, mae, mape = point_metrics(pred, y[:, h - 1])
        assert rep.horizons[h]["mae"] == pytest.approx(mae, rel=1e-12)
        assert rep.horizons[h]["rmse"] == pytest.approx(rmse, rel=1e-12)
        assert rep.horizons[h]["q50"] == rep.horizons[h]["mae"] / 2


def test_evaluate_rejects_horizon_13(prep):
    params = init_params(ModelSpec(), RandomStream(0))
    with pytest.raises(ContractError, match="13"):
        evaluate(params, prep, horizons=(3, 13))


def test_evaluate_sorts_heads(prep):
    params = init_params(ModelSpec(), RandomStream(0))
    params.tensors["b"][:] = np.tile([1.0, 0.0, -1.0], 12)
    raw = predict(params, prep, prep.test)
    assert np.any(raw[..., 0] > raw[..., 2])
    rep = evaluate(params, prep)
    expected = quantile_report(np.sort(raw * prep.stats.std[:, None] + prep.stats.mean[:, None], axis=-1),
                               prep.targets(prep.test), (0.1, 0.5, 0.9))
    for h in (3, 6, 12):
        assert rep.horizons[h]["q10"] == pytest.approx(expected.horizons[h]["q10"], rel=1e-12)


def test_config_validation_names_fields():
    for kw, field in [({"lr": 0.0}, "lr"), ({"p0": 120.0}, "p0"), ({"scheduler": "x"}, "scheduler"),
                      ({"horizons": (13,)}, "horizons"), ({"batch_size": 0}, "batch_size")]:
        with pytest.raises(ContractError, match=field):
            replace(TrainConfig(), **kw).validate()
