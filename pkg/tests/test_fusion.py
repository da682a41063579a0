import numpy as np
import pytest

from stqcl.fusion import FusionParams, fuse, fusion_loss, train_fusion
from stqcl.numerics import ContractError, RandomStream

Q = (0.1, 0.5, 0.9)


def _experts(seed=0, w=4, t=3, n=2):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(w, t, n, 3)) for _ in range(3)]


def test_selector_weights_pick_first_expert():
    ex = _experts()
    W = np.zeros((9, 3))
    W[:3] = np.eye(3)
    assert np.array_equal(fuse(*ex, params=FusionParams(W, np.zeros(3))), ex[0])


def test_averaging_on_single_position():
    a, b, c = np.array([[[1.0, 2.0, 3.0]]]), np.array([[[4.0, 5.0, 6.0]]]), np.array([[[7.0, 8.0, 9.0]]])
    out = fuse(a, b, c, params=FusionParams.averaging(3, 3))
    assert out.shape == (1, 1, 3)
    assert np.allclose(out, [[[4.0, 5.0, 6.0]]], rtol=0, atol=1e-15)


def test_output_shape_matches_experts():
    ex = _experts(w=1)
    assert fuse(*[e[0] for e in ex], params=FusionParams.averaging(3, 3)).shape == (3, 2, 3)


def test_shape_mismatch():
    ex = _experts()
    with pytest.raises(ContractError):
        fuse(ex[0], ex[1][:, :2], ex[2], params=FusionParams.averaging(3, 3))


def test_linearity_without_bias():
    rng = np.random.default_rng(1)
    p = FusionParams(rng.normal(size=(9, 3)), np.zeros(3))
    X, Y = _experts(2), _experts(3)
    lhs = fuse(*[2.0 * x + 3.0 * y for x, y in zip(X, Y)], params=p)
    rhs = 2.0 * fuse(*X, params=p) + 3.0 * fuse(*Y, params=p)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def _perfect_fixture(seed, w):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(w, 12, 5))
    perfect = np.repeat(y[..., None], 3, axis=-1)
    noisy = perfect + rng.normal(0.0, 1.0, size=perfect.shape)
    biased = perfect + rng.normal(0.5, 1.0, size=perfect.shape)
    return y, [noisy, perfect, biased]


def test_identical_experts_never_worse_than_one():
    y, ex = _perfect_fixture(4, 100)
    same = [ex[0]] * 3
    p = train_fusion(same, y, Q, RandomStream(0))
    single = fusion_loss([ex[0]], y, Q, FusionParams.averaging(1, 3))
    assert fusion_loss(same, y, Q, p) <= single + 1e-6


def test_perfect_expert_is_recovered():
    y, ex = _perfect_fixture(0, 200)
    yv, exv = _perfect_fixture(1, 100)
    p = train_fusion(ex, y, Q, RandomStream(0), exv, yv)
    assert fusion_loss(exv, yv, Q, p) <= 0.0 + 1e-3


def test_training_is_deterministic():
    y, ex = _perfect_fixture(2, 30)
    a = train_fusion(ex, y, Q, RandomStream(5), max_epochs=5)
    b = train_fusion(ex, y, Q, RandomStream(5), max_epochs=5)
    assert np.array_equal(a.flat(), b.flat())


def test_not_worse_than_best_single_expert_on_train():
    y, ex = _perfect_fixture(3, 60)
    ex = [ex[0], ex[2], 0.5 * (ex[0] + ex[2])]
    p = train_fusion(ex, y, Q, RandomStream(1))
    best_single = min(fusion_loss([e], y, Q, FusionParams.averaging(1, 3)) for e in ex)
    assert fusion_loss(ex, y, Q, p) <= best_single + 1e-3


def test_flat_round_trip():
    p = FusionParams(np.arange(9.0 * 3).reshape(9, 3), np.array([1.0, 2.0, 3.0]))
    q = p.with_flat(p.flat())
    assert np.array_equal(q.W, p.W) and np.array_equal(q.b, p.b)
