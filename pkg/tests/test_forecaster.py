import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stqcl.forecaster import (
    ModelSpec,
    backward,
    flat_grad,
    forward,
    init_params,
    objective_value,
)
from stqcl.gradcheck import check_case, run_gradcheck
from stqcl.numerics import ContractError, RandomStream, finite_diff_grad, gradient_agreement


def test_init_deterministic():
    spec = ModelSpec(arch="mlp", t_in=4, t_out=2, hidden=5)
    a = init_params(spec, RandomStream(3))
    b = init_params(spec, RandomStream(3))
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def test_default_linear_shapes():
    p = init_params(ModelSpec(), RandomStream(0))
    assert p.tensors["W"].shape == (12, 36)
    assert p.tensors["b"].shape == (36,)
    assert not p.tensors["b"].any()


def test_init_weight_std():
    spec = ModelSpec(t_in=100, t_out=100, n_quantiles=3)
    w = init_params(spec, RandomStream(1)).tensors["W"]
    assert w.size >= 10_000
    target = 1.0 / np.sqrt(3 * 100)
    assert abs(w.std() - target) < 0.1 * target
    assert np.abs(w).max() <= 1.0 / np.sqrt(100)


def test_spec_validation():
    with pytest.raises(ContractError):
        ModelSpec(arch="cnn")
    with pytest.raises(ContractError):
        ModelSpec(arch="mlp", hidden=0)
    with pytest.raises(ContractError):
        ModelSpec(shared=False)


def test_zero_weights_give_bias():
    spec = ModelSpec(t_in=3, t_out=2, n_quantiles=3)
    p = init_params(spec, RandomStream(0))
    p.tensors["W"][:] = 0.0
    p.tensors["b"][:] = np.tile([-1.0, 0.0, 2.0], 2)
    out = forward(p, np.random.default_rng(0).normal(size=(3, 4)))
    assert out.shape == (2, 4, 3)
    assert np.array_equal(out, np.broadcast_to([-1.0, 0.0, 2.0], out.shape))


def test_default_protocol_output_shape():
    p = init_params(ModelSpec(), RandomStream(0))
    assert forward(p, np.zeros((12, 7))).shape == (12, 7, 3)
    assert forward(p, np.zeros((5, 12, 7))).shape == (5, 12, 7, 3)


def test_forward_shape_mismatch():
    p = init_params(ModelSpec(), RandomStream(0))
    with pytest.raises(ContractError):
        forward(p, np.zeros((11, 3)))


@pytest.mark.parametrize("arch", ["linear", "mlp"])
def test_shared_mode_permutation_equivariance(arch):
    rng = np.random.default_rng(5)
    p = init_params(ModelSpec(arch=arch, t_in=6, t_out=3, hidden=4), RandomStream(2))
    x = rng.normal(size=(2, 6, 5))
    perm = rng.permutation(5)
    assert np.array_equal(forward(p, x[:, :, perm]), forward(p, x)[:, :, perm])


def test_forward_bit_identical_repeat():
    p = init_params(ModelSpec(arch="mlp"), RandomStream(2))
    x = np.random.default_rng(0).normal(size=(12, 9))
    assert np.array_equal(forward(p, x), forward(p, x))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_noncrossing_orders_heads(seed):
    rng = np.random.default_rng(seed)
    p = init_params(ModelSpec(arch="mlp", t_in=4, t_out=3, hidden=3), RandomStream(seed))
    for k in p.tensors:
        p.tensors[k] = rng.normal(size=p.tensors[k].shape)
    out = forward(p, rng.normal(size=(4, 6)), noncrossing=True)
    assert np.all(np.diff(out, axis=-1) >= 0)


def test_per_node_uses_node_index():
    spec = ModelSpec(t_in=2, t_out=1, n_quantiles=1, shared=False, n_nodes=3)
    p = init_params(spec, RandomStream(0))
    p.tensors["b"][:] = [[10.0], [20.0], [30.0]]
    p.tensors["W"][:] = 0.0
    out = forward(p, np.zeros((2, 2)), nodes=[0, 2])
    assert out[0, :, 0].tolist() == [10.0, 30.0]
    with pytest.raises(ContractError):
        forward(p, np.zeros((2, 2)))


def _problem(arch="mlp", seed=0):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(arch=arch, t_in=4, t_out=2, n_quantiles=3, hidden=5)
    p = init_params(spec, RandomStream(seed))
    x = rng.normal(size=(3, 4, 3))
    y = rng.normal(size=(3, 2, 3))
    v = rng.integers(0, 2, size=(3, 3, 3)).astype(float)
    return p, x, y, v, np.array([0.1, 0.5, 0.9])


def test_zero_mask_gives_zero_gradient_and_loss():
    p, x, y, v, q = _problem()
    grads, loss = backward(p, x, y, np.zeros_like(v), q)
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_small_mlp_gradient_matches_finite_differences():
    p, x, y, v, q = _problem()
    grads, loss = backward(p, x, y, v, q)
    assert loss == pytest.approx(objective_value(p, x, y, v, q), rel=1e-12)
    numeric = finite_diff_grad(lambda w: objective_value(p.with_flat(w), x, y, v, q), p.flat())
    ok, worst = gradient_agreement(flat_grad(p, grads), numeric)
    assert ok, worst


@pytest.mark.parametrize("arch", ["linear", "mlp"])
def test_halving_weights_halves_unnormalized_gradient(arch):
    p, x, y, v, q = _problem(arch)
    g1, l1 = backward(p, x, y, v, q, normalize=False)
    g2, l2 = backward(p, x, y, v / 2, q, normalize=False)
    assert l2 == pytest.approx(l1 / 2, rel=1e-12)
    for k in g1:
        assert np.allclose(g2[k], g1[k] / 2, rtol=1e-12, atol=0)


def test_normalized_gradient_scale_free_in_weights():
    p, x, y, v, q = _problem()
    g1, _ = backward(p, x, y, v, q)
    g2, _ = backward(p, x, y, 0.25 * v, q)
    assert all(np.allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15) for k in g1)


def test_per_node_gradient_only_touches_active_nodes():
    spec = ModelSpec(t_in=3, t_out=2, n_quantiles=2, shared=False, n_nodes=4)
    p = init_params(spec, RandomStream(1))
    rng = np.random.default_rng(1)
    grads, _ = backward(p, rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 2, 2)), 1.0, [0.2, 0.8], nodes=[1, 3])
    assert not grads["W"][[0, 2]].any() and grads["W"][[1, 3]].any()


def test_random_configurations_pass_gradcheck():
    cases = run_gradcheck(20, seed=7)
    assert len(cases) == 20
    assert {c.spec.arch for c in cases} == {"linear", "mlp"}
    assert all(c.ok for c in cases), [c.worst for c in cases]


def test_gradcheck_detects_wrong_gradient(monkeypatch):
    import stqcl.gradcheck as gc

    real = gc.backward

    def broken(*a, **k):
        grads, loss = real(*a, **k)
        return {n: g * 1.01 for n, g in grads.items()}, loss

    monkeypatch.setattr(gc, "backward", broken)
    case = check_case(0, RandomStream(0, ("x",)), pinned={"arch": "linear"})
    assert not case.ok
