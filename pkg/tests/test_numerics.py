import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stqcl.losses import pinball
from stqcl.numerics import (
    AdamState,
    ContractError,
    NonFiniteError,
    RandomStream,
    adam_step,
    derive_stream,
    finite_diff_grad,
    gradient_agreement,
)


def test_adam_first_step_unit_gradient():
    state = AdamState.fresh((1,))
    new, state2 = adam_step(np.array([0.0]), np.array([1.0]), state)
    # t=1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
    expected = -1e-3 * 1.0 / (1.0 + 1e-8)
    assert new[0] == pytest.approx(expected, abs=1e-18)
    assert new[0] == pytest.approx(-9.99999995e-4, abs=1e-11)
    assert state2.t == 1


def test_adam_zero_gradient_is_noop_bitwise():
    params = np.array([0.3, -1.7, 2.5e-9])
    new, state = adam_step(params, np.zeros(3), AdamState.fresh((3,)))
    assert np.array_equal(new, params)
    assert state.t == 1


def test_adam_first_step_scale_invariant():
    new, _ = adam_step(np.array([1.0]), np.array([1000.0]), AdamState.fresh((1,)))
    assert abs(new[0] - 1.0) == pytest.approx(1e-3, rel=1e-9)


def test_adam_shape_mismatch():
    with pytest.raises(ContractError):
        adam_step(np.zeros(3), np.zeros(2), AdamState.fresh((3,)))


def test_adam_does_not_mutate_state():
    state = AdamState.fresh((2,))
    adam_step(np.zeros(2), np.ones(2), state)
    assert state.t == 0 and not state.m.any()


def test_finite_diff_square():
    g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), h=1e-5)
    assert g[0] == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_constant():
    g = finite_diff_grad(lambda x: 4.2, np.arange(5.0))
    assert np.array_equal(g, np.zeros(5))


def test_finite_diff_pinball_upper_branch():
    g = finite_diff_grad(lambda x: float(pinball(1.0, x[0], 0.9)), np.array([2.0]))
    assert g[0] == pytest.approx(0.1, abs=1e-8)


def test_finite_diff_nonfinite_reports_coordinate():
    def f(x):
        return np.inf if x[1] > 1.0 else float(x.sum())

    with pytest.raises(NonFiniteError) as err:
        finite_diff_grad(f, np.array([0.0, 1.0, 0.0]), h=1e-3)
    assert err.value.index == (1,)


def test_stream_determinism():
    a = RandomStream(7)
    b = RandomStream(7)
    assert np.array_equal(derive_stream(a, "init").uniform(size=100), derive_stream(b, "init").uniform(size=100))


def test_stream_labels_differ():
    root = RandomStream(7)
    assert not np.array_equal(derive_stream(root, "init").uniform(size=100), derive_stream(root, "noise").uniform(size=100))


def test_child_stream_independent_of_parent_draws():
    root = RandomStream(3)
    first = derive_stream(root, "x").uniform(size=10)
    root.uniform(size=1000)
    assert np.array_equal(derive_stream(root, "x").uniform(size=10), first)


def test_stream_uniform_mean():
    draws = RandomStream(11).uniform(size=100_000)
    assert abs(draws.mean() - 0.5) < 0.01
    assert draws.min() >= 0.0 and draws.max() < 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32))
def test_analytic_gradient_of_quadratic_matches_oracle(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    A = A @ A.T
    x = rng.normal(size=n)
    analytic = A @ x
    numeric = finite_diff_grad(lambda z: 0.5 * float(z @ A @ z), x, h=1e-5)
    ok, worst = gradient_agreement(analytic, numeric)
    assert ok, worst
