import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covloc.assimilate import analyse_batch, blue_analysis, cost, kalman_gain, trace_identities
from covloc.core import CovarianceModel, balgovind_correlation
from covloc.errors import DomainError, FactorizationError, NumericalError

import oracles


def test_blue_matches_information_form(rng):
    H, B, R = oracles.random_system(rng, 7, 4)
    x_b = rng.normal(size=7)
    y = rng.normal(size=4)
    res = blue_analysis(x_b, y, B, R, H)
    x_a, K, jb, jo = oracles.blue(x_b, y, B, R, H)
    np.testing.assert_allclose(res.gain, K, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(res.analysis, x_a, rtol=1e-10, atol=1e-12)
    assert res.cost_background == pytest.approx(jb, rel=1e-9)
    assert res.cost_observation == pytest.approx(jo, rel=1e-9)


def test_analysis_minimizes_the_cost(rng):
    H, B, R = oracles.random_system(rng, 5, 3)
    x_b, y = rng.normal(size=5), rng.normal(size=3)
    res = blue_analysis(x_b, y, B, R, H)
    value, grad = cost(res.analysis, x_b, y, B, R, H)
    assert np.max(np.abs(grad)) < 1e-10
    assert value == pytest.approx(res.cost_background + res.cost_observation, rel=1e-12)
    for _ in range(5):
        assert cost(res.analysis + 0.01 * rng.normal(size=5), x_b, y, B, R, H)[0] > value


def test_cost_gradient_by_finite_differences(rng):
    H, B, R = oracles.random_system(rng, 4, 3)
    x, x_b, y = rng.normal(size=4), rng.normal(size=4), rng.normal(size=3)
    _, g = cost(x, x_b, y, B, R, H)
    h = 1e-6
    fd = [(cost(x + h * e, x_b, y, B, R, H)[0] - cost(x - h * e, x_b, y, B, R, H)[0]) / (2 * h) for e in np.eye(4)]
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_batch_equals_single_analyses(rng):
    H, B, R = oracles.random_system(rng, 6, 4)
    Xb, Y = rng.normal(size=(5, 6)), rng.normal(size=(5, 4))
    out = analyse_batch(Xb, Y, B, R, H)
    for m in range(5):
        one = blue_analysis(Xb[m], Y[m], B, R, H)
        np.testing.assert_allclose(out.analyses[m], one.analysis, rtol=1e-13)
        assert out.cost_background[m] == pytest.approx(one.cost_background, rel=1e-12)


def test_trace_identities_sum_and_bounds(rng):
    H, B, R = oracles.random_system(rng, 6, 4)
    a, b = trace_identities(B, R, H)
    assert a + b == pytest.approx(4.0, abs=1e-12)
    assert 0 < a < 4
    K = oracles.blue(np.zeros(6), np.zeros(4), B, R, H)[1]
    assert a == pytest.approx(np.trace(H @ K), rel=1e-10)


def test_covariance_models_are_accepted():
    C = balgovind_correlation(3, 2.0)
    B = CovarianceModel.homogeneous(0.5, C)
    R = CovarianceModel.homogeneous(0.2, np.eye(2))
    H = np.array([[1.0, 0.0, 0.0], [0.0, 0.5, 0.5]])
    np.testing.assert_allclose(kalman_gain(B, R, H), kalman_gain(B.compose(), R.compose(), H))


def test_errors():
    H = np.ones((2, 3))
    with pytest.raises(DomainError):
        kalman_gain(np.eye(2), np.eye(2), H)
    with pytest.raises(NumericalError) as exc:
        kalman_gain(np.zeros((3, 3)), np.zeros((2, 2)), H)
    assert exc.value.condition is not None
    with pytest.raises(FactorizationError):
        blue_analysis(np.zeros(3), np.ones(2), np.diag([1.0, 1.0, -1e-3]), np.eye(2), H)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(min_value=1e-3, max_value=1e3))
def test_joint_scaling_leaves_gain_and_analysis(seed, c):
    r = np.random.default_rng(seed)
    H, B, R = oracles.random_system(r, 5, 3)
    x_b, y = r.normal(size=5), r.normal(size=3)
    a = blue_analysis(x_b, y, B, R, H)
    b = blue_analysis(x_b, y, c * B, c * R, H)
    np.testing.assert_allclose(b.gain, a.gain, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(b.analysis, a.analysis, rtol=1e-10, atol=1e-12)
    assert b.cost_background == pytest.approx(a.cost_background / c, rel=1e-9)
