import numpy as np
import pytest

from covloc.core import CovarianceModel, balgovind_correlation
from covloc.errors import DomainError, StrategyError
from covloc.localize import (
    EMPTY,
    SINGLE,
    STRADDLING,
    SelectionOperator,
    adjust_observations,
    classify_observations,
    extract_subproblem,
    reduce_observations,
    strategy_summary,
)
from covloc.netgraph import ClusterPartition

import oracles

PART9 = ClusterPartition(np.array([1, 1, 1, 1, 2, 2, 2, 2, 2]))


def test_nine_state_classification():
    a = classify_observations(oracles.H9, PART9)
    assert a.status == (SINGLE, STRADDLING, STRADDLING, SINGLE)
    assert a.strongest.tolist() == [1, 1, 2, 2]
    assert a.touched[1] == (1, 2)
    assert a.report()[2]["strongest"] == 2


def test_nine_state_reduction():
    red = reduce_observations(oracles.H9, PART9)
    assert red.kept.tolist() == [0, 3]
    H_tilde = 0.25 * np.array([[1, 1, 1, 1, 0, 0, 0, 0, 0], [0, 0, 0, 0, 1, 1, 0, 1, 1]])
    assert np.array_equal(red.operator, H_tilde)
    np.testing.assert_array_equal(red.selections[1].matrix(), [[1, 0, 0, 0]])
    assert red.missing == []


def test_nine_state_adjustment():
    Xb = np.arange(18.0).reshape(2, 9)
    y = np.array([1.0, 2.0, 3.0, 4.0])
    adj = adjust_observations(oracles.H9, PART9, Xb, y)
    H_hat = 0.25 * np.array(
        [
            [1, 1, 1, 1, 0, 0, 0, 0, 0],
            [0, 1, 1, 1, 0, 0, 0, 0, 0],
            [0, 0, 0, 0, 0, 1, 1, 1, 0],
            [0, 0, 0, 0, 1, 1, 0, 1, 1],
        ]
    )
    assert np.array_equal(adj.operator, H_hat)
    mean = Xb.mean(axis=0)
    expected = y - np.array([0.0, 0.25 * mean[5], 0.25 * mean[3], 0.0])
    np.testing.assert_allclose(adj.observations, expected)
    np.testing.assert_array_equal(adj.selections[1].matrix(), [[1, 0, 0, 0], [0, 1, 0, 0]])
    np.testing.assert_array_equal(adj.selections[2].indices, [2, 3])


def test_adjustment_of_exact_data_is_exact():
    # with x_b = x_t the adjusted observations equal H_hat x_t
    rng = np.random.default_rng(3)
    x_t = rng.normal(size=9)
    adj = adjust_observations(oracles.H9, PART9, x_t[None, :], oracles.H9 @ x_t)
    np.testing.assert_allclose(adj.observations, adj.operator @ x_t, atol=1e-15)


def test_ties_go_to_lower_cluster():
    H = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]])
    part = ClusterPartition(np.array([1, 2, 2]))
    a = classify_observations(H, part)
    assert a.strongest.tolist() == [1, 2]
    H = np.array([[2.0, 1.0, 1.0]])
    assert classify_observations(H, part).strongest.tolist() == [1]


def test_empty_rows_are_excluded(caplog):
    H = np.array([[1.0, 0.0], [0.0, 0.0]])
    a = classify_observations(H, ClusterPartition(np.array([1, 2])))
    assert a.status[1] == EMPTY
    assert "no dependence" in caplog.text
    red = reduce_observations(H, ClusterPartition(np.array([1, 2])))
    assert red.missing == [2]


def test_subproblem_restricts_everything():
    B = CovarianceModel(np.arange(1.0, 10.0), balgovind_correlation(9, 2.0))
    R = CovarianceModel(np.ones(4), np.eye(4))
    red = reduce_observations(oracles.H9, PART9)
    Xb = np.arange(27.0).reshape(3, 9)
    Y = np.arange(12.0).reshape(3, 4)
    lp = extract_subproblem(2, PART9, red.selections, Xb, Y, B, R, oracles.H9)
    assert lp.state_index.tolist() == [4, 5, 6, 7, 8]
    assert lp.obs_index.tolist() == [3]
    np.testing.assert_array_equal(lp.backgrounds, Xb[:, 4:])
    np.testing.assert_array_equal(lp.observations, Y[:, [3]])
    np.testing.assert_array_equal(lp.H, oracles.H9[np.ix_([3], range(4, 9))])
    np.testing.assert_array_equal(lp.B.compose(), B.compose()[4:, 4:])


def test_subproblem_without_observations():
    H = np.array([[1.0, 1.0, 0.0]])
    part = ClusterPartition(np.array([1, 1, 2]))
    red = reduce_observations(H, part)
    with pytest.raises(StrategyError) as exc:
        extract_subproblem(2, part, red.selections, np.zeros(3), np.zeros(1), np.eye(3), np.eye(1), H)
    assert exc.value.cluster == 2


def test_selection_operator_validation():
    s = SelectionOperator([0, 2], 4)
    np.testing.assert_array_equal(s.apply(np.arange(4.0)), [0.0, 2.0])
    for bad in ([2, 1], [0, 4], [-1]):
        with pytest.raises(DomainError):
            SelectionOperator(bad, 4)


def test_adjustment_input_checks():
    with pytest.raises(DomainError):
        adjust_observations(oracles.H9, PART9, np.zeros((0, 9)), np.zeros(4))
    with pytest.raises(DomainError):
        adjust_observations(oracles.H9, PART9, np.zeros((1, 8)), np.zeros(4))
    with pytest.raises(DomainError):
        classify_observations(oracles.H9, ClusterPartition(np.array([1, 2])))


def test_strategy_summary():
    red = reduce_observations(oracles.H9, PART9)
    assert strategy_summary(PART9, red.selections) == {
        "state_sizes": [4, 5],
        "obs_sizes": [1, 1],
        "n_states": 9,
        "n_obs": 2,
    }
