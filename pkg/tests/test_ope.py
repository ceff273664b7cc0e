import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policyaudit.discretize import DiscreteDataset
from policyaudit.errors import NoOverlapError, ZeroBehaviorProbError
from policyaudit.mdp import estimate_mdp
from policyaudit.ope import (
    agreement_histogram,
    bootstrap_lower_bound,
    importance_weights,
    trajectory_returns,
    wis_evaluate,
)
from policyaudit.solver import DETERMINISTIC, STOCHASTIC, Policy, behavior_policy, zero_drug_policy

GAMMA = 0.99


def ds(S, seqs, died):
    return DiscreteDataset.from_sequences(S, seqs, died)


def test_returns_are_discounted_terminal_rewards():
    d = ds(2, [[(0, 0)], [(0, 0), (1, 0), (1, 1)]], [False, True])
    assert trajectory_returns(d, 0.9).tolist() == [100.0, -100.0 * 0.81]


def test_behavior_against_itself(sampled):
    d = sampled.planted
    pb = behavior_policy(estimate_mdp(d))
    rep = wis_evaluate(d, pb, pb, GAMMA)
    assert np.all(rep.per_trajectory_weights == 1.0)
    assert abs(rep.point_estimate - trajectory_returns(d, GAMMA).mean()) <= 1e-12
    assert rep.ess == pytest.approx(len(d))


def test_zero_drug_weights_support(sampled):
    d = sampled.planted
    pb = behavior_policy(estimate_mdp(d))
    rep = wis_evaluate(d, pb, zero_drug_policy(d.s_count), GAMMA)
    all_zero = np.array([np.all(d.trajectory(i)[1] == 0) for i in range(len(d))])
    assert all_zero.any() and not all_zero.all()
    assert np.array_equal(rep.per_trajectory_weights > 0, all_zero)
    assert rep.nonzero_weight_fraction == np.count_nonzero(all_zero) / len(d)


def test_hand_computed_weights():
    # state 0: behavior picks a0 w.p. .5, a1 w.p. .5; target picks a0 w.p. .8
    d = ds(1, [[(0, 0)], [(0, 1)], [(0, 0), (0, 0)]], [False, True, True])
    pb = Policy(STOCHASTIC, np.array([[0.5, 0.5]]), a_count=2)
    pe = Policy(STOCHASTIC, np.array([[0.8, 0.2]]), a_count=2)
    w = importance_weights(d, pb, pe)
    assert np.allclose(w, [1.6, 0.4, 2.56])
    g = np.array([100.0, -100.0, -99.0])
    rep = wis_evaluate(d, pb, pe, GAMMA)
    assert rep.point_estimate == pytest.approx((w @ g) / w.sum())


def test_no_overlap():
    d = ds(1, [[(0, 1)]], [False])
    pb = Policy(STOCHASTIC, np.array([[0.5, 0.5]]), a_count=2)
    with pytest.raises(NoOverlapError):
        wis_evaluate(d, pb, Policy(DETERMINISTIC, np.array([0]), a_count=2), GAMMA)


def test_zero_behavior_probability():
    d = ds(1, [[(0, 1)]], [False])
    pb = Policy(STOCHASTIC, np.array([[1.0, 0.0]]), a_count=2)
    with pytest.raises(ZeroBehaviorProbError):
        wis_evaluate(d, pb, pb, GAMMA)


def test_constant_returns_bound_equals_estimate():
    d = ds(3, [[(i % 3, i % 2)] for i in range(40)], [False] * 40)
    pb = behavior_policy(estimate_mdp(d, prune_min_count=1))
    rep = bootstrap_lower_bound(d, pb, pb, GAMMA, resamples=500, seed=1)
    assert rep.lower_bound == rep.point_estimate == 100.0


def test_bootstrap_independent_of_workers(sampled):
    d = sampled.planted
    pb = behavior_policy(estimate_mdp(d))
    pe = Policy(STOCHASTIC, 0.5 * pb.table + 0.5 * np.eye(25)[pb.greedy()])
    a = bootstrap_lower_bound(d, pb, pe, GAMMA, resamples=700, seed=3, workers=1)
    b = bootstrap_lower_bound(d, pb, pe, GAMMA, resamples=700, seed=3, workers=5)
    assert a.lower_bound == b.lower_bound
    assert np.array_equal(a.bootstrap_estimates, b.bootstrap_estimates)
    assert a.lower_bound <= a.point_estimate


def test_bootstrap_counts_undefined_replicates():
    d = ds(1, [[(0, 0)]] + [[(0, 1)]] * 9, [False] * 10)
    pb = Policy(STOCHASTIC, np.array([[0.1, 0.9]]), a_count=2)
    pe = Policy(DETERMINISTIC, np.array([0]), a_count=2)
    rep = bootstrap_lower_bound(d, pb, pe, GAMMA, resamples=1000, seed=0)
    # P(trajectory 0 absent from a resample) = 0.9**10 ~ 0.35
    assert 250 < rep.undefined_resamples < 450
    assert rep.lower_bound == 100.0


def test_bootstrap_argument_checks(sampled):
    d = sampled.planted
    pb = behavior_policy(estimate_mdp(d))
    with pytest.raises(ValueError):
        bootstrap_lower_bound(d, pb, pb, GAMMA, resamples=10)
    with pytest.raises(ValueError):
        bootstrap_lower_bound(d, pb, pb, GAMMA, confidence=1.0)


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 1), st.booleans(), st.integers(1, 4)),
                min_size=1, max_size=30),
       st.floats(0.05, 0.95))
@settings(max_examples=80, deadline=None)
def test_wis_within_return_hull(trajs, p0):
    seqs = [[(s, a)] * L for s, a, _, L in trajs]
    d = ds(3, seqs, [x[2] for x in trajs])
    pb = Policy(STOCHASTIC, np.tile([0.5, 0.5], (3, 1)), a_count=2)
    pe = Policy(STOCHASTIC, np.tile([p0, 1 - p0], (3, 1)), a_count=2)
    rep = wis_evaluate(d, pb, pe, GAMMA)
    g = trajectory_returns(d, GAMMA)
    assert g.min() <= rep.point_estimate <= g.max()
    assert 1.0 - 1e-9 <= rep.ess <= len(d) + 1e-9


def test_weight_histogram(tmp_path, sampled):
    d = sampled.planted
    pb = behavior_policy(estimate_mdp(d))
    rep = wis_evaluate(d, pb, zero_drug_policy(d.s_count), GAMMA)
    rows = list(csv.reader(open(rep.save_weight_histogram(tmp_path / "w.csv", bins=10))))
    assert rows[0] == ["weight_low", "weight_high", "count"]
    assert int(rows[1][2]) == np.count_nonzero(rep.per_trajectory_weights == 0)
    assert sum(int(r[2]) for r in rows[1:]) == len(d)


# -- agreement -------------------------------------------------------------------

def test_agreement_six_percent():
    seqs = [[(0, 3)]] * 6 + [[(0, 1)]] * 94
    d = ds(2, seqs, [False] * 100)
    h = agreement_histogram(d, Policy(DETERMINISTIC, np.array([3, 0])), 0.05)
    assert h.fractions.tolist() == [0.06]
    assert h.summary() == (1, 1)
    assert h.unvisited == (1,)


def test_agreement_threshold_is_strict():
    d = ds(1, [[(0, 3)]] * 5 + [[(0, 1)]] * 95, [False] * 100)
    assert agreement_histogram(d, Policy(DETERMINISTIC, np.array([3])), 0.05).n_above == 0


def test_agreement_with_modal_policy_equals_modal_frequency(sampled):
    d = sampled.planted
    m = estimate_mdp(d)
    pb = behavior_policy(m)
    h = agreement_histogram(d, Policy(DETERMINISTIC, pb.greedy()), 0.05)
    assert np.allclose(h.fractions, pb.table[h.states].max(axis=1))


def test_agreement_csv(tmp_path):
    d = ds(3, [[(0, 1), (2, 1)], [(2, 0)]], [False, True])
    h = agreement_histogram(d, Policy(DETERMINISTIC, np.array([1, 0, 1])))
    rows = list(csv.reader(open(h.save_csv(tmp_path / "a.csv"))))
    assert rows == [["state", "visits", "fraction"], ["0", "1", "1.0"], ["2", "2", "0.5"]]
    assert h.to_json()["states_above_threshold"] == 2
