import csv
import math

import numpy as np
import pytest

from policyaudit.discretize import DiscreteDataset
from policyaudit.errors import UnobservedSupportError
from policyaudit.mdp import TabularMdp, estimate_mdp
from policyaudit.rollout import initial_distribution, simulate_trajectory, validate_model
from policyaudit.solver import DETERMINISTIC, Policy, behavior_policy, zero_drug_policy


def probs_mdp(P):
    return TabularMdp.from_probabilities(np.asarray(P, dtype=float))


def death_world(S=3, A=25):
    P = np.zeros((S, A, S + 2))
    P[:, :, S + 1] = 1.0
    return probs_mdp(P)


def test_point_mass_death():
    m = death_world()
    rng = np.random.default_rng(0)
    for s in range(3):
        assert simulate_trajectory(m, zero_drug_policy(3), s, rng=rng) == ("died", 1)
    stats = validate_model(m, zero_drug_policy(3), np.full(3, 1 / 3), batches=20, batch_size=50)
    assert stats.mortality_mean == 1.0 and stats.mortality_sd == 0.0
    assert stats.length_mean == 1.0 and stats.truncated_fraction == 0.0


def test_cycle_truncates():
    P = np.zeros((2, 1, 4))
    P[0, 0, 1] = P[1, 0, 0] = 1.0
    m = probs_mdp(P)
    p = Policy(DETERMINISTIC, np.array([0, 0]), a_count=1)
    assert simulate_trajectory(m, p, 0, max_steps=200, rng=np.random.default_rng(1)) == ("truncated", 200)
    stats = validate_model(m, p, [1.0, 0.0], batches=2, batch_size=10, max_steps=200)
    assert stats.truncated_fraction == 1.0


def test_three_state_absorption_probability():
    # one action; transient block Q, exits to discharge/death
    Q = np.array([[0.2, 0.5, 0.1], [0.1, 0.3, 0.3], [0.0, 0.4, 0.3]])
    to_dis = np.array([0.15, 0.2, 0.1])
    to_die = 1 - Q.sum(axis=1) - to_dis
    P = np.concatenate([Q, to_dis[:, None], to_die[:, None]], axis=1)[:, None, :]
    N = np.linalg.inv(np.eye(3) - Q)
    q = float((N @ to_die)[0])
    m = probs_mdp(P)
    p = Policy(DETERMINISTIC, np.zeros(3, dtype=int), a_count=1)
    stats = validate_model(m, p, [1.0, 0.0, 0.0], batches=40, batch_size=2500, seed=5)
    assert stats.truncated_fraction == 0.0
    assert abs(stats.mortality_mean - q) < 3 * math.sqrt(q * (1 - q) / 100_000)
    t = float((N @ np.ones(3))[0])
    assert abs(stats.length_mean - t) < 0.05 * t


def test_behavior_rollout_matches_cohort(sampled):
    d = sampled.planted
    m = estimate_mdp(d)
    stats = validate_model(m, behavior_policy(m), initial_distribution(d), batches=200, batch_size=500, seed=0)
    assert abs(stats.mortality_mean - d.died.mean()) < 2 * stats.mortality_sd
    assert abs(stats.length_mean - d.lengths.mean()) < 2 * stats.length_sd


def test_workers_do_not_change_stats(sampled):
    d = sampled.planted
    m = estimate_mdp(d)
    pb = behavior_policy(m)
    init = initial_distribution(d)
    a = validate_model(m, pb, init, batches=30, batch_size=300, seed=9, workers=1)
    b = validate_model(m, pb, init, batches=30, batch_size=300, seed=9, workers=6)
    assert a.to_json() == b.to_json()
    assert np.array_equal(a.batch_mortality, b.batch_mortality)


def test_initial_distribution_modes():
    d = DiscreteDataset.from_sequences(4, [[(0, 0)], [(0, 0)], [(2, 0)], [(1, 0), (3, 0)]], [False] * 4)
    assert initial_distribution(d).tolist() == [0.5, 0.25, 0.25, 0.0]
    assert initial_distribution(d, "uniform").tolist() == [0.25] * 4
    with pytest.raises(ValueError):
        initial_distribution(d, "other")


def test_bad_initial_distribution():
    with pytest.raises(ValueError):
        validate_model(death_world(), zero_drug_policy(3), [0.5, 0.5], batches=1, batch_size=1)


def test_unobserved_pair_raises():
    P = np.zeros((1, 25, 3))
    P[0, 1, 1] = 1.0
    with pytest.raises(UnobservedSupportError):
        simulate_trajectory(probs_mdp(P), zero_drug_policy(1), 0, rng=np.random.default_rng(0))


def test_batches_csv(tmp_path):
    stats = validate_model(death_world(), zero_drug_policy(3), np.full(3, 1 / 3), batches=3, batch_size=4)
    rows = list(csv.reader(open(stats.save_batches_csv(tmp_path / "b.csv"))))
    assert rows[0] == ["batch", "mortality", "mean_length"] and len(rows) == 4
    assert set(stats.to_json()) >= {"mortality_mean", "mortality_sd", "length_mean", "length_sd"}
