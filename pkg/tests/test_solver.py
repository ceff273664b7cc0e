import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policyaudit._sampling import DIED, ChainSimulator
from policyaudit.discretize import ZERO_DRUG_ACTION, DiscreteDataset, action_bins
from policyaudit.errors import NoAllowedActionError, UnobservedSupportError
from policyaudit.mdp import TabularMdp, estimate_mdp
from policyaudit.rollout import initial_distribution
from policyaudit.solver import (
    DETERMINISTIC,
    STOCHASTIC,
    NonConvergenceWarning,
    Policy,
    behavior_policy,
    policy_diff,
    policy_value_model_based,
    solve_optimal,
    zero_drug_policy,
)
from policyaudit.synth import make_ground_truth, sample_cohort

R, GAMMA = 100.0, 0.99


def counts_mdp(S, A, entries, **kw):
    """``entries``: {(s, a, target): count}."""
    c = np.zeros((S, A, S + 2), dtype=np.int64)
    for (s, a, t), n in entries.items():
        c[s, a, t] = n
    kw.setdefault("prune_min_count", 1)
    return TabularMdp(c, **kw)


# -- behavior / zero drug -------------------------------------------------------

def test_behavior_frequencies():
    m = counts_mdp(1, 25, {(0, 3, 1): 9, (0, 7, 2): 1})
    p = behavior_policy(m)
    assert p.table[0, 3] == pytest.approx(0.9) and p.table[0, 7] == pytest.approx(0.1)
    assert p.table[0].sum() == pytest.approx(1.0)


def test_orphan_state_uniform():
    m = counts_mdp(2, 25, {(0, 0, 2): 3})
    p = behavior_policy(m)
    assert np.allclose(p.table[1], 1 / 25)
    assert p.fallback_states == (1,)


def test_behavior_recovery_on_synth():
    g = make_ground_truth(20, seed=3)
    d = sample_cohort(g, 4000, seed=1).planted
    p = behavior_policy(estimate_mdp(d))
    n = np.bincount(d.states, minlength=20)
    err = np.abs(p.table - g.behavior.table).max(axis=1)
    se = np.sqrt(0.25 / n)
    assert np.all(err < 6 * se)


def test_zero_drug_policy():
    p = zero_drug_policy(750)
    assert p.kind == DETERMINISTIC and np.all(p.table == ZERO_DRUG_ACTION)
    assert zero_drug_policy(1).table.tolist() == [0]
    fb, vb = action_bins(p.table[0])
    assert (int(fb), int(vb)) == (0, 0)


# -- optimal ---------------------------------------------------------------------

SAFE, RISKY = 2, 5


def two_state_chain():
    # state 0: SAFE -> discharge, RISKY -> death; state 1: SAFE -> state 0 (p 1)
    S = 2
    return counts_mdp(S, 25, {(0, SAFE, S): 10, (0, RISKY, S + 1): 10, (1, SAFE, 0): 10})


def test_safe_action_chosen():
    p, vf = solve_optimal(two_state_chain())
    assert p.table[0] == SAFE
    assert vf.v[0] == pytest.approx(100.0, abs=1e-9)
    assert vf.v[1] == pytest.approx(GAMMA * 100.0, abs=1e-9)
    assert np.isnan(vf.q[0, 0]) and vf.q[0, RISKY] == pytest.approx(-100.0)


def test_one_state_fixed_points():
    # a1: discharge .9 / death .1; a2: discharge .5 / self .5
    m = counts_mdp(1, 25, {(0, 1, 1): 9, (0, 1, 2): 1, (0, 2, 1): 5, (0, 2, 0): 5})
    q1 = 0.9 * R - 0.1 * R
    q2 = 0.5 * R / (1 - 0.5 * GAMMA)
    p, vf = solve_optimal(m, tol=1e-12)
    assert p.table[0] == (2 if q2 > q1 else 1)
    assert vf.v[0] == pytest.approx(max(q1, q2), abs=1e-9)
    assert vf.q[0, 1] == pytest.approx(q1, abs=1e-9)
    assert vf.q[0, 2] == pytest.approx(q2, abs=1e-9)


def test_deterministic_policy_value_matches_hand_solution():
    m = two_state_chain()
    p = Policy(DETERMINISTIC, np.array([RISKY, SAFE]))
    v = policy_value_model_based(m, p).v
    assert v[0] == pytest.approx(-100.0, abs=1e-9)
    assert v[1] == pytest.approx(-GAMMA * 100.0, abs=1e-9)


def test_zero_drug_to_death_everywhere():
    S = 4
    entries = {(s, 0, S + 1): 5 for s in range(S)}
    entries.update({(s, 3, (s + 1) % S): 5 for s in range(S)})
    m = counts_mdp(S, 25, entries)
    v = policy_value_model_based(m, zero_drug_policy(S)).v
    assert np.allclose(v, -R, atol=1e-9)


def test_ties_go_to_lowest_action():
    m = counts_mdp(1, 25, {(0, 4, 1): 5, (0, 9, 1): 5})
    assert solve_optimal(m)[0].table[0] == 4


def test_no_allowed_action():
    m = counts_mdp(2, 25, {(0, 0, 2): 5, (1, 0, 2): 1}, prune_min_count=2)
    with pytest.raises(NoAllowedActionError) as exc:
        solve_optimal(m)
    assert exc.value.states == [1]


def test_unobserved_support():
    m = counts_mdp(1, 25, {(0, 0, 1): 5})
    with pytest.raises(UnobservedSupportError):
        policy_value_model_based(m, Policy(DETERMINISTIC, np.array([3])))


def test_nonconvergence_warning():
    m = counts_mdp(1, 25, {(0, 0, 0): 5, (0, 0, 1): 1})
    with pytest.warns(NonConvergenceWarning):
        p, vf = solve_optimal(m, max_iter=2)
    assert not vf.converged


@st.composite
def random_mdps(draw):
    S = draw(st.integers(1, 6))
    A = draw(st.integers(2, 6))
    seed = draw(st.integers(0, 10_000))
    rng = np.random.default_rng(seed)
    counts = rng.poisson(rng.uniform(0, 3), size=(S, A, S + 2))
    counts[:, :, S] += rng.integers(0, 3, size=(S, A))
    # guarantee one allowed, absorbing-capable action per state
    a0 = rng.integers(0, A, size=S)
    counts[np.arange(S), a0, S + rng.integers(0, 2, size=S)] += 5
    return TabularMdp(counts, gamma=draw(st.sampled_from([0.5, 0.9, 0.99])),
                      prune_min_count=draw(st.integers(1, 6)))


@given(random_mdps())
@settings(max_examples=80, deadline=None)
def test_optimal_respects_allowed_and_dominates(m):
    p, vf = solve_optimal(m, tol=1e-10)
    assert np.all(m.allowed[np.arange(m.s_count), p.table])
    # Bellman optimality: v = max over allowed q, and no allowed action beats it
    q = np.where(m.allowed, vf.q, -np.inf)
    assert np.allclose(vf.v, q.max(axis=1), atol=1e-9)
    v_pi = policy_value_model_based(m, p).v
    assert np.allclose(v_pi, vf.v, atol=1e-6)


def test_model_value_matches_monte_carlo():
    g = make_ground_truth(20, seed=3)
    d = sample_cohort(g, 3000, seed=4).planted
    m = estimate_mdp(d)
    pb = behavior_policy(m)
    v = policy_value_model_based(m, pb).v
    init = initial_distribution(d)
    rng = np.random.default_rng(0)
    n = 40_000
    starts = rng.choice(20, size=n, p=init)
    outcome, length = ChainSimulator(np.asarray(m.probs), pb.probs()).run(starts, 5000, rng)
    g_ret = np.where(outcome == DIED, -R, R) * GAMMA ** (length - 1.0)
    se = g_ret.std(ddof=1) / np.sqrt(n)
    assert abs(g_ret.mean() - init @ v) < 3 * se


def test_policy_json_roundtrip(tmp_path):
    p = Policy(STOCHASTIC, np.full((3, 25), 1 / 25), fallback_states=(2,), source="abc")
    q = Policy.load(p.save(tmp_path / "p.json"))
    assert q.kind == p.kind and np.array_equal(q.table, p.table)
    assert q.fallback_states == (2,) and q.source == "abc"


def test_policy_diff():
    a = Policy(DETERMINISTIC, np.array([0, 1, 2]))
    b = Policy(DETERMINISTIC, np.array([0, 3, 2]))
    rows = policy_diff(a, b)
    assert rows == [{"state": 1, "action_a": 1, "action_b": 3, "tv_distance": 1.0}]
    assert policy_diff(a, a) == []


def test_prob_lookup():
    p = Policy(DETERMINISTIC, np.array([4, 0]))
    assert p.prob([0, 0, 1], [4, 3, 0]).tolist() == [1.0, 0.0, 1.0]
    assert p.probs().sum(axis=1).tolist() == [1.0, 1.0]
    d = DiscreteDataset.from_sequences(2, [[(0, 4)]], [False])
    assert d.n_steps == 1
