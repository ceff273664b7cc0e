"""Policies and dynamic programming on a :class:`~policyaudit.mdp.TabularMdp`."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .discretize import N_ACTIONS, ZERO_DRUG_ACTION
from .errors import NoAllowedActionError, UnobservedSupportError
from .mdp import TabularMdp

logger = logging.getLogger(__name__)

STOCHASTIC = "stochastic"
DETERMINISTIC = "deterministic"


class NonConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class Policy:
    """Either an ``(S, A)`` probability table or an ``(S,)`` action table."""

    kind: str
    table: np.ndarray
    a_count: int = N_ACTIONS
    fallback_states: tuple[int, ...] = ()
    source: str = ""

    def __post_init__(self):
        table = np.asarray(self.table)
        if self.kind == STOCHASTIC:
            table = table.astype(np.float64)
            if table.ndim != 2 or table.shape[1] != self.a_count:
                raise ValueError(f"stochastic table must be (S, {self.a_count}), got {table.shape}")
            if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1) > 1e-12):
                raise ValueError("stochastic rows must be non-negative and sum to 1")
        elif self.kind == DETERMINISTIC:
            table = table.astype(np.int64)
            if table.ndim != 1:
                raise ValueError("deterministic table must be one action per state")
            if np.any(table < 0) or np.any(table >= self.a_count):
                raise ValueError(f"actions must lie in 0..{self.a_count - 1}")
        else:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "fallback_states", tuple(int(s) for s in self.fallback_states))

    @property
    def s_count(self) -> int:
        return self.table.shape[0]

    @property
    def deterministic(self) -> bool:
        return self.kind == DETERMINISTIC

    def probs(self) -> np.ndarray:
        if self.kind == STOCHASTIC:
            return np.array(self.table)
        out = np.zeros((self.s_count, self.a_count))
        out[np.arange(self.s_count), self.table] = 1.0
        return out

    def prob(self, states, actions) -> np.ndarray:
        """``pi(action | state)`` elementwise."""
        states = np.asarray(states)
        actions = np.asarray(actions)
        if self.kind == STOCHASTIC:
            return self.table[states, actions]
        return (self.table[states] == actions).astype(np.float64)

    def greedy(self) -> np.ndarray:
        """Most likely action per state (lowest index on ties)."""
        if self.kind == DETERMINISTIC:
            return np.array(self.table)
        return np.argmax(self.table, axis=1)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "a_count": self.a_count,
            "table": self.table.tolist(),
            "fallback_states": list(self.fallback_states),
            "source": self.source,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Policy":
        return cls(
            obj["kind"],
            np.asarray(obj["table"]),
            int(obj.get("a_count", N_ACTIONS)),
            tuple(obj.get("fallback_states", ())),
            obj.get("source", ""),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), separators=(",", ":"), sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Policy":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(eq=False)
class ValueFunction:
    v: np.ndarray
    q: np.ndarray  # NaN marks unavailable pairs
    converged: bool = True
    iterations: int = 0
    deltas: list[float] = field(default_factory=list, repr=False)

    @property
    def available(self) -> np.ndarray:
        return ~np.isnan(self.q)


def behavior_policy(m: TabularMdp) -> Policy:
    """Empirical action frequencies per state; unvisited states fall back to uniform."""
    sa = m.sa_counts.astype(np.float64)
    totals = sa.sum(axis=1)
    table = np.full(sa.shape, 1.0 / m.a_count)
    seen = totals > 0
    table[seen] = sa[seen] / totals[seen, None]
    fallback = np.flatnonzero(~seen)
    if len(fallback):
        logger.warning("behavior policy: %d unvisited states get a uniform distribution", len(fallback))
    return Policy(STOCHASTIC, table, m.a_count, tuple(fallback.tolist()))


def zero_drug_policy(s_count: int, a_count: int = N_ACTIONS) -> Policy:
    if s_count < 1:
        raise ValueError("s_count must be at least 1")
    return Policy(DETERMINISTIC, np.full(s_count, ZERO_DRUG_ACTION, dtype=np.int64), a_count)


def _one_step(m: TabularMdp):
    """Split transition probabilities into the transient block and the
    expected immediate (terminal) reward per pair."""
    S = m.s_count
    P = m.probs[:, :, :S]
    immediate = m.reward_magnitude * (m.probs[:, :, S] - m.probs[:, :, S + 1])
    return P, immediate


def solve_optimal(m: TabularMdp, tol: float = 1e-8, max_iter: int = 100_000) -> tuple[Policy, ValueFunction]:
    """Value iteration restricted to ``m.allowed``.

    Q(s,a) = sum_s' T(s'|s,a) [r(s') + gamma V(s')], with V = 0 on the
    absorbing states. Ties in the argmax go to the lowest action index.
    """
    S, A = m.s_count, m.a_count
    no_action = np.flatnonzero(~m.allowed.any(axis=1))
    if len(no_action):
        raise NoAllowedActionError(no_action.tolist())
    P, immediate = _one_step(m)
    P2 = P.reshape(S * A, S)
    allowed = m.allowed
    v = np.zeros(S)
    deltas: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        q = immediate + m.gamma * (P2 @ v).reshape(S, A)
        q = np.where(allowed, q, -np.inf)
        v_new = q.max(axis=1)
        delta = float(np.max(np.abs(v_new - v)))
        deltas.append(delta)
        v = v_new
        if delta < tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"value iteration stopped after {max_iter} sweeps with max |dV| = {deltas[-1]:.3g} >= {tol}",
            NonConvergenceWarning,
            stacklevel=2,
        )
    q = immediate + m.gamma * (P2 @ v).reshape(S, A)
    q = np.where(allowed, q, np.nan)
    actions = np.argmax(np.where(allowed, q, -np.inf), axis=1)
    policy = Policy(DETERMINISTIC, actions, A)
    return policy, ValueFunction(q[np.arange(S), actions], q, converged, it, deltas)


def policy_value_model_based(m: TabularMdp, p: Policy, tol: float = 1e-10, max_iter: int = 1_000_000) -> ValueFunction:
    """Iterative policy evaluation of ``p`` on the estimated model."""
    S, A = m.s_count, m.a_count
    if p.s_count != S or p.a_count != A:
        raise ValueError(f"policy shape ({p.s_count}, {p.a_count}) does not match MDP ({S}, {A})")
    pi = p.probs()
    bad = (pi > 0) & (m.sa_counts == 0)
    if bad.any():
        s, a = np.argwhere(bad)[0]
        raise UnobservedSupportError(int(s), int(a))
    P, immediate = _one_step(m)
    P_pi = np.einsum("sa,sat->st", pi, P)
    r_pi = (pi * immediate).sum(axis=1)
    v = np.zeros(S)
    converged = False
    deltas: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        v_new = r_pi + m.gamma * (P_pi @ v)
        delta = float(np.max(np.abs(v_new - v)))
        deltas.append(delta)
        v = v_new
        if delta < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"policy evaluation did not reach tol={tol}", NonConvergenceWarning, stacklevel=2)
    q = immediate + m.gamma * (P.reshape(S * A, S) @ v).reshape(S, A)
    q = np.where(m.sa_counts > 0, q, np.nan)
    return ValueFunction(v, q, converged, it, deltas)


def policy_diff(a: Policy, b: Policy) -> list[dict]:
    """Per-state disagreement: differing greedy actions and total-variation distance."""
    if a.s_count != b.s_count:
        raise ValueError("policies cover different numbers of states")
    pa, pb = a.probs(), b.probs()
    tv = 0.5 * np.abs(pa - pb).sum(axis=1)
    ga, gb = a.greedy(), b.greedy()
    return [
        {"state": s, "action_a": int(ga[s]), "action_b": int(gb[s]), "tv_distance": float(tv[s])}
        for s in range(a.s_count)
        if ga[s] != gb[s] or tv[s] > 0
    ]
