"""Vectorized categorical sampling and absorbing-chain simulation."""

from __future__ import annotations

import numpy as np

from .errors import UnobservedSupportError

DISCHARGED = 0
DIED = 1
TRUNCATED = 2


class RowSampler:
    """Draw column indices from many categorical rows at once.

    Nonzero entries are laid out flat with keys ``row + cumulative_prob``, so a
    draw for row ``r`` with uniform ``u`` is a single ``searchsorted`` for
    ``r + u``. Rows with zero mass cannot be sampled.
    """

    def __init__(self, probs: np.ndarray):
        probs = np.asarray(probs, dtype=np.float64)
        rows, cols = np.nonzero(probs)
        vals = probs[rows, cols]
        self.row_mass = probs.sum(axis=1)
        starts = np.searchsorted(rows, np.arange(probs.shape[0]))
        cs = np.cumsum(vals)
        before = np.where(starts > 0, cs[np.maximum(starts - 1, 0)], 0.0)
        within = cs - before[rows]
        within /= self.row_mass[rows]
        last = np.ones(len(rows), dtype=bool)
        last[:-1] = rows[1:] != rows[:-1]
        within[last] = 1.0
        self.keys = rows + within
        self.cols = cols

    def sample(self, rows: np.ndarray, u: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.keys, rows + u, side="right")
        return self.cols[pos]


class ChainSimulator:
    """Roll out trajectories of an absorbing chain under a fixed policy.

    ``trans`` is ``(S, A, S+2)`` with targets ``S`` (discharge) and ``S+1``
    (death); ``pi`` is ``(S, A)``.
    """

    def __init__(self, trans: np.ndarray, pi: np.ndarray):
        S, A, T = trans.shape
        if T != S + 2 or pi.shape != (S, A):
            raise ValueError(f"incompatible shapes {trans.shape} and {pi.shape}")
        self.s_count, self.a_count = S, A
        self.trans = RowSampler(trans.reshape(S * A, T))
        self.policy = RowSampler(pi)

    def run(self, starts, max_steps: int, rng: np.random.Generator, record: bool = False):
        """Return ``(outcome, length)`` arrays and, with ``record``, the flat
        ``(traj, state, action)`` step arrays ordered by trajectory then time."""
        S, A = self.s_count, self.a_count
        starts = np.asarray(starts, dtype=np.int64)
        if len(starts) and np.any(self.policy.row_mass[np.unique(starts)] <= 0):
            raise ValueError("policy is undefined at a start state")
        n = len(starts)
        state = starts.copy()
        length = np.zeros(n, dtype=np.int64)
        outcome = np.full(n, TRUNCATED, dtype=np.int8)
        active = np.arange(n)
        log_idx, log_s, log_a = [], [], []
        for _ in range(max_steps):
            if len(active) == 0:
                break
            s = state[active]
            a = self.policy.sample(s, rng.random(len(active)))
            rows = s * A + a
            missing = self.trans.row_mass[rows] <= 0
            if missing.any():
                k = int(np.flatnonzero(missing)[0])
                raise UnobservedSupportError(int(s[k]), int(a[k]))
            nxt = self.trans.sample(rows, rng.random(len(active)))
            length[active] += 1
            if record:
                log_idx.append(active)
                log_s.append(s)
                log_a.append(a)
            outcome[active[nxt == S]] = DISCHARGED
            outcome[active[nxt == S + 1]] = DIED
            keep = nxt < S
            state[active[keep]] = nxt[keep]
            active = active[keep]
        if not record:
            return outcome, length
        if not log_idx:
            empty = np.zeros(0, np.int64)
            return outcome, length, (empty, empty, empty)
        idx = np.concatenate(log_idx)
        order = np.argsort(idx, kind="stable")
        return outcome, length, (idx[order], np.concatenate(log_s)[order], np.concatenate(log_a)[order])
