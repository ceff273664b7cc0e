"""Tabular MDP estimation from discretized trajectories.

Target indices ``0..S-1`` are the clustered states, ``S`` is the discharge
absorbing state and ``S+1`` the death absorbing state. Absorbing states never
appear as sources.

Binary count file layout (little endian)::

    8 bytes   magic b"PAMDP001"
    uint32    S
    uint32    A
    uint64    nnz
    nnz x {uint32 state, uint32 action, uint32 target, uint64 count}

A JSON sidecar next to it carries the configuration and the file's sha256.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .discretize import N_ACTIONS, DiscreteDataset
from .errors import EmptyDatasetError, HashMismatchError, IndexOutOfRangeError, MalformedRecordError

MAGIC = b"PAMDP001"
_HEADER = struct.Struct("<8sIIQ")
_RECORD = np.dtype([("s", "<u4"), ("a", "<u4"), ("t", "<u4"), ("n", "<u8")])

DEFAULT_REWARD = 100.0
DEFAULT_GAMMA = 0.99
DEFAULT_PRUNE_MIN_COUNT = 5


@dataclass(frozen=True, eq=False)
class TabularMdp:
    counts: np.ndarray
    reward_magnitude: float = DEFAULT_REWARD
    gamma: float = DEFAULT_GAMMA
    prune_min_count: int = DEFAULT_PRUNE_MIN_COUNT
    orphan_states: tuple[int, ...] = ()
    probs: np.ndarray = field(init=False, repr=False)
    sa_counts: np.ndarray = field(init=False, repr=False)
    allowed: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        counts = self.counts
        S, A, T = counts.shape
        if T != S + 2:
            raise ValueError(f"counts must have shape (S, A, S+2), got {counts.shape}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.prune_min_count < 1:
            raise ValueError("prune_min_count must be at least 1")
        sa = counts.sum(axis=2)
        probs = np.zeros(counts.shape)
        observed = sa > 0
        probs[observed] = counts[observed] / sa[observed][:, None]
        allowed = sa >= self.prune_min_count
        for name, arr in (("counts", counts), ("probs", probs), ("sa_counts", sa), ("allowed", allowed)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "orphan_states", tuple(int(s) for s in self.orphan_states))

    @property
    def s_count(self) -> int:
        return self.counts.shape[0]

    @property
    def a_count(self) -> int:
        return self.counts.shape[1]

    @property
    def discharge(self) -> int:
        return self.s_count

    @property
    def death(self) -> int:
        return self.s_count + 1

    @property
    def observed(self) -> np.ndarray:
        return self.sa_counts > 0

    def terminal_rewards(self) -> np.ndarray:
        """Reward on entering each target: 0 for transient states, +R/-R for discharge/death."""
        r = np.zeros(self.s_count + 2)
        r[self.discharge] = self.reward_magnitude
        r[self.death] = -self.reward_magnitude
        return r

    def config(self) -> dict:
        return {
            "reward_magnitude": float(self.reward_magnitude),
            "gamma": float(self.gamma),
            "prune_min_count": int(self.prune_min_count),
        }

    def with_rewards(self, reward_magnitude: float | None = None, gamma: float | None = None) -> "TabularMdp":
        return TabularMdp(
            self.counts,
            self.reward_magnitude if reward_magnitude is None else reward_magnitude,
            self.gamma if gamma is None else gamma,
            self.prune_min_count,
            self.orphan_states,
        )

    @classmethod
    def from_probabilities(cls, probs: np.ndarray, reward_magnitude: float = DEFAULT_REWARD,
                           gamma: float = DEFAULT_GAMMA) -> "TabularMdp":
        """Wrap exact transition probabilities (e.g. a synthetic ground truth).

        ``counts`` then holds the probabilities themselves and every pair with
        mass is allowed.
        """
        probs = np.array(probs, dtype=np.float64)
        m = cls(probs, reward_magnitude, gamma, 1)
        allowed = np.array(m.sa_counts > 0)
        allowed.setflags(write=False)
        object.__setattr__(m, "allowed", allowed)
        return m

    def identical(self, other: "TabularMdp") -> bool:
        return (
            np.array_equal(self.counts, other.counts)
            and self.config() == other.config()
            and self.orphan_states == other.orphan_states
        )


def estimate_mdp(
    d: DiscreteDataset,
    reward_magnitude: float = DEFAULT_REWARD,
    gamma: float = DEFAULT_GAMMA,
    prune_min_count: int = DEFAULT_PRUNE_MIN_COUNT,
    a_count: int = N_ACTIONS,
) -> TabularMdp:
    """Tally every observed transition, including each final step into its
    outcome's absorbing state, and row-normalize."""
    if len(d) == 0 or d.n_steps == 0:
        raise EmptyDatasetError("cannot estimate an MDP from an empty dataset")
    S = d.s_count
    if d.states.min() < 0 or d.states.max() >= S:
        raise IndexOutOfRangeError(f"state index outside 0..{S - 1}")
    if d.actions.min() < 0 or d.actions.max() >= a_count:
        raise IndexOutOfRangeError(f"action index outside 0..{a_count - 1}")
    nxt = d.next_states()
    flat = (d.states * a_count + d.actions) * (S + 2) + nxt
    counts = np.bincount(flat, minlength=S * a_count * (S + 2)).reshape(S, a_count, S + 2)
    orphans = np.flatnonzero(counts.sum(axis=(1, 2)) == 0)
    return TabularMdp(counts.astype(np.int64), reward_magnitude, gamma, prune_min_count, tuple(orphans.tolist()))


def transition_row(m: TabularMdp, s: int, a: int) -> np.ndarray | None:
    """Normalized transition row over ``S+2`` targets, or ``None`` when the pair
    was never observed."""
    if not (0 <= s < m.s_count and 0 <= a < m.a_count):
        raise IndexOutOfRangeError(f"(state={s}, action={a}) outside {m.s_count}x{m.a_count}")
    if m.sa_counts[s, a] == 0:
        return None
    return m.probs[s, a].copy()


def format_row(m: TabularMdp, s: int, a: int) -> str:
    row = transition_row(m, s, a)
    head = f"state {s} action {a}: n={int(m.sa_counts[s, a])} allowed={bool(m.allowed[s, a])}"
    if row is None:
        return head + "\n  unobserved"
    lines = [head]
    for t in np.flatnonzero(row):
        label = "discharge" if t == m.discharge else "death" if t == m.death else str(t)
        lines.append(f"  -> {label}: count={int(m.counts[s, a, t])} p={row[t]:.6f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# persistence

def mdp_to_bytes(m: TabularMdp) -> bytes:
    s, a, t = np.nonzero(m.counts)
    rec = np.empty(len(s), dtype=_RECORD)
    rec["s"], rec["a"], rec["t"], rec["n"] = s, a, t, m.counts[s, a, t]
    return _HEADER.pack(MAGIC, m.s_count, m.a_count, len(rec)) + rec.tobytes()


def counts_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise MalformedRecordError(0, "truncated MDP file")
    magic, S, A, nnz = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MalformedRecordError(0, f"bad magic {magic!r}")
    rec = np.frombuffer(blob, dtype=_RECORD, offset=_HEADER.size)
    if len(rec) != nnz:
        raise MalformedRecordError(0, f"expected {nnz} records, found {len(rec)}")
    counts = np.zeros((S, A, S + 2), dtype=np.int64)
    counts[rec["s"], rec["a"], rec["t"]] = rec["n"]
    return counts


def save_mdp(m: TabularMdp, path: str | Path, extra: dict | None = None) -> tuple[Path, Path]:
    """Write the binary count file and its JSON sidecar (``<path>.json``)."""
    path = Path(path)
    blob = mdp_to_bytes(m)
    path.write_bytes(blob)
    sidecar = path.with_name(path.name + ".json")
    meta = {
        "kind": "tabular_mdp",
        "s_count": m.s_count,
        "a_count": m.a_count,
        "config": m.config(),
        "orphan_states": list(m.orphan_states),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        meta.update(extra)
    sidecar.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path, sidecar


def load_mdp(path: str | Path) -> TabularMdp:
    path = Path(path)
    blob = path.read_bytes()
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
        raise HashMismatchError(f"{path} does not match the hash in its sidecar")
    cfg = meta["config"]
    return TabularMdp(
        counts_from_bytes(blob),
        cfg["reward_magnitude"],
        cfg["gamma"],
        cfg["prune_min_count"],
        tuple(meta.get("orphan_states", ())),
    )
