"""Monte Carlo rollouts in the learned MDP and the goodness-of-fit check
built on them (predicted mortality and trajectory length versus the data)."""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._sampling import DIED, DISCHARGED, TRUNCATED, ChainSimulator
from .discretize import DiscreteDataset
from .mdp import TabularMdp
from .solver import Policy

OUTCOME_NAMES = {DISCHARGED: "discharged", DIED: "died", TRUNCATED: "truncated"}
DEFAULT_MAX_STEPS = 200


@dataclass
class RolloutStats:
    batches: int
    per_batch_size: int
    mortality_mean: float
    mortality_sd: float
    length_mean: float
    length_sd: float
    truncated_fraction: float
    batch_mortality: np.ndarray = field(repr=False, default=None)
    batch_length: np.ndarray = field(repr=False, default=None)

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("batch_mortality")
        out.pop("batch_length")
        return out

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return path

    def save_batches_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["batch", "mortality", "mean_length"])
            for i, (mort, ln) in enumerate(zip(self.batch_mortality, self.batch_length)):
                w.writerow([i, repr(float(mort)), repr(float(ln))])
        return path


def _simulator(m: TabularMdp, p: Policy) -> ChainSimulator:
    if p.s_count != m.s_count or p.a_count != m.a_count:
        raise ValueError("policy and MDP dimensions differ")
    return ChainSimulator(np.asarray(m.probs), p.probs())


def simulate_trajectory(m: TabularMdp, p: Policy, start_state: int, max_steps: int = DEFAULT_MAX_STEPS,
                        rng: np.random.Generator | None = None) -> tuple[str, int]:
    """One rollout from ``start_state``: ``("died" | "discharged" | "truncated", length)``."""
    if not 0 <= start_state < m.s_count:
        raise IndexError(f"start_state {start_state} outside 0..{m.s_count - 1}")
    rng = np.random.default_rng() if rng is None else rng
    outcome, length = _simulator(m, p).run(np.array([start_state]), max_steps, rng)
    return OUTCOME_NAMES[int(outcome[0])], int(length[0])


def initial_distribution(d: DiscreteDataset, mode: str = "empirical") -> np.ndarray:
    """Start-state law: first-state frequencies of ``d``, or uniform."""
    if mode == "empirical":
        counts = np.bincount(d.first_states, minlength=d.s_count).astype(np.float64)
        return counts / counts.sum()
    if mode == "uniform":
        return np.full(d.s_count, 1.0 / d.s_count)
    raise ValueError(f"unknown initial distribution mode {mode!r}")


def _batch(sim: ChainSimulator, init_cdf: np.ndarray, size: int, max_steps: int, ss: np.random.SeedSequence):
    rng = np.random.default_rng(ss)
    starts = np.searchsorted(init_cdf, rng.random(size), side="right")
    starts = np.minimum(starts, len(init_cdf) - 1)
    outcome, length = sim.run(starts, max_steps, rng)
    absorbed = outcome != TRUNCATED
    n_abs = int(absorbed.sum())
    mort = float((outcome == DIED).sum() / n_abs) if n_abs else float("nan")
    mean_len = float(length[absorbed].mean()) if n_abs else float("nan")
    return mort, mean_len, size - n_abs


def validate_model(m: TabularMdp, p: Policy, initial_dist, batches: int = 1000, batch_size: int = 2500,
                   seed: int = 0, max_steps: int = DEFAULT_MAX_STEPS, workers: int = 1) -> RolloutStats:
    """Simulate ``batches`` x ``batch_size`` trajectories and summarise
    per-batch mortality and mean length across batches.

    Truncated rollouts are left out of both per-batch statistics and counted in
    ``truncated_fraction``. Each batch draws from its own child seed, so results
    do not depend on ``workers``.
    """
    init = np.asarray(initial_dist, dtype=np.float64)
    if init.shape != (m.s_count,) or np.any(init < 0) or abs(init.sum() - 1) > 1e-9:
        raise ValueError("initial_dist must be a probability vector over the S states")
    if batches < 1 or batch_size < 1:
        raise ValueError("batches and batch_size must be positive")
    sim = _simulator(m, p)
    cdf = np.cumsum(init)
    cdf[-1] = 1.0
    children = np.random.SeedSequence(seed).spawn(batches)
    job = lambda ss: _batch(sim, cdf, batch_size, max_steps, ss)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, children))
    else:
        results = [job(ss) for ss in children]
    mort = np.array([r[0] for r in results])
    length = np.array([r[1] for r in results])
    truncated = sum(r[2] for r in results)
    ddof = 1 if batches > 1 else 0
    with warnings.catch_warnings():
        # all-truncated batches are NaN; an all-NaN summary stays NaN
        warnings.simplefilter("ignore", RuntimeWarning)
        summary = (np.nanmean(mort), np.nanstd(mort, ddof=ddof), np.nanmean(length), np.nanstd(length, ddof=ddof))
    return RolloutStats(
        batches=batches,
        per_batch_size=batch_size,
        mortality_mean=float(summary[0]),
        mortality_sd=float(summary[1]),
        length_mean=float(summary[2]),
        length_sd=float(summary[3]),
        truncated_fraction=truncated / (batches * batch_size),
        batch_mortality=mort,
        batch_length=length,
    )
