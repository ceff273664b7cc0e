"""Off-policy evaluation by weighted importance sampling (WIS).

Returns are terminal only: a trajectory of ``T`` steps ending in discharge is
worth ``gamma**(T-1) * R`` and one ending in death ``-gamma**(T-1) * R``.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .discretize import DiscreteDataset
from .errors import NoOverlapError, ZeroBehaviorProbError
from .mdp import DEFAULT_REWARD
from .solver import Policy

_BOOTSTRAP_CELLS = 2_000_000  # resample-matrix entries per block


@dataclass(eq=False)
class OpeReport:
    point_estimate: float
    ess: float
    nonzero_weight_fraction: float
    per_trajectory_weights: np.ndarray = field(repr=False)
    returns: np.ndarray = field(repr=False)
    lower_bound: float | None = None
    confidence: float | None = None
    resamples: int = 0
    undefined_resamples: int = 0
    bootstrap_estimates: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_trajectories(self) -> int:
        return len(self.per_trajectory_weights)

    def to_json(self) -> dict:
        return {
            "point_estimate": self.point_estimate,
            "lower_bound": self.lower_bound,
            "confidence": self.confidence,
            "ess": self.ess,
            "nonzero_weight_fraction": self.nonzero_weight_fraction,
            "n_trajectories": self.n_trajectories,
            "resamples": self.resamples,
            "undefined_resamples": self.undefined_resamples,
            "per_trajectory_weights": self.per_trajectory_weights.tolist(),
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")
        return path

    def save_weight_histogram(self, path: str | Path, bins: int = 30) -> Path:
        """Zero weights in the first row, then log10-spaced bins over the positive weights."""
        w = self.per_trajectory_weights
        pos = w[w > 0]
        rows = [(0.0, 0.0, int((w == 0).sum()))]
        if len(pos):
            lo, hi = np.log10(pos.min()), np.log10(pos.max())
            if hi == lo:
                hi = lo + 1e-9
            counts, edges = np.histogram(np.log10(pos), bins=bins, range=(lo, hi))
            rows += [(10 ** edges[i], 10 ** edges[i + 1], int(c)) for i, c in enumerate(counts)]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["weight_low", "weight_high", "count"])
            for lo_, hi_, c in rows:
                wr.writerow([repr(float(lo_)), repr(float(hi_)), c])
        return Path(path)


def trajectory_returns(d: DiscreteDataset, gamma: float, reward_magnitude: float = DEFAULT_REWARD) -> np.ndarray:
    sign = np.where(d.died, -1.0, 1.0)
    return sign * reward_magnitude * gamma ** (d.lengths - 1).astype(np.float64)


def importance_weights(d: DiscreteDataset, pi_b: Policy, pi_e: Policy) -> np.ndarray:
    """Per-trajectory product of ``pi_e(a|s) / pi_b(a|s)`` over all steps."""
    pb = pi_b.prob(d.states, d.actions)
    zero = pb <= 0
    if zero.any():
        k = int(np.flatnonzero(zero)[0])
        raise ZeroBehaviorProbError(int(d.states[k]), int(d.actions[k]))
    ratio = pi_e.prob(d.states, d.actions) / pb
    return np.multiply.reduceat(ratio, d.offsets[:-1])


def _wis(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Row-wise WIS for 1-D or 2-D ``w``/``g``; NaN where all weights vanish.

    The result is clipped to the span of the positively weighted returns,
    which it lies in exactly; the clip only removes rounding drift.
    """
    total = w.sum(axis=-1)
    num = (w * g).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        est = num / total
    pos = w > 0
    lo = np.where(pos, g, np.inf).min(axis=-1)
    hi = np.where(pos, g, -np.inf).max(axis=-1)
    est = np.where(total > 0, np.clip(est, lo, hi), np.nan)
    return est


def wis_evaluate(d: DiscreteDataset, pi_b: Policy, pi_e: Policy, gamma: float,
                 reward_magnitude: float = DEFAULT_REWARD, weight_cap: float | None = None) -> OpeReport:
    """WIS estimate of ``pi_e`` from data collected under ``pi_b``.

    Raises :class:`NoOverlapError` when every trajectory weight is zero.
    """
    if len(d) == 0:
        raise NoOverlapError("empty dataset")
    w = importance_weights(d, pi_b, pi_e)
    if weight_cap is not None:
        w = np.minimum(w, weight_cap)
    g = trajectory_returns(d, gamma, reward_magnitude)
    total = w.sum()
    if not total > 0:
        raise NoOverlapError("target policy has no support on any trajectory")
    est = float(_wis(w, g))
    return OpeReport(
        point_estimate=est,
        ess=float(total ** 2 / np.sum(w ** 2)),
        nonzero_weight_fraction=float(np.count_nonzero(w) / len(w)),
        per_trajectory_weights=w,
        returns=g,
    )


def bootstrap_lower_bound(d: DiscreteDataset, pi_b: Policy, pi_e: Policy, gamma: float,
                          resamples: int = 2000, confidence: float = 0.95, seed: int = 0,
                          reward_magnitude: float = DEFAULT_REWARD, weight_cap: float | None = None,
                          workers: int = 1) -> OpeReport:
    """Percentile-bootstrap lower bound on the WIS estimate.

    Trajectories are resampled with replacement; the bound is the
    ``1 - confidence`` quantile of the replicate estimates. Replicates whose
    weights are all zero are dropped and counted in ``undefined_resamples``.
    Replicates are generated in fixed blocks with their own child seeds, so
    ``workers`` never changes the result.
    """
    if resamples < 100:
        raise ValueError("need at least 100 resamples")
    if not 0 < confidence < 1:
        raise ValueError("confidence must be in (0, 1)")
    report = wis_evaluate(d, pi_b, pi_e, gamma, reward_magnitude, weight_cap)
    w, g = report.per_trajectory_weights, report.returns
    n = len(w)
    block = max(1, _BOOTSTRAP_CELLS // n)
    sizes = [min(block, resamples - lo) for lo in range(0, resamples, block)]
    children = np.random.SeedSequence(seed).spawn(len(sizes))

    def run(args):
        size, ss = args
        idx = np.random.default_rng(ss).integers(0, n, size=(size, n))
        return _wis(w[idx], g[idx])

    jobs = list(zip(sizes, children))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    est = np.concatenate(parts)
    defined = est[~np.isnan(est)]
    report.lower_bound = float(np.quantile(defined, 1 - confidence)) if len(defined) else None
    report.confidence = confidence
    report.resamples = resamples
    report.undefined_resamples = int(len(est) - len(defined))
    report.bootstrap_estimates = est
    return report


@dataclass(eq=False)
class AgreementHistogram:
    """Per visited state: how often the observed action equals the optimal one."""

    states: np.ndarray
    visits: np.ndarray
    matches: np.ndarray
    threshold: float
    s_count: int
    unvisited: tuple[int, ...]

    @property
    def fractions(self) -> np.ndarray:
        return self.matches / self.visits

    @property
    def n_above(self) -> int:
        return int(np.count_nonzero(self.fractions > self.threshold))

    @property
    def n_visited(self) -> int:
        return len(self.states)

    def summary(self) -> tuple[int, int]:
        """``(states above threshold, visited states)``."""
        return self.n_above, self.n_visited

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "states_above_threshold": self.n_above,
            "visited_states": self.n_visited,
            "total_states": self.s_count,
            "unvisited_states": list(self.unvisited),
        }

    def save_csv(self, path: str | Path) -> Path:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["state", "visits", "fraction"])
            for s, v, f in zip(self.states, self.visits, self.fractions):
                wr.writerow([int(s), int(v), repr(float(f))])
        return Path(path)


def agreement_histogram(d: DiscreteDataset, optimal: Policy, threshold: float = 0.05) -> AgreementHistogram:
    if not optimal.deterministic:
        raise ValueError("agreement needs a deterministic policy")
    S = d.s_count
    visits = np.bincount(d.states, minlength=S)
    hit = optimal.table[d.states] == d.actions
    matches = np.bincount(d.states[hit], minlength=S)
    visited = np.flatnonzero(visits > 0)
    return AgreementHistogram(
        states=visited,
        visits=visits[visited],
        matches=matches[visited],
        threshold=threshold,
        s_count=S,
        unvisited=tuple(np.flatnonzero(visits == 0).tolist()),
    )
