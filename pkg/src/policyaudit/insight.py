"""Audit analyses: dose-gap mortality curves, permutation feature importance
for "drug given" versus "drug recommended", and cohort-rate arithmetic."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cohort import Cohort
from .discretize import DiscreteDataset, DiscretizationModel, action_bins, discretize_cohort
from .errors import FeatureMismatchError, SingleClassTargetError, ZeroDenominatorError
from .solver import Policy

AVERAGE_GAP = "average"
ABSOLUTE_TOTAL_GAP = "absolute_total"
AXES = ("fluid", "vaso")
BEHAVIOR_GIVES_DRUG = "behavior"
AI_RECOMMENDS_DRUG = "ai"


# ---------------------------------------------------------------------------
# dose gap

@dataclass(eq=False)
class DoseGapCurve:
    axis: str
    mode: str
    edges: np.ndarray
    n_patients: np.ndarray
    mortality: np.ndarray            # NaN in empty bins
    patient_ids: tuple[str, ...] = field(repr=False, default=())
    patient_gaps: np.ndarray = field(repr=False, default=None)

    @property
    def empty_bins(self) -> list[int]:
        return np.flatnonzero(self.n_patients == 0).tolist()

    def bins(self) -> list[dict]:
        return [
            {"gap_low": float(self.edges[i]), "gap_high": float(self.edges[i + 1]),
             "n_patients": int(self.n_patients[i]), "mortality": float(self.mortality[i])}
            for i in range(len(self.n_patients))
        ]

    def save_csv(self, path: str | Path) -> Path:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["gap_low", "gap_high", "n", "mortality"])
            for b in self.bins():
                w.writerow([repr(b["gap_low"]), repr(b["gap_high"]), b["n_patients"], repr(b["mortality"])])
        return Path(path)

    def save_patients_csv(self, path: str | Path) -> Path:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "gap"])
            for pid, g in zip(self.patient_ids, self.patient_gaps):
                w.writerow([pid, repr(float(g))])
        return Path(path)


@dataclass(eq=False)
class PatientGaps:
    patient_ids: tuple[str, ...]
    steps: np.ndarray
    average: np.ndarray
    absolute_total: np.ndarray
    died: np.ndarray


def patient_dose_gaps(d: DiscreteDataset, m: DiscretizationModel, optimal: Policy, axis: str) -> PatientGaps:
    """Per-patient mean signed gap and summed absolute gap between the given
    dose and the recommended bin's representative dose."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    if not optimal.deterministic:
        raise ValueError("dose gaps need a deterministic policy")
    given = d.fluid if axis == "fluid" else d.vaso
    if given is None:
        raise ValueError("dataset carries no raw doses")
    recommended = m.representative_dose(optimal.table[d.states], axis)
    gap = given - recommended
    starts = d.offsets[:-1]
    lengths = d.lengths
    return PatientGaps(
        d.patient_ids,
        lengths,
        np.add.reduceat(gap, starts) / lengths,
        np.add.reduceat(np.abs(gap), starts),
        np.asarray(d.died, dtype=bool),
    )


def _decile_edges(stat: np.ndarray) -> np.ndarray:
    edges = np.unique(np.quantile(stat, np.linspace(0, 1, 11)))
    if len(edges) == 1:
        edges = np.array([edges[0], edges[0]])
    return edges


def gap_curve(stat: np.ndarray, died: np.ndarray, edges=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bin patients by ``stat`` into ``[e_i, e_{i+1})`` (last bin closed) and
    compute per-bin counts and mortality."""
    edges = _decile_edges(stat) if edges is None else np.asarray(edges, dtype=np.float64)
    if len(edges) < 2 or np.any(np.diff(edges) < 0):
        raise ValueError("bin edges must be ascending with at least two entries")
    k = len(edges) - 1
    idx = np.searchsorted(edges, stat, side="right") - 1
    idx = np.where(stat == edges[-1], k - 1, idx)
    inside = (idx >= 0) & (idx < k)
    n = np.bincount(idx[inside], minlength=k)
    deaths = np.bincount(idx[inside], weights=died[inside].astype(float), minlength=k)
    with np.errstate(invalid="ignore", divide="ignore"):
        mort = np.where(n > 0, deaths / np.maximum(n, 1), np.nan)
    return edges, n, mort


def dose_gap(c: Cohort | DiscreteDataset, m: DiscretizationModel, optimal: Policy, mode: str,
             axis: str, bin_edges: Sequence[float] | None = None) -> DoseGapCurve:
    d = c if isinstance(c, DiscreteDataset) else discretize_cohort(m, c)
    gaps = patient_dose_gaps(d, m, optimal, axis)
    if mode == AVERAGE_GAP:
        stat = gaps.average
    elif mode == ABSOLUTE_TOTAL_GAP:
        stat = gaps.absolute_total
    else:
        raise ValueError(f"mode must be {AVERAGE_GAP!r} or {ABSOLUTE_TOTAL_GAP!r}")
    edges, n, mort = gap_curve(stat, gaps.died, bin_edges)
    return DoseGapCurve(axis, mode, edges, n, mort, gaps.patient_ids, stat)


# ---------------------------------------------------------------------------
# bagged decision trees

class _Tree:
    """Depth-limited CART on pre-binned integer features (Gini impurity)."""

    def __init__(self, max_depth: int):
        self.max_depth = max_depth
        self.feature: list[int] = []
        self.split: list[int] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def fit(self, Xb: np.ndarray, y: np.ndarray, n_bins: int) -> "_Tree":
        self._grow(Xb, y, n_bins, np.arange(len(y)), 0)
        self._arrays = tuple(np.asarray(a) for a in (self.feature, self.split, self.left, self.right, self.value))
        return self

    def _leaf(self, p: float) -> int:
        self.feature.append(-1)
        self.split.append(0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(p)
        return len(self.value) - 1

    def _grow(self, Xb, y, n_bins, idx, depth) -> int:
        yi = y[idx]
        n = len(idx)
        pos = int(yi.sum())
        p = pos / n
        if depth >= self.max_depth or pos == 0 or pos == n or n < 4:
            return self._leaf(p)
        d = Xb.shape[1]
        key = (np.arange(d)[None, :] * n_bins + Xb[idx]) * 2 + yi[:, None]
        counts = np.bincount(key.ravel(), minlength=d * n_bins * 2).reshape(d, n_bins, 2)
        left = np.cumsum(counts, axis=1)[:, :-1, :]           # split "bin <= b"
        nl = left.sum(axis=2)
        nr = n - nl
        pl = left[:, :, 1]
        pr = pos - pl
        with np.errstate(invalid="ignore", divide="ignore"):
            gini_l = 1 - (pl / nl) ** 2 - ((nl - pl) / nl) ** 2
            gini_r = 1 - (pr / nr) ** 2 - ((nr - pr) / nr) ** 2
            cost = (nl * gini_l + nr * gini_r) / n
        cost = np.where((nl > 0) & (nr > 0), cost, np.inf)
        best = int(np.argmin(cost))
        if not np.isfinite(cost.flat[best]) or cost.flat[best] >= 1 - p ** 2 - (1 - p) ** 2 - 1e-12:
            return self._leaf(p)
        f, b = divmod(best, n_bins - 1)
        node = self._leaf(p)
        self.feature[node] = f
        self.split[node] = b
        go_left = Xb[idx, f] <= b
        self.left[node] = self._grow(Xb, y, n_bins, idx[go_left], depth + 1)
        self.right[node] = self._grow(Xb, y, n_bins, idx[~go_left], depth + 1)
        return node

    def predict_proba(self, Xb: np.ndarray) -> np.ndarray:
        feature, split, left, right, value = self._arrays
        node = np.zeros(len(Xb), dtype=np.int64)
        for _ in range(self.max_depth):
            f = feature[node]
            internal = f >= 0
            if not internal.any():
                break
            rows = np.flatnonzero(internal)
            go_left = Xb[rows, f[rows]] <= split[node[rows]]
            node[rows] = np.where(go_left, left[node[rows]], right[node[rows]])
        return value[node]


class BaggedTrees:
    """Bootstrap-aggregated depth-limited decision trees for a binary target."""

    def __init__(self, n_trees: int = 50, max_depth: int = 6, n_bins: int = 32,
                 max_samples: int = 20_000, seed: int = 0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.n_bins = n_bins
        self.max_samples = max_samples
        self.seed = seed

    def _bin(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape, dtype=np.int64)
        for j, cuts in enumerate(self.cuts_):
            out[:, j] = np.searchsorted(cuts, X[:, j], side="left")
        return out

    def fit(self, X: np.ndarray, y: np.ndarray) -> "BaggedTrees":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        qs = np.linspace(0, 1, self.n_bins + 1)[1:-1]
        self.cuts_ = [np.unique(np.quantile(X[:, j], qs)) for j in range(X.shape[1])]
        Xb = self._bin(X)
        rng = np.random.default_rng(self.seed)
        size = min(len(y), self.max_samples)
        self.trees_ = []
        for _ in range(self.n_trees):
            idx = rng.integers(0, len(y), size)
            self.trees_.append(_Tree(self.max_depth).fit(Xb[idx], y[idx], self.n_bins))
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        Xb = self._bin(np.asarray(X, dtype=np.float64))
        return np.mean([t.predict_proba(Xb) for t in self.trees_], axis=0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X) > 0.5).astype(np.int64)


# ---------------------------------------------------------------------------
# permutation importance

@dataclass(eq=False)
class FeatureImportance:
    features: tuple[str, ...]
    importances: np.ndarray    # mean accuracy drop, floored at 0
    sd: np.ndarray             # spread of the raw drops over permutations
    raw_drops: np.ndarray = field(repr=False, default=None)
    baseline_accuracy: float = float("nan")

    def as_dict(self) -> dict[str, float]:
        return {f: float(v) for f, v in zip(self.features, self.importances)}

    def ranking(self) -> list[str]:
        order = sorted(range(len(self.features)), key=lambda i: (-self.importances[i], self.features[i]))
        return [self.features[i] for i in order]


def permutation_importance_xy(X: np.ndarray, y: np.ndarray, feature_names: Sequence[str], seed: int = 0,
                              n_repeats: int = 10, workers: int = 1, **forest_kw) -> FeatureImportance:
    """Fit :class:`BaggedTrees` on two thirds of the rows and measure the
    accuracy drop on the remaining third when each feature is shuffled."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if len(np.unique(y)) < 2:
        raise SingleClassTargetError("target has a single class")
    if X.shape[1] != len(feature_names):
        raise FeatureMismatchError(f"{X.shape[1]} columns but {len(feature_names)} names")
    ss_split, ss_forest, ss_perm = np.random.SeedSequence(seed).spawn(3)
    order = np.random.default_rng(ss_split).permutation(len(y))
    n_test = len(y) // 3
    test, train = order[:n_test], order[n_test:]
    if len(np.unique(y[train])) < 2:
        raise SingleClassTargetError("training split has a single class")
    forest_seed = int(ss_forest.generate_state(1)[0])
    clf = BaggedTrees(seed=forest_seed, **forest_kw).fit(X[train], y[train])
    Xt, yt = X[test], y[test]
    base = float(np.mean(clf.predict(Xt) == yt))
    feature_seeds = ss_perm.spawn(X.shape[1])

    def drops_for(j):
        rng = np.random.default_rng(feature_seeds[j])
        out = np.empty(n_repeats)
        Xp = Xt.copy()
        for r in range(n_repeats):
            Xp[:, j] = Xt[rng.permutation(len(yt)), j]
            out[r] = base - float(np.mean(clf.predict(Xp) == yt))
        return out

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            drops = np.array(list(pool.map(drops_for, range(X.shape[1]))))
    else:
        drops = np.array([drops_for(j) for j in range(X.shape[1])])
    return FeatureImportance(
        tuple(feature_names),
        np.maximum(drops.mean(axis=1), 0.0),
        drops.std(axis=1, ddof=1) if n_repeats > 1 else np.zeros(X.shape[1]),
        drops,
        base,
    )


def drug_target(d: DiscreteDataset, target: str, axis: str, optimal: Policy | None = None) -> np.ndarray:
    """Per-step binary label: was (or would be) a non-zero dose of ``axis`` given."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    if target == BEHAVIOR_GIVES_DRUG:
        acts = d.actions
    elif target == AI_RECOMMENDS_DRUG:
        if optimal is None or not optimal.deterministic:
            raise ValueError("the AI target needs a deterministic policy")
        acts = optimal.table[d.states]
    else:
        raise ValueError(f"target must be {BEHAVIOR_GIVES_DRUG!r} or {AI_RECOMMENDS_DRUG!r}")
    fb, vb = action_bins(acts)
    return ((fb if axis == "fluid" else vb) > 0).astype(np.int64)


def permutation_importance(d: DiscreteDataset, target: str, drug_axis: str, seed: int = 0,
                           optimal: Policy | None = None, feature_names: Sequence[str] | None = None,
                           n_repeats: int = 10, workers: int = 1, **forest_kw) -> FeatureImportance:
    if d.features is None:
        raise ValueError("dataset carries no raw features")
    y = drug_target(d, target, drug_axis, optimal)
    names = feature_names or tuple(f"x{j}" for j in range(d.features.shape[1]))
    return permutation_importance_xy(d.features, y, names, seed, n_repeats, workers, **forest_kw)


@dataclass(eq=False)
class ImportanceComparison:
    features: tuple[str, ...]
    importance_behavior: np.ndarray
    importance_ai: np.ndarray
    discrepancy_rank: list[str]

    @property
    def discrepancy(self) -> np.ndarray:
        return np.abs(self.importance_behavior - self.importance_ai)

    def save_csv(self, path: str | Path) -> Path:
        pos = {f: i for i, f in enumerate(self.features)}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "imp_behavior", "imp_ai", "discrepancy"])
            for f in self.discrepancy_rank:
                i = pos[f]
                w.writerow([f, repr(float(self.importance_behavior[i])), repr(float(self.importance_ai[i])),
                            repr(float(self.discrepancy[i]))])
        return Path(path)


def _as_mapping(x) -> Mapping[str, float]:
    return x.as_dict() if isinstance(x, FeatureImportance) else dict(x)


def compare_importances(a, b) -> ImportanceComparison:
    """``a`` is the behavior-target importance, ``b`` the AI-target one."""
    a, b = _as_mapping(a), _as_mapping(b)
    if set(a) != set(b):
        raise FeatureMismatchError(f"feature sets differ: {sorted(set(a) ^ set(b))}")
    names = tuple(a)
    ia = np.array([a[f] for f in names], dtype=np.float64)
    ib = np.array([b[f] for f in names], dtype=np.float64)
    diff = np.abs(ia - ib)
    rank = sorted(range(len(names)), key=lambda i: (-diff[i], names[i]))
    return ImportanceComparison(names, ia, ib, [names[i] for i in rank])


# ---------------------------------------------------------------------------

def inclusion_rate(included: int, excluded_without_condition: int) -> float:
    """``included / (included + excluded_without_condition)`` to 4 decimals."""
    if included < 0 or excluded_without_condition < 0:
        raise ValueError("counts must be non-negative")
    total = included + excluded_without_condition
    if total == 0:
        raise ZeroDenominatorError("no patients in the denominator")
    return round(included / total, 4)
