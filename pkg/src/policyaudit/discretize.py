"""State clustering and the 5x5 drug action grid.

Actions are 0-based here: ``action = 5 * fluid_bin + vaso_bin`` with both bins in
``0..4``, bin 0 meaning exactly zero dose. Action 0 is therefore the zero-drug
action (numbered 1 in the clinical 1..25 convention).
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cohort import Cohort, Trajectory
from .errors import (
    DimensionMismatchError,
    InvalidEdgesError,
    NegativeDoseError,
    NonFiniteDoseError,
    NonFiniteInputError,
    TooFewPointsError,
)

logger = logging.getLogger(__name__)

N_BINS = 5
N_ACTIONS = N_BINS * N_BINS
ZERO_DRUG_ACTION = 0
EDGE_QUANTILES = (0.25, 0.5, 0.75, 1.0)


def action_index(fluid_bin, vaso_bin):
    return N_BINS * np.asarray(fluid_bin) + np.asarray(vaso_bin)


def action_bins(action) -> tuple:
    """Inverse of :func:`action_index`: ``(fluid_bin, vaso_bin)``."""
    action = np.asarray(action)
    return action // N_BINS, action % N_BINS


def dose_bin(dose, edges: np.ndarray):
    """Bin 0 for an exact zero dose, else ``1 + #(edges <= dose)`` capped at 4."""
    dose = np.asarray(dose, dtype=np.float64)
    b = 1 + np.searchsorted(edges, dose, side="right")
    return np.where(dose == 0, 0, np.minimum(b, N_BINS - 1))


@dataclass(frozen=True, eq=False)
class DiscretizationModel:
    feature_names: tuple[str, ...]
    shift: np.ndarray
    scale: np.ndarray
    centroids: np.ndarray
    fluid_edges: np.ndarray
    vaso_edges: np.ndarray
    fluid_repr: np.ndarray
    vaso_repr: np.ndarray
    seed: int = 0
    config: dict = field(default_factory=dict)
    inertia: float = float("nan")

    def __post_init__(self):
        if np.any(self.scale <= 0):
            raise ValueError("scale parameters must be positive")
        if self.centroids.shape[0] < 2 or not np.all(np.isfinite(self.centroids)):
            raise ValueError("need at least 2 finite centroids")
        for axis, edges in (("fluid", self.fluid_edges), ("vaso", self.vaso_edges)):
            _check_edges(axis, edges)

    @property
    def s_count(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.shift) / self.scale

    def inverse_transform(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) * self.scale + self.shift

    def representative_dose(self, action, axis: str):
        """Median training dose of the action's bin along ``axis``."""
        fb, vb = action_bins(action)
        if axis == "fluid":
            return self.fluid_repr[fb]
        if axis == "vaso":
            return self.vaso_repr[vb]
        raise ValueError(f"unknown axis {axis!r}")

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()

    def to_json(self) -> dict:
        return {
            "kind": "discretizer",
            "feature_names": list(self.feature_names),
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "centroids": self.centroids.tolist(),
            "fluid_edges": self.fluid_edges.tolist(),
            "vaso_edges": self.vaso_edges.tolist(),
            "fluid_repr": self.fluid_repr.tolist(),
            "vaso_repr": self.vaso_repr.tolist(),
            "seed": self.seed,
            "inertia": self.inertia,
            "config": self.config,
            "config_hash": self.config_hash(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DiscretizationModel":
        arr = lambda k: np.asarray(obj[k], dtype=np.float64)
        return cls(
            feature_names=tuple(obj["feature_names"]),
            shift=arr("shift"),
            scale=arr("scale"),
            centroids=arr("centroids").reshape(len(obj["centroids"]), -1),
            fluid_edges=arr("fluid_edges"),
            vaso_edges=arr("vaso_edges"),
            fluid_repr=arr("fluid_repr"),
            vaso_repr=arr("vaso_repr"),
            seed=int(obj.get("seed", 0)),
            config=dict(obj.get("config", {})),
            inertia=float(obj.get("inertia", float("nan"))),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DiscretizationModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def _check_edges(axis: str, edges: np.ndarray) -> None:
    if edges.shape != (N_BINS - 1,):
        raise InvalidEdgesError(axis, f"expected {N_BINS - 1} edges, got {edges.shape}")
    if not np.all(np.isfinite(edges)) or np.any(edges <= 0):
        raise InvalidEdgesError(axis, "edges must be finite and positive")
    if np.any(np.diff(edges) <= 0):
        raise InvalidEdgesError(axis, f"edges must be strictly ascending, got {edges.tolist()}")


# ---------------------------------------------------------------------------
# k-means

def squared_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Exact pairwise squared Euclidean distances, shape ``(len(X), len(C))``."""
    out = np.empty((X.shape[0], C.shape[0]))
    chunk = max(1, 2_000_000 // max(1, C.shape[0] * max(1, C.shape[1])))
    for lo in range(0, X.shape[0], chunk):
        diff = X[lo:lo + chunk, None, :] - C[None, :, :]
        out[lo:lo + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def nearest_centroid(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Index of the nearest row of ``C`` for each row of ``X`` (lowest index on ties)."""
    return np.argmin(squared_distances(X, C), axis=1)


def _fast_sq_dists(X, x_sq, C):
    d = x_sq[:, None] - 2.0 * (X @ C.T) + np.einsum("ij,ij->i", C, C)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = np.einsum("ij,ij->i", X - centers[0], X - centers[0])
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than k; callers check distinctness first
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[j] = X[idx]
        diff = X - centers[j]
        np.minimum(closest, np.einsum("ij,ij->i", diff, diff), out=closest)
    return centers


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    history: list[float]


def lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations until the assignment stops changing.

    ``history`` holds the objective after each assignment step.
    """
    k = centers.shape[0]
    centers = centers.copy()
    x_sq = np.einsum("ij,ij->i", X, X)
    labels = None
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d = _fast_sq_dists(X, x_sq, centers)
        new_labels = np.argmin(d, axis=1)
        point_cost = d[np.arange(len(X)), new_labels]
        history.append(float(point_cost.sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, X)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            # reseat an empty cluster on the worst-served point
            far = int(np.argmax(point_cost))
            centers[j] = X[far]
            point_cost[far] = 0.0
    inertia = float(squared_distances(X, centers)[np.arange(len(X)), labels].sum())
    return KMeansResult(centers, labels, inertia, n_iter, history)


def kmeans(X: np.ndarray, k: int, seed: int, restarts: int = 32, max_iter: int = 300,
           workers: int = 1) -> KMeansResult:
    """Best-of-``restarts`` k-means with k-means++ seeding.

    Each restart draws from its own child of ``SeedSequence(seed)``, so the
    result does not depend on ``workers``.
    """
    children = np.random.SeedSequence(seed).spawn(restarts)

    def one(ss):
        rng = np.random.default_rng(ss)
        return lloyd(X, kmeans_plusplus(X, k, rng), max_iter)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, children))
    else:
        results = [one(ss) for ss in children]
    best = min(range(restarts), key=lambda i: (results[i].inertia, i))
    return results[best]


# ---------------------------------------------------------------------------
# fitting

def _stack_steps(trajs: Sequence[Trajectory]):
    X = np.concatenate([t.features for t in trajs], axis=0)
    fluid = np.concatenate([t.fluid for t in trajs])
    vaso = np.concatenate([t.vaso for t in trajs])
    return X, fluid, vaso


def quartile_edges(doses: np.ndarray, axis: str) -> np.ndarray:
    pos = doses[doses > 0]
    if len(pos) == 0:
        raise InvalidEdgesError(axis, "no positive doses to split")
    edges = np.quantile(pos, EDGE_QUANTILES)
    _check_edges(axis, edges)
    return edges


def _bin_medians(doses: np.ndarray, edges: np.ndarray) -> np.ndarray:
    bins = dose_bin(doses, edges)
    lower = np.concatenate([[0.0], edges[:-1]])
    out = np.zeros(N_BINS)
    for b in range(1, N_BINS):
        sel = doses[bins == b]
        if len(sel):
            out[b] = float(np.median(sel))
        else:
            out[b] = 0.5 * (lower[b - 1] + edges[b - 1])
    return out


def fit_discretizer(
    train: Cohort,
    s_count: int = 750,
    seed: int = 0,
    restarts: int = 32,
    max_iter: int = 300,
    fluid_edges: Sequence[float] | None = None,
    vaso_edges: Sequence[float] | None = None,
    workers: int = 1,
) -> DiscretizationModel:
    """Fit the z-score scaler, the state centroids and the dose bin edges.

    Dose edges default to the quartiles of the strictly positive training doses
    of each drug; pass explicit edges to override.
    """
    if len(train) == 0:
        raise TooFewPointsError("empty training cohort")
    X, fluid, vaso = _stack_steps(train.trajectories)
    n_distinct = len(np.unique(X, axis=0))
    if n_distinct < s_count:
        raise TooFewPointsError(f"{n_distinct} distinct timesteps, need at least s_count={s_count}")
    if s_count < 2:
        raise ValueError("s_count must be at least 2")

    shift = X.mean(axis=0)
    scale = X.std(axis=0)
    degenerate = ~(scale > 0)
    if np.any(degenerate):
        names = [train.schema.feature_names[i] for i in np.flatnonzero(degenerate)]
        warnings.warn(f"zero-variance features {names}; scale set to 1", RuntimeWarning, stacklevel=2)
        scale = np.where(degenerate, 1.0, scale)

    f_edges = quartile_edges(fluid, "fluid") if fluid_edges is None else np.asarray(fluid_edges, float)
    v_edges = quartile_edges(vaso, "vaso") if vaso_edges is None else np.asarray(vaso_edges, float)
    _check_edges("fluid", f_edges)
    _check_edges("vaso", v_edges)

    Z = (X - shift) / scale
    result = kmeans(Z, s_count, seed, restarts=restarts, max_iter=max_iter, workers=workers)
    logger.info("k-means: S=%d inertia=%.6g iterations=%d", s_count, result.inertia, result.n_iter)

    config = {
        "s_count": s_count,
        "seed": seed,
        "restarts": restarts,
        "max_iter": max_iter,
        "edge_rule": "quartile" if fluid_edges is None and vaso_edges is None else "explicit",
    }
    return DiscretizationModel(
        feature_names=train.schema.feature_names,
        shift=shift,
        scale=scale,
        centroids=result.centroids,
        fluid_edges=f_edges,
        vaso_edges=v_edges,
        fluid_repr=_bin_medians(fluid, f_edges),
        vaso_repr=_bin_medians(vaso, v_edges),
        seed=seed,
        config=config,
        inertia=result.inertia,
    )


# ---------------------------------------------------------------------------
# application

def assign_state(m: DiscretizationModel, x) -> int:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m.dim,):
        raise DimensionMismatchError(f"expected a feature vector of length {m.dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInputError("feature vector contains non-finite values")
    z = m.transform(x)
    d = ((m.centroids - z) ** 2).sum(axis=1)
    return int(np.argmin(d))


def assign_states(m: DiscretizationModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.dim:
        raise DimensionMismatchError(f"expected (n, {m.dim}) features, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteInputError("feature matrix contains non-finite values")
    return nearest_centroid(m.transform(X), m.centroids)


def encode_action(m: DiscretizationModel, fluid: float, vaso: float) -> int:
    for name, dose in (("fluid", fluid), ("vaso", vaso)):
        if not np.isfinite(dose):
            raise NonFiniteDoseError(f"{name} dose is not finite: {dose}")
        if dose < 0:
            raise NegativeDoseError(f"{name} dose is negative: {dose}")
    return int(action_index(dose_bin(fluid, m.fluid_edges), dose_bin(vaso, m.vaso_edges)))


def encode_actions(m: DiscretizationModel, fluid, vaso) -> np.ndarray:
    fluid = np.asarray(fluid, dtype=np.float64)
    vaso = np.asarray(vaso, dtype=np.float64)
    if not (np.all(np.isfinite(fluid)) and np.all(np.isfinite(vaso))):
        raise NonFiniteDoseError("non-finite dose")
    if np.any(fluid < 0) or np.any(vaso < 0):
        raise NegativeDoseError("negative dose")
    return action_index(dose_bin(fluid, m.fluid_edges), dose_bin(vaso, m.vaso_edges)).astype(np.int64)


@dataclass(frozen=True, eq=False)
class DiscreteDataset:
    """Per-patient ``(state, action)`` sequences stored flat.

    Steps of trajectory ``i`` live at ``offsets[i]:offsets[i+1]``. The final
    step of each trajectory transitions into ``s_count`` (discharge) or
    ``s_count + 1`` (death). ``features``, ``fluid`` and ``vaso`` keep the raw
    per-step values when the dataset came from a cohort.
    """

    s_count: int
    patient_ids: tuple[str, ...]
    died: np.ndarray
    offsets: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    features: np.ndarray | None = None
    fluid: np.ndarray | None = None
    vaso: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.patient_ids)

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def n_steps(self) -> int:
        return int(self.offsets[-1])

    @property
    def terminal_targets(self) -> np.ndarray:
        return np.where(self.died, self.s_count + 1, self.s_count)

    @property
    def first_states(self) -> np.ndarray:
        return self.states[self.offsets[:-1]]

    @property
    def step_trajectory(self) -> np.ndarray:
        """Trajectory index of every flat step."""
        return np.repeat(np.arange(len(self)), self.lengths)

    def next_states(self) -> np.ndarray:
        """Successor of every step (absorbing index on each final step)."""
        nxt = np.empty_like(self.states)
        nxt[:-1] = self.states[1:]
        ends = self.offsets[1:] - 1
        nxt[ends] = self.terminal_targets
        return nxt

    def trajectory(self, i: int) -> tuple[np.ndarray, np.ndarray, bool]:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return self.states[lo:hi], self.actions[lo:hi], bool(self.died[i])

    def subset(self, indices) -> "DiscreteDataset":
        indices = np.asarray(indices, dtype=np.int64)
        lengths = self.lengths[indices]
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        take = np.concatenate(
            [np.arange(self.offsets[i], self.offsets[i + 1]) for i in indices]
        ) if len(indices) else np.zeros(0, dtype=np.int64)
        opt = lambda a: None if a is None else a[take]
        return DiscreteDataset(
            self.s_count,
            tuple(self.patient_ids[i] for i in indices),
            self.died[indices],
            offsets,
            self.states[take],
            self.actions[take],
            opt(self.features),
            opt(self.fluid),
            opt(self.vaso),
        )

    @classmethod
    def from_sequences(cls, s_count: int, sequences, died, patient_ids=None) -> "DiscreteDataset":
        """Build from a list of ``[(state, action), ...]`` sequences."""
        lengths = [len(seq) for seq in sequences]
        if any(n == 0 for n in lengths):
            raise ValueError("every sequence needs at least one step")
        flat = [pair for seq in sequences for pair in seq]
        states = np.array([p[0] for p in flat], dtype=np.int64)
        actions = np.array([p[1] for p in flat], dtype=np.int64)
        if patient_ids is None:
            patient_ids = tuple(str(i) for i in range(len(sequences)))
        return cls(
            s_count,
            tuple(patient_ids),
            np.asarray(died, dtype=bool),
            np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64),
            states,
            actions,
        )

    def equals(self, other: "DiscreteDataset") -> bool:
        return (
            self.s_count == other.s_count
            and self.patient_ids == other.patient_ids
            and np.array_equal(self.died, other.died)
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
        )


def discretize_cohort(m: DiscretizationModel, c: Cohort) -> DiscreteDataset:
    if c.schema.dim != m.dim:
        raise DimensionMismatchError(f"cohort has {c.schema.dim} features, model expects {m.dim}")
    trajs = c.trajectories
    if not trajs:
        return DiscreteDataset(m.s_count, (), np.zeros(0, bool), np.zeros(1, np.int64),
                               np.zeros(0, np.int64), np.zeros(0, np.int64))
    X, fluid, vaso = _stack_steps(trajs)
    lengths = np.array([len(t) for t in trajs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    try:
        states = assign_states(m, X)
        actions = encode_actions(m, fluid, vaso)
    except (NonFiniteInputError, NonFiniteDoseError, NegativeDoseError) as exc:
        # locate the offending patient for the message
        for t in trajs:
            try:
                assign_states(m, t.features)
                encode_actions(m, t.fluid, t.vaso)
            except type(exc) as inner:
                raise type(exc)(f"patient {t.patient_id!r}: {inner}") from None
        raise
    return DiscreteDataset(
        m.s_count,
        tuple(t.patient_id for t in trajs),
        np.array([t.died for t in trajs], dtype=bool),
        offsets,
        states.astype(np.int64),
        actions,
        X,
        fluid,
        vaso,
    )
