"""Trajectory data model, file I/O and cohort splitting.

JSON-Lines layout (primary format)::

    {"feature_names": [...], "units": [...], "dim": d, "interval_hours": 4.0}
    {"patient_id": "p1", "outcome": "Died90", "steps": [{"t": 0, "x": [...], "fluid": 0.0, "vaso": 0.0}, ...]}
    ...

CSV long layout (secondary): an optional first line ``#schema {json header}``
followed by a header row ``patient_id,outcome,t,fluid,vaso,<feature columns...>``
and one row per (patient, timestep).
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import (
    EmptyCohortError,
    MalformedRecordError,
    MissingFileError,
    NonMonotoneTimeError,
    SchemaMismatchError,
    TooFewTrajectoriesError,
)

DEFAULT_INTERVAL_HOURS = 4.0
CSV_FIXED_COLUMNS = ("patient_id", "outcome", "t", "fluid", "vaso")


class Outcome(str, enum.Enum):
    SURVIVED = "Survived90"
    DIED = "Died90"


@dataclass(frozen=True)
class Schema:
    feature_names: tuple[str, ...]
    units: tuple[str, ...]
    interval_hours: float = DEFAULT_INTERVAL_HOURS

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "units", tuple(self.units))
        if len(self.units) != len(self.feature_names):
            raise SchemaMismatchError(
                f"{len(self.feature_names)} feature names but {len(self.units)} units"
            )
        if len(set(self.feature_names)) != len(self.feature_names):
            raise SchemaMismatchError("duplicate feature names")
        if not (self.interval_hours > 0 and math.isfinite(self.interval_hours)):
            raise SchemaMismatchError(f"interval_hours must be positive, got {self.interval_hours}")

    @property
    def dim(self) -> int:
        return len(self.feature_names)

    def to_json(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "units": list(self.units),
            "dim": self.dim,
            "interval_hours": float(self.interval_hours),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Schema":
        try:
            names = obj["feature_names"]
            units = obj.get("units", [""] * len(names))
            dim = obj.get("dim", len(names))
            interval = float(obj.get("interval_hours", DEFAULT_INTERVAL_HOURS))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaMismatchError(f"bad schema header: {exc}") from None
        if dim != len(names):
            raise SchemaMismatchError(f"declared dim {dim} but {len(names)} feature names")
        return cls(tuple(names), tuple(units), interval)


class Timestep(NamedTuple):
    time_index: int
    features: np.ndarray
    fluid_dose: float
    vaso_dose: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One patient: per-step arrays plus the 90-day outcome.

    ``features`` is ``(T, d)``; ``time``, ``fluid`` and ``vaso`` are length ``T``.
    """

    patient_id: str
    outcome: Outcome
    time: np.ndarray
    features: np.ndarray
    fluid: np.ndarray
    vaso: np.ndarray

    def __post_init__(self):
        for name in ("time", "features", "fluid", "vaso"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.time)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.outcome == other.outcome
            and np.array_equal(self.time, other.time)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.fluid, other.fluid)
            and np.array_equal(self.vaso, other.vaso)
        )

    __hash__ = None

    @property
    def died(self) -> bool:
        return self.outcome is Outcome.DIED

    @property
    def steps(self) -> list[Timestep]:
        return [
            Timestep(int(t), x, float(f), float(v))
            for t, x, f, v in zip(self.time, self.features, self.fluid, self.vaso)
        ]

    @classmethod
    def from_steps(cls, patient_id: str, outcome: Outcome | str, steps: Sequence[Timestep]) -> "Trajectory":
        return make_trajectory(
            patient_id,
            outcome,
            [s.time_index for s in steps],
            [s.features for s in steps],
            [s.fluid_dose for s in steps],
            [s.vaso_dose for s in steps],
        )


def make_trajectory(patient_id, outcome, time, features, fluid, vaso, dim: int | None = None) -> Trajectory:
    """Build a validated :class:`Trajectory` from array-likes.

    Raises ``ValueError`` describing the first problem found; callers that know
    the line number re-raise it as :class:`MalformedRecordError`.
    """
    if not isinstance(patient_id, str) or not patient_id:
        raise ValueError("patient_id must be a non-empty string")
    try:
        outcome = Outcome(outcome)
    except ValueError:
        raise ValueError(f"outcome must be one of {[o.value for o in Outcome]}, got {outcome!r}") from None
    time = np.asarray(time, dtype=np.int64)
    fluid = np.asarray(fluid, dtype=np.float64)
    vaso = np.asarray(vaso, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if time.ndim != 1 or len(time) == 0:
        raise ValueError("trajectory must contain at least one step")
    if features.ndim == 1 and len(time) == 1:
        features = features[None, :]
    if features.ndim != 2 or features.shape[0] != len(time):
        raise ValueError("feature rows must match step count")
    if dim is not None and features.shape[1] != dim:
        raise SchemaMismatchError(
            f"patient {patient_id!r}: feature vector of length {features.shape[1]}, schema declares {dim}"
        )
    if fluid.shape != time.shape or vaso.shape != time.shape:
        raise ValueError("dose arrays must match step count")
    if not np.all(np.isfinite(features)):
        raise ValueError("non-finite feature value")
    for name, dose in (("fluid", fluid), ("vaso", vaso)):
        if not np.all(np.isfinite(dose)):
            raise ValueError(f"non-finite {name} dose")
        if np.any(dose < 0):
            raise ValueError(f"negative {name} dose")
    if time[0] < 0:
        raise NonMonotoneTimeError(patient_id, "negative time_index")
    if len(time) > 1 and np.any(np.diff(time) != 1):
        raise NonMonotoneTimeError(patient_id, f"got {time.tolist()[:10]}")
    return Trajectory(patient_id, outcome, time, features, fluid, vaso)


@dataclass(frozen=True)
class Cohort:
    schema: Schema
    trajectories: tuple[Trajectory, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        seen = set()
        for traj in self.trajectories:
            if traj.patient_id in seen:
                raise ValueError(f"duplicate patient_id {traj.patient_id!r}")
            seen.add(traj.patient_id)
            if traj.features.shape[1] != self.schema.dim:
                raise SchemaMismatchError(
                    f"patient {traj.patient_id!r} has {traj.features.shape[1]} features, schema declares {self.schema.dim}"
                )

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    @property
    def mortality(self) -> float | None:
        """Empirical 90-day mortality, or ``None`` for an empty cohort."""
        if not self.trajectories:
            return None
        return cohort_mortality(self)

    @property
    def n_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def subset(self, indices: Iterable[int]) -> "Cohort":
        return Cohort(self.schema, tuple(self.trajectories[i] for i in indices))


def cohort_mortality(c: Cohort) -> float:
    if len(c) == 0:
        raise EmptyCohortError("mortality is undefined for an empty cohort")
    died = sum(1 for t in c.trajectories if t.outcome is Outcome.DIED)
    return died / len(c)


def split_cohort(c: Cohort, train_fraction: float, seed: int) -> tuple[Cohort, Cohort]:
    """Random patient-level split; both halves keep file order."""
    n = len(c)
    if n < 2:
        raise TooFewTrajectoriesError(f"need at least 2 trajectories to split, got {n}")
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = int(math.floor(n * train_fraction + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return c.subset(train_idx.tolist()), c.subset(test_idx.tolist())


# ---------------------------------------------------------------------------
# JSON-Lines

def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def trajectory_to_json(traj: Trajectory) -> dict:
    return {
        "patient_id": traj.patient_id,
        "outcome": traj.outcome.value,
        "steps": [
            {"t": int(t), "x": x.tolist(), "fluid": float(f), "vaso": float(v)}
            for t, x, f, v in zip(traj.time, traj.features, traj.fluid, traj.vaso)
        ],
    }


def dumps_cohort(c: Cohort) -> str:
    buf = io.StringIO()
    buf.write(_dumps(c.schema.to_json()) + "\n")
    for traj in c.trajectories:
        buf.write(_dumps(trajectory_to_json(traj)) + "\n")
    return buf.getvalue()


def save_cohort(c: Cohort, path: str | Path) -> Path:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return save_cohort_csv(c, path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(c.schema.to_json()) + "\n")
        for traj in c.trajectories:
            fh.write(_dumps(trajectory_to_json(traj)) + "\n")
    return path


def _parse_record(obj, dim: int, lineno: int) -> Trajectory:
    if not isinstance(obj, dict):
        raise MalformedRecordError(lineno, "record is not a JSON object")
    missing = {"patient_id", "outcome", "steps"} - obj.keys()
    if missing:
        raise MalformedRecordError(lineno, f"missing keys {sorted(missing)}")
    steps = obj["steps"]
    if not isinstance(steps, list) or not steps:
        raise MalformedRecordError(lineno, "steps must be a non-empty list")
    try:
        time = [s["t"] for s in steps]
        feats = [s["x"] for s in steps]
        fluid = [s["fluid"] for s in steps]
        vaso = [s["vaso"] for s in steps]
    except (KeyError, TypeError) as exc:
        raise MalformedRecordError(lineno, f"bad step entry: {exc}") from None
    if any(not isinstance(x, list) or len(x) != dim for x in feats):
        bad = next(len(x) if isinstance(x, list) else None for x in feats if not isinstance(x, list) or len(x) != dim)
        raise SchemaMismatchError(
            f"line {lineno}: patient {obj['patient_id']!r} has a feature vector of length {bad}, schema declares {dim}"
        )
    if any(not isinstance(t, int) or isinstance(t, bool) for t in time):
        raise MalformedRecordError(lineno, "time index must be an integer")
    try:
        return make_trajectory(obj["patient_id"], obj["outcome"], time, feats, fluid, vaso, dim=dim)
    except (NonMonotoneTimeError, SchemaMismatchError):
        raise
    except (ValueError, TypeError) as exc:
        raise MalformedRecordError(lineno, str(exc)) from None


def iter_jsonl(path: str | Path) -> tuple[Schema, Iterator[Trajectory]]:
    """Open a JSONL cohort and return its schema plus a lazy trajectory stream."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such cohort file: {path}")
    fh = open(path, "r", encoding="utf-8")
    header_line = fh.readline()
    if not header_line.strip():
        fh.close()
        raise MalformedRecordError(1, "missing schema header")
    try:
        schema = Schema.from_json(json.loads(header_line))
    except json.JSONDecodeError as exc:
        fh.close()
        raise MalformedRecordError(1, f"invalid JSON: {exc.msg}") from None

    def records():
        with fh:
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MalformedRecordError(lineno, f"invalid JSON: {exc.msg}") from None
                yield _parse_record(obj, schema.dim, lineno)

    return schema, records()


def load_cohort(path: str | Path, schema_check: bool = True, expected: Schema | None = None) -> Cohort:
    """Load and validate a cohort file (``.jsonl`` or ``.csv``).

    With ``schema_check`` and an ``expected`` schema, the file header must match
    it (names, units and dimension).
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such cohort file: {path}")
    if path.suffix.lower() == ".csv":
        schema, trajs = _read_csv(path)
    else:
        schema, stream = iter_jsonl(path)
        trajs = []
        seen: set[str] = set()
        for traj in stream:
            if traj.patient_id in seen:
                raise MalformedRecordError(0, f"duplicate patient_id {traj.patient_id!r}")
            seen.add(traj.patient_id)
            trajs.append(traj)
    if schema_check and expected is not None:
        if schema.dim != expected.dim:
            raise SchemaMismatchError(f"file declares dim {schema.dim}, expected {expected.dim}")
        if schema.feature_names != expected.feature_names or schema.units != expected.units:
            raise SchemaMismatchError("feature names/units differ from the expected schema")
    return Cohort(schema, tuple(trajs))


# ---------------------------------------------------------------------------
# CSV long format

def save_cohort_csv(c: Cohort, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("#schema " + _dumps(c.schema.to_json()) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(CSV_FIXED_COLUMNS) + list(c.schema.feature_names))
        for traj in c.trajectories:
            for t, x, f, v in zip(traj.time, traj.features, traj.fluid, traj.vaso):
                writer.writerow(
                    [traj.patient_id, traj.outcome.value, int(t), repr(float(f)), repr(float(v))]
                    + [repr(float(val)) for val in x]
                )
    return path


def _read_csv(path: Path) -> tuple[Schema, list[Trajectory]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        first = fh.readline()
        header_obj = None
        offset = 1
        if first.startswith("#schema"):
            try:
                header_obj = json.loads(first[len("#schema"):])
            except json.JSONDecodeError as exc:
                raise MalformedRecordError(1, f"invalid schema comment: {exc.msg}") from None
            offset = 2
        else:
            fh.seek(0)
        reader = csv.reader(fh)
        try:
            columns = next(reader)
        except StopIteration:
            raise MalformedRecordError(offset, "missing CSV header row") from None
        if tuple(columns[:5]) != CSV_FIXED_COLUMNS:
            raise MalformedRecordError(offset, f"CSV must start with columns {list(CSV_FIXED_COLUMNS)}")
        feature_cols = columns[5:]
        if header_obj is None:
            schema = Schema(tuple(feature_cols), tuple("" for _ in feature_cols))
        else:
            schema = Schema.from_json(header_obj)
            if tuple(feature_cols) != schema.feature_names:
                raise SchemaMismatchError("CSV feature columns differ from the #schema header")

        groups: dict[str, dict] = {}
        for lineno, row in enumerate(reader, start=offset + 1):
            if not row:
                continue
            if len(row) != len(columns):
                raise SchemaMismatchError(
                    f"line {lineno}: {len(row) - 5} feature values, schema declares {schema.dim}"
                )
            pid, outcome = row[0], row[1]
            try:
                t = int(row[2])
                vals = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise MalformedRecordError(lineno, str(exc)) from None
            g = groups.get(pid)
            if g is None:
                g = groups[pid] = {"outcome": outcome, "t": [], "x": [], "f": [], "v": [], "line": lineno}
            elif g["outcome"] != outcome:
                raise MalformedRecordError(lineno, f"patient {pid!r} has inconsistent outcomes")
            g["t"].append(t)
            g["f"].append(vals[0])
            g["v"].append(vals[1])
            g["x"].append(vals[2:])

    trajs = []
    for pid, g in groups.items():
        try:
            trajs.append(make_trajectory(pid, g["outcome"], g["t"], g["x"], g["f"], g["v"], dim=schema.dim))
        except (NonMonotoneTimeError, SchemaMismatchError):
            raise
        except ValueError as exc:
            raise MalformedRecordError(g["line"], str(exc)) from None
    return schema, trajs
