import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _util import cohort, ground_truth, schema, tiny_cohort
from policyaudit.cohort import (
    Cohort,
    Outcome,
    Trajectory,
    cohort_mortality,
    dumps_cohort,
    load_cohort,
    make_trajectory,
    save_cohort,
    save_cohort_csv,
    split_cohort,
)
from policyaudit.errors import (
    EmptyCohortError,
    MalformedRecordError,
    MissingFileError,
    NonMonotoneTimeError,
    SchemaMismatchError,
    TooFewTrajectoriesError,
)
from policyaudit.synth import make_ground_truth, sample_cohort


def write_lines(path, lines):
    path.write_text("".join(json.dumps(x) + "\n" for x in lines))
    return path


HEADER = {"feature_names": ["hr", "map"], "units": ["bpm", "mmHg"], "interval_hours": 4.0}


def rec(pid, times, outcome="Survived90"):
    return {"patient_id": pid, "outcome": outcome,
            "steps": [{"t": t, "x": [1.0, 2.0], "fluid": 0.0, "vaso": 0.0} for t in times]}


# -- load ----------------------------------------------------------------------

def test_empty_file_gives_empty_cohort_with_undefined_mortality(tmp_path):
    c = load_cohort(write_lines(tmp_path / "c.jsonl", [HEADER]))
    assert len(c) == 0
    assert c.mortality is None
    with pytest.raises(EmptyCohortError):
        cohort_mortality(c)


def test_non_monotone_time_names_patient(tmp_path):
    p = write_lines(tmp_path / "c.jsonl", [HEADER, rec("ok", [0, 1, 2]), rec("bad-7", [0, 1, 3])])
    with pytest.raises(NonMonotoneTimeError) as exc:
        load_cohort(p)
    assert "bad-7" in str(exc.value)


def test_missing_file(tmp_path):
    with pytest.raises(MissingFileError):
        load_cohort(tmp_path / "nope.jsonl")


def test_malformed_json_reports_line(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps(HEADER) + "\n" + json.dumps(rec("a", [0])) + "\n{not json\n")
    with pytest.raises(MalformedRecordError) as exc:
        load_cohort(p)
    assert exc.value.line == 3


@pytest.mark.parametrize("mutate, err", [
    (lambda r: r["steps"][0].update(x=[1.0]), SchemaMismatchError),
    (lambda r: r["steps"][0].update(fluid=-1.0), MalformedRecordError),
    (lambda r: r.update(outcome="Maybe"), MalformedRecordError),
    (lambda r: r.pop("steps"), MalformedRecordError),
    (lambda r: r.update(steps=[]), MalformedRecordError),
])
def test_invalid_records_rejected(tmp_path, mutate, err):
    r = rec("a", [0, 1])
    mutate(r)
    with pytest.raises(err):
        load_cohort(write_lines(tmp_path / "c.jsonl", [HEADER, r]))


def test_duplicate_patient_rejected(tmp_path):
    with pytest.raises(MalformedRecordError):
        load_cohort(write_lines(tmp_path / "c.jsonl", [HEADER, rec("a", [0]), rec("a", [0])]))


def test_expected_schema_mismatch(tmp_path):
    p = write_lines(tmp_path / "c.jsonl", [HEADER, rec("a", [0])])
    with pytest.raises(SchemaMismatchError):
        load_cohort(p, expected=schema(3))


def test_synth_roundtrip_is_byte_identical(tmp_path):
    g = make_ground_truth(20, seed=0)
    c = sample_cohort(g, 1000, seed=1).cohort
    p = save_cohort(c, tmp_path / "c.jsonl")
    raw = p.read_bytes()
    back = load_cohort(p)
    assert back.trajectories == c.trajectories
    assert dumps_cohort(back).encode() == raw
    save_cohort(back, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == raw


def test_csv_roundtrip(tmp_path):
    c = sample_cohort(make_ground_truth(5, seed=2), 50, seed=3).cohort
    back = load_cohort(save_cohort_csv(c, tmp_path / "c.csv"))
    assert back.schema == c.schema
    assert back.trajectories == c.trajectories


def test_trajectory_is_immutable():
    t = make_trajectory("a", "Died90", [0, 1], [[1, 2], [3, 4]], [0, 1], [0, 0])
    with pytest.raises(ValueError):
        t.features[0, 0] = 9
    assert Trajectory.from_steps("a", Outcome.DIED, t.steps) == t


# -- mortality -----------------------------------------------------------------

def test_mortality_quarter():
    assert cohort_mortality(tiny_cohort(4, died={2})) == 0.25


def test_mortality_all_survived():
    assert cohort_mortality(tiny_cohort(5)) == 0.0


def test_mortality_matches_planted_absorption():
    p, n = 0.225, 100_000
    trans = np.zeros((1, 25, 3))
    trans[0, :, 1] = 1 - p
    trans[0, :, 2] = p
    c = sample_cohort(ground_truth(trans), n, seed=11).cohort
    assert abs(cohort_mortality(c) - p) < 3 * math.sqrt(p * (1 - p) / n)


# -- split ---------------------------------------------------------------------

def test_split_sizes_and_determinism():
    c = tiny_cohort(10)
    tr, te = split_cohort(c, 0.8, seed=7)
    assert (len(tr), len(te)) == (8, 2)
    tr2, te2 = split_cohort(c, 0.8, seed=7)
    assert tr.trajectories == tr2.trajectories and te.trajectories == te2.trajectories


def test_split_different_seeds_change_membership():
    c = tiny_cohort(50)
    ids = {frozenset(t.patient_id for t in split_cohort(c, 0.8, seed=s)[1].trajectories) for s in range(5)}
    assert len(ids) > 1
    assert all(len(x) == 10 for x in ids)


def test_split_large_is_partition():
    c = Cohort(schema(1), tuple(
        Trajectory(f"p{i}", Outcome.SURVIVED, np.zeros(1, np.int64), np.zeros((1, 1)), np.zeros(1), np.zeros(1))
        for i in range(100_000)))
    tr, te = split_cohort(c, 0.8, seed=0)
    a = {t.patient_id for t in tr.trajectories}
    b = {t.patient_id for t in te.trajectories}
    assert not a & b
    assert a | b == {t.patient_id for t in c.trajectories}
    assert len(a) == 80_000


def test_split_needs_two():
    with pytest.raises(TooFewTrajectoriesError):
        split_cohort(tiny_cohort(1), 0.5, seed=0)


@given(n=st.integers(2, 300), f=st.floats(0.01, 0.99), seed=st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_split_property(n, f, seed):
    c = tiny_cohort(n)
    tr, te = split_cohort(c, f, seed)
    assert len(tr) == math.floor(n * f + 0.5)
    assert len(tr) + len(te) == n
    assert {t.patient_id for t in tr.trajectories}.isdisjoint(t.patient_id for t in te.trajectories)


finite = st.floats(-1e6, 1e6, allow_nan=False)
dose = st.floats(0, 1e4, allow_nan=False)


@st.composite
def trajectories(draw, dim=2):
    T = draw(st.integers(1, 6))
    return make_trajectory(
        draw(st.text("abcxyz0123", min_size=1, max_size=8)),
        draw(st.sampled_from(["Died90", "Survived90"])),
        np.arange(T) + draw(st.integers(0, 5)),
        draw(st.lists(st.lists(finite, min_size=dim, max_size=dim), min_size=T, max_size=T)),
        draw(st.lists(dose, min_size=T, max_size=T)),
        draw(st.lists(dose, min_size=T, max_size=T)),
    )


@given(st.lists(trajectories(), max_size=5, unique_by=lambda t: t.patient_id))
@settings(max_examples=50, deadline=None)
def test_jsonl_roundtrip_property(tmp_path_factory, trajs):
    c = Cohort(schema(2), tuple(trajs))
    p = save_cohort(c, tmp_path_factory.mktemp("rt") / "c.jsonl")
    assert load_cohort(p).trajectories == c.trajectories
