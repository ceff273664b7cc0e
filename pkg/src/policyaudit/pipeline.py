"""Pipeline stages with hash-stamped manifests.

Each stage reads named artifacts from the run directory, writes its own
outputs and then a ``<stage>.manifest.json`` that records the config
snapshot, the sha256 of every input and output, the seed(s) it used and the
package version. A stage is skipped ("up to date") when its manifest matches
the current config and inputs and all recorded outputs are intact.

Before a stage reads an upstream artifact, the artifact's hash is checked
against the upstream manifest; a mismatch means the file changed after it was
built and raises :class:`HashMismatchError`.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .cohort import cohort_mortality, load_cohort, save_cohort, split_cohort
from .config import config_hash, resolve_output_dir
from .discretize import DiscreteDataset, DiscretizationModel, discretize_cohort, fit_discretizer
from .errors import (
    HashMismatchError,
    MissingArtifactError,
    NoOverlapError,
    SingleClassTargetError,
)
from .insight import (
    ABSOLUTE_TOTAL_GAP,
    AI_RECOMMENDS_DRUG,
    AVERAGE_GAP,
    AXES,
    BEHAVIOR_GIVES_DRUG,
    compare_importances,
    dose_gap,
    permutation_importance,
)
from .mdp import estimate_mdp, load_mdp, save_mdp
from .ope import agreement_histogram, bootstrap_lower_bound
from .rollout import initial_distribution, validate_model
from .solver import Policy, behavior_policy, policy_value_model_based, solve_optimal, zero_drug_policy

logger = logging.getLogger(__name__)

STAGES = ("ingest", "discretize", "estimate", "solve", "evaluate", "simulate", "analyze")
OPE_TARGETS = ("optimal", "zero_drug", "clinician")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


# ---------------------------------------------------------------------------
# discrete dataset persistence (header line, then one line per patient)

def save_discrete(d: DiscreteDataset, path: Path) -> Path:
    with open(path, "w", newline="\n") as fh:
        fh.write(json.dumps({"kind": "discrete_dataset", "s_count": d.s_count}, sort_keys=True) + "\n")
        for i, pid in enumerate(d.patient_ids):
            s, a, died = d.trajectory(i)
            rec = {"patient_id": pid, "died": bool(died), "states": s.tolist(), "actions": a.tolist()}
            fh.write(json.dumps(rec, separators=(",", ":"), sort_keys=True) + "\n")
    return path


def load_discrete(path: Path) -> DiscreteDataset:
    with open(path) as fh:
        head = json.loads(fh.readline())
        recs = [json.loads(line) for line in fh if line.strip()]
    return DiscreteDataset.from_sequences(
        head["s_count"],
        [list(zip(r["states"], r["actions"])) for r in recs],
        [r["died"] for r in recs],
        [r["patient_id"] for r in recs],
    )


# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    stage: str
    status: str          # "done" or "up to date"
    outputs: tuple[str, ...]


class Run:
    """One run directory, stamped by the hash of the configuration."""

    def __init__(self, cfg: dict, base: Path, workers: int = 1, echo: Callable[[str], None] = print):
        self.cfg = cfg
        self.base = Path(base)
        self.workers = max(1, int(workers))
        self.echo = echo
        # the output location is not part of the snapshot, so moving a run
        # elsewhere leaves its artifacts byte-identical
        snap = dict(cfg, paths={"cohort": cfg["paths"]["cohort"]})
        self.snapshot = snap
        self.stamp = config_hash(snap)[:12]
        self.dir = resolve_output_dir(cfg, self.base) / f"run-{self.stamp}"
        self.provenance = {"config": snap, "config_hash": config_hash(snap), "version": __version__}

    # -- paths and manifests -------------------------------------------------
    @property
    def cohort_path(self) -> Path:
        p = Path(self.cfg["paths"]["cohort"])
        return p if p.is_absolute() else self.base / p

    def path(self, name: str) -> Path:
        return self.dir / name

    def manifest_path(self, stage: str) -> Path:
        return self.dir / f"{stage}.manifest.json"

    def read_manifest(self, stage: str) -> dict | None:
        p = self.manifest_path(stage)
        return json.loads(p.read_text()) if p.is_file() else None

    def _input_hashes(self, stage: str) -> dict[str, str]:
        """Hash every input, checking upstream artifacts against their manifests."""
        hashes = {}
        for name in STAGE_INPUTS[stage]:
            if name == "@cohort":
                p = self.cohort_path
                if not p.is_file():
                    raise MissingArtifactError(f"input cohort not found: {p}")
                hashes[name] = sha256_file(p)
                continue
            producer = PRODUCER[name]
            man = self.read_manifest(producer)
            p = self.path(name)
            if man is None or not p.is_file():
                raise MissingArtifactError(f"{name} missing; run the {producer!r} stage first ({self.dir})")
            digest = sha256_file(p)
            if man["outputs"].get(name) != digest:
                raise HashMismatchError(
                    f"{p} changed after the {producer!r} stage wrote it; rerun {producer!r}")
            hashes[name] = digest
        return hashes

    def _up_to_date(self, stage: str, inputs: dict[str, str]) -> bool:
        man = self.read_manifest(stage)
        if man is None or man.get("config") != self.snapshot or man.get("inputs") != inputs:
            return False
        if man.get("version") != __version__:
            return False
        for name, digest in man["outputs"].items():
            p = self.path(name)
            if not p.is_file() or sha256_file(p) != digest:
                return False
        return True

    def write_json(self, name: str, obj: dict, stage: str) -> Path:
        obj = dict(obj)
        obj["provenance"] = dict(self.provenance, stage=stage)
        p = self.path(name)
        p.write_text(_dump(obj))
        return p

    # -- running ---------------------------------------------------------------
    def run_stage(self, stage: str) -> StageResult:
        inputs = self._input_hashes(stage)
        if self._up_to_date(stage, inputs):
            self.echo(f"[{stage}] up to date")
            return StageResult(stage, "up to date", tuple(self.read_manifest(stage)["outputs"]))
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path(stage).unlink(missing_ok=True)
        outputs, seeds = STAGE_FUNCS[stage](self)
        manifest = {
            "stage": stage,
            "version": __version__,
            "config": self.snapshot,
            "seed": seeds,
            "inputs": inputs,
            "outputs": {name: sha256_file(self.path(name)) for name in outputs},
        }
        self.manifest_path(stage).write_text(_dump(manifest))
        self.echo(f"[{stage}] done: {', '.join(outputs)}")
        return StageResult(stage, "done", tuple(outputs))

    def run_all(self) -> list[StageResult]:
        return [self.run_stage(s) for s in STAGES]


# ---------------------------------------------------------------------------
# stages; each returns (output names, seeds used)

def _ingest(run: Run):
    cohort = load_cohort(run.cohort_path)
    sp = run.cfg["split"]
    train, test = split_cohort(cohort, sp["train_fraction"], sp["seed"])
    save_cohort(train, run.path("train.jsonl"))
    save_cohort(test, run.path("test.jsonl"))
    summary = {
        "n_patients": len(cohort.trajectories),
        "n_train": len(train.trajectories),
        "n_test": len(test.trajectories),
        "n_steps": cohort.n_steps,
        "mortality": cohort_mortality(cohort),
        "train_mortality": train.mortality,
        "test_mortality": test.mortality,
        "features": list(cohort.schema.feature_names),
    }
    run.write_json("cohort_summary.json", summary, "ingest")
    return ["train.jsonl", "test.jsonl", "cohort_summary.json"], {"split": sp["seed"]}


def _discretize(run: Run):
    dc = run.cfg["discretizer"]
    train = load_cohort(run.path("train.jsonl"))
    test = load_cohort(run.path("test.jsonl"), expected=train.schema)
    model = fit_discretizer(
        train, s_count=dc["s_count"], seed=dc["seed"], restarts=dc["restarts"], max_iter=dc["max_iter"],
        fluid_edges=dc["fluid_edges"], vaso_edges=dc["vaso_edges"], workers=run.workers)
    run.write_json("discretizer.json", model.to_json(), "discretize")
    save_discrete(discretize_cohort(model, train), run.path("train.discrete.jsonl"))
    save_discrete(discretize_cohort(model, test), run.path("test.discrete.jsonl"))
    return ["discretizer.json", "train.discrete.jsonl", "test.discrete.jsonl"], {"kmeans": dc["seed"]}


def _mdp_args(cfg: dict) -> dict:
    mc = cfg["mdp"]
    return {"reward_magnitude": float(mc["reward_magnitude"]), "gamma": float(mc["gamma"]),
            "prune_min_count": mc["prune_min_count"]}


def _estimate(run: Run):
    m = estimate_mdp(load_discrete(run.path("train.discrete.jsonl")), **_mdp_args(run.cfg))
    save_mdp(m, run.path("mdp.bin"), extra={"provenance": dict(run.provenance, stage="estimate")})
    return ["mdp.bin", "mdp.bin.json"], {}


def _solve(run: Run):
    m = load_mdp(run.path("mdp.bin"))
    source = sha256_file(run.path("mdp.bin"))
    sc = run.cfg["solver"]
    optimal, vf = solve_optimal(m, tol=sc["tol"], max_iter=sc["max_iter"])
    pb = behavior_policy(m)
    zero = zero_drug_policy(m.s_count, m.a_count)
    values = {"optimal": vf.v.tolist(), "value_iteration_sweeps": vf.iterations, "converged": vf.converged}
    for name, pol in (("optimal", optimal), ("behavior", pb), ("zero_drug", zero)):
        pol = replace(pol, source=source)
        run.write_json(f"policy_{name}.json", pol.to_json(), "solve")
        if name != "optimal":
            try:
                values[name] = policy_value_model_based(m, pol).v.tolist()
            except Exception as exc:  # zero-drug may leave the observed support
                values[name] = None
                values[f"{name}_error"] = f"{type(exc).__name__}: {exc}"
    run.write_json("values.json", values, "solve")
    outs = ["policy_optimal.json", "policy_behavior.json", "policy_zero_drug.json", "values.json"]
    return outs, {}


def _evaluate(run: Run):
    oc = run.cfg["ope"]
    mc = _mdp_args(run.cfg)
    train = load_discrete(run.path("train.discrete.jsonl"))
    test = load_discrete(run.path("test.discrete.jsonl"))
    optimal = Policy.load(run.path("policy_optimal.json"))
    # behavior policy for OPE comes from the evaluation data itself
    pb = behavior_policy(estimate_mdp(test, **mc))
    targets = {"optimal": optimal, "zero_drug": zero_drug_policy(test.s_count, pb.a_count), "clinician": pb}
    outs = []
    summary = {}
    for name, pe in targets.items():
        try:
            rep = bootstrap_lower_bound(
                test, pb, pe, mc["gamma"], resamples=oc["resamples"], confidence=oc["confidence"],
                seed=oc["seed"], reward_magnitude=mc["reward_magnitude"], weight_cap=oc["weight_cap"],
                workers=run.workers)
        except NoOverlapError as exc:
            obj = {"no_overlap": True, "point_estimate": None, "lower_bound": None, "reason": str(exc)}
        else:
            obj = dict(rep.to_json(), no_overlap=False)
            rep.save_weight_histogram(run.path(f"weights_{name}.csv"))
            outs.append(f"weights_{name}.csv")
        run.write_json(f"ope_{name}.json", obj, "evaluate")
        outs.append(f"ope_{name}.json")
        summary[name] = {k: obj[k] for k in ("point_estimate", "lower_bound", "no_overlap")}
    hist = agreement_histogram(train, optimal, run.cfg["analysis"]["agreement_threshold"])
    hist.save_csv(run.path("agreement.csv"))
    run.write_json("agreement.json", hist.to_json(), "evaluate")
    run.write_json("ope_summary.json", summary, "evaluate")
    outs += ["agreement.csv", "agreement.json", "ope_summary.json"]
    return outs, {"bootstrap": oc["seed"]}


def _simulate(run: Run):
    rc = run.cfg["rollout"]
    m = load_mdp(run.path("mdp.bin"))
    pb = Policy.load(run.path("policy_behavior.json"))
    train = load_discrete(run.path("train.discrete.jsonl"))
    init = initial_distribution(train, rc["initial_dist"])
    stats = validate_model(m, pb, init, batches=rc["batches"], batch_size=rc["batch_size"], seed=rc["seed"],
                           max_steps=rc["max_steps"], workers=run.workers)
    obj = stats.to_json()
    obj["empirical_mortality"] = float(np.mean(train.died))
    obj["empirical_length"] = float(np.mean(train.lengths))
    run.write_json("rollout.json", obj, "simulate")
    stats.save_batches_csv(run.path("rollout_batches.csv"))
    return ["rollout.json", "rollout_batches.csv"], {"rollout": rc["seed"]}


def _analyze(run: Run):
    ac = run.cfg["analysis"]
    model = DiscretizationModel.load(run.path("discretizer.json"))
    optimal = Policy.load(run.path("policy_optimal.json"))
    test = load_cohort(run.path("test.jsonl"))
    d = discretize_cohort(model, test)
    outs = []
    summary: dict = {"dose_gap": {}, "importance": {}}
    for axis in AXES:
        for mode in (AVERAGE_GAP, ABSOLUTE_TOTAL_GAP):
            curve = dose_gap(d, model, optimal, mode, axis, ac["gap_bin_edges"])
            name = f"gap_{axis}_{mode}.csv"
            curve.save_csv(run.path(name))
            outs.append(name)
            summary["dose_gap"][f"{axis}_{mode}"] = {"empty_bins": curve.empty_bins}
    names = test.schema.feature_names
    for axis in AXES:
        try:
            imps = [
                permutation_importance(d, target, axis, seed=ac["classifier_seed"], optimal=optimal,
                                       feature_names=names, n_repeats=ac["n_repeats"], workers=run.workers)
                for target in (BEHAVIOR_GIVES_DRUG, AI_RECOMMENDS_DRUG)
            ]
        except SingleClassTargetError as exc:
            summary["importance"][axis] = {"error": str(exc)}
            continue
        cmp = compare_importances(*imps)
        name = f"importance_{axis}.csv"
        cmp.save_csv(run.path(name))
        outs.append(name)
        summary["importance"][axis] = {
            "top_discrepancies": cmp.discrepancy_rank[:3],
            "baseline_accuracy_behavior": imps[0].baseline_accuracy,
            "baseline_accuracy_ai": imps[1].baseline_accuracy,
        }
    run.write_json("analysis.json", summary, "analyze")
    outs.append("analysis.json")
    return outs, {"classifier": ac["classifier_seed"]}


STAGE_FUNCS = {
    "ingest": _ingest,
    "discretize": _discretize,
    "estimate": _estimate,
    "solve": _solve,
    "evaluate": _evaluate,
    "simulate": _simulate,
    "analyze": _analyze,
}

STAGE_INPUTS = {
    "ingest": ("@cohort",),
    "discretize": ("train.jsonl", "test.jsonl"),
    "estimate": ("train.discrete.jsonl",),
    "solve": ("mdp.bin", "mdp.bin.json"),
    "evaluate": ("train.discrete.jsonl", "test.discrete.jsonl", "policy_optimal.json"),
    "simulate": ("mdp.bin", "mdp.bin.json", "policy_behavior.json", "train.discrete.jsonl"),
    "analyze": ("test.jsonl", "discretizer.json", "policy_optimal.json"),
}

PRODUCER = {
    "train.jsonl": "ingest",
    "test.jsonl": "ingest",
    "discretizer.json": "discretize",
    "train.discrete.jsonl": "discretize",
    "test.discrete.jsonl": "discretize",
    "mdp.bin": "estimate",
    "mdp.bin.json": "estimate",
    "policy_optimal.json": "solve",
    "policy_behavior.json": "solve",
}
