"""Command line entry point.

Exit status: 0 success, 1 configuration error, 2 missing artifact,
3 artifact hash mismatch, 4 any other audit error raised by a stage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .cohort import save_cohort, save_cohort_csv
from .config import load_config
from .errors import AuditError, ConfigError, InvalidConfigError, MissingArtifactError
from .mdp import format_row, load_mdp
from .pipeline import STAGES, Run, _dump, sha256_file
from .solver import Policy, policy_diff
from .synth import SynthConfig, make_ground_truth, sample_cohort

log = logging.getLogger("policyaudit")


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("config", help="pipeline configuration (JSON)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. --set mdp.gamma=0.95 (repeatable)")
    p.add_argument("--workers", type=int, default=1, help="cap on parallel workers (default 1)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="policyaudit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parent = _config_parent()

    for stage in STAGES:
        sub.add_parser(stage, parents=[parent], help=f"run the {stage} stage")
    sub.add_parser("pipeline", parents=[parent], help="run every stage in order")

    ope = sub.add_parser("ope", help="off-policy evaluation")
    ope_sub = ope.add_subparsers(dest="ope_command", required=True)
    ope_sub.add_parser("evaluate", parents=[parent], help="same as the evaluate stage")

    synth = sub.add_parser("synth", help="synthetic ground-truth worlds")
    synth_sub = synth.add_subparsers(dest="synth_command", required=True)
    synth_sub.add_parser("generate", parents=[parent],
                         help="write a synthetic cohort to paths.cohort plus its ground truth")

    mdp = sub.add_parser("mdp", help="inspect an estimated MDP")
    mdp_sub = mdp.add_subparsers(dest="mdp_command", required=True)
    insp = mdp_sub.add_parser("inspect", help="print transition rows as text")
    insp.add_argument("path", help="mdp.bin or a run directory containing it")
    insp.add_argument("--state", type=int, required=True)
    insp.add_argument("--action", type=int, default=None, help="omit to list every observed action")

    pol = sub.add_parser("policy", help="policy utilities")
    pol_sub = pol.add_subparsers(dest="policy_command", required=True)
    diff = pol_sub.add_parser("diff", help="per-state disagreement between two policies")
    diff.add_argument("a")
    diff.add_argument("b")
    return parser


def _load(args):
    return load_config(args.config, args.overrides)


def cmd_stage(args, stage: str | None) -> int:
    cfg, base = _load(args)
    run = Run(cfg, base, workers=args.workers)
    print(f"run directory: {run.dir}")
    if stage is None:
        run.run_all()
    else:
        run.run_stage(stage)
    return 0


def cmd_synth_generate(args) -> int:
    cfg, base = _load(args)
    sc = cfg["synth"]
    try:
        world = SynthConfig.from_dict(sc["world"])
        g = make_ground_truth(sc["s_count"], seed=sc["seed"], config=world)
    except (InvalidConfigError, TypeError, ValueError) as exc:
        raise ConfigError(f"synth.world: {exc}") from None
    out = Path(cfg["paths"]["cohort"])
    out = out if out.is_absolute() else base / out
    stem = out.with_suffix("")
    truth_path = Path(f"{stem}.truth.json")
    planted_path = Path(f"{stem}.planted.jsonl")
    manifest_path = Path(f"{stem}.manifest.json")
    snapshot = {"synth": sc, "version": __version__}
    if manifest_path.is_file():
        man = json.loads(manifest_path.read_text())
        paths = {p.name: p for p in (out, truth_path, planted_path)}
        if man.get("inputs") == snapshot and all(
                p.is_file() and sha256_file(p) == man["outputs"].get(name) for name, p in paths.items()):
            print(f"[synth] up to date: {out}")
            return 0
    out.parent.mkdir(parents=True, exist_ok=True)
    sampled = sample_cohort(g, sc["n"], sc["sample_seed"])
    if out.suffix.lower() == ".csv":
        save_cohort_csv(sampled.cohort, out)
    else:
        save_cohort(sampled.cohort, out)
    g.save(truth_path)
    sampled.save_sidecar(planted_path)
    manifest = {
        "stage": "synth",
        "inputs": snapshot,
        "seed": {"world": sc["seed"], "sample": sc["sample_seed"]},
        "outputs": {p.name: sha256_file(p) for p in (out, truth_path, planted_path)},
    }
    manifest_path.write_text(_dump(manifest))
    print(f"[synth] done: {out} ({sc['n']} trajectories, mortality {sampled.cohort.mortality:.4f})")
    return 0


def cmd_mdp_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        path = path / "mdp.bin"
    if not path.is_file() or not path.with_name(path.name + ".json").is_file():
        raise MissingArtifactError(f"no MDP at {path}")
    m = load_mdp(path)
    if args.action is not None:
        print(format_row(m, args.state, args.action))
        return 0
    if not 0 <= args.state < m.s_count:
        print(f"state {args.state} outside 0..{m.s_count - 1}", file=sys.stderr)
        return 1
    observed = [a for a in range(m.a_count) if m.sa_counts[args.state, a] > 0]
    if not observed:
        print(f"state {args.state}: no observed actions")
    for a in observed:
        print(format_row(m, args.state, a))
    return 0


def cmd_policy_diff(args) -> int:
    for p in (args.a, args.b):
        if not Path(p).is_file():
            raise MissingArtifactError(f"no policy at {p}")
    a, b = Policy.load(args.a), Policy.load(args.b)
    rows = policy_diff(a, b)
    print("state\taction_a\taction_b\ttv_distance")
    for r in rows:
        print(f"{r['state']}\t{r['action_a']}\t{r['action_b']}\t{r['tv_distance']:.6f}")
    n_diff = sum(r["action_a"] != r["action_b"] for r in rows)
    print(f"# {n_diff}/{a.s_count} states recommend different actions")
    return 0


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in STAGES:
            return cmd_stage(args, args.command)
        if args.command == "pipeline":
            return cmd_stage(args, None)
        if args.command == "ope":
            return cmd_stage(args, "evaluate")
        if args.command == "synth":
            return cmd_synth_generate(args)
        if args.command == "mdp":
            return cmd_mdp_inspect(args)
        if args.command == "policy":
            return cmd_policy_diff(args)
    except AuditError as exc:
        code = getattr(exc, "exit_code", 4)
        print(f"error: {exc}", file=sys.stderr)
        return code
    return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
