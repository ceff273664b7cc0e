"""Pipeline configuration: one JSON document, validated, with dotted overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any

from .errors import ConfigError

OUTPUT_DIR_ENV = "POLICYAUDIT_OUTPUT_DIR"

DEFAULTS: dict[str, dict[str, Any]] = {
    "paths": {"cohort": "cohort.jsonl", "output_dir": None},
    "split": {"train_fraction": 0.8, "seed": 0},
    "discretizer": {
        "s_count": 750,
        "seed": 0,
        "restarts": 32,
        "max_iter": 300,
        "fluid_edges": None,
        "vaso_edges": None,
    },
    "mdp": {"reward_magnitude": 100.0, "gamma": 0.99, "prune_min_count": 5},
    "solver": {"tol": 1e-8, "max_iter": 100_000},
    "ope": {"resamples": 2000, "confidence": 0.95, "seed": 0, "weight_cap": None},
    "rollout": {"batches": 1000, "batch_size": 2500, "max_steps": 200, "initial_dist": "empirical", "seed": 0},
    "analysis": {"gap_bin_edges": None, "classifier_seed": 0, "agreement_threshold": 0.05, "n_repeats": 10},
    "synth": {"s_count": 20, "n": 5000, "seed": 0, "sample_seed": 1, "world": {}},
}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _edges(v) -> bool:
    return v is None or (isinstance(v, list) and len(v) == 4 and all(_is_num(x) and x > 0 for x in v)
                         and all(a < b for a, b in zip(v, v[1:])))


# (section, key) -> (predicate, description)
RULES = {
    ("paths", "cohort"): (lambda v: isinstance(v, str) and v, "non-empty path"),
    ("paths", "output_dir"): (lambda v: v is None or (isinstance(v, str) and v), "path or null"),
    ("split", "train_fraction"): (lambda v: _is_num(v) and 0 < v < 1, "number in (0, 1)"),
    ("split", "seed"): (_is_int, "integer"),
    ("discretizer", "s_count"): (lambda v: _is_int(v) and v >= 2, "integer >= 2"),
    ("discretizer", "seed"): (_is_int, "integer"),
    ("discretizer", "restarts"): (lambda v: _is_int(v) and v >= 1, "integer >= 1"),
    ("discretizer", "max_iter"): (lambda v: _is_int(v) and v >= 1, "integer >= 1"),
    ("discretizer", "fluid_edges"): (_edges, "null or 4 ascending positive numbers"),
    ("discretizer", "vaso_edges"): (_edges, "null or 4 ascending positive numbers"),
    ("mdp", "reward_magnitude"): (lambda v: _is_num(v) and v > 0, "positive number"),
    ("mdp", "gamma"): (lambda v: _is_num(v) and 0 < v <= 1, "number in (0, 1]"),
    ("mdp", "prune_min_count"): (lambda v: _is_int(v) and v >= 1, "integer >= 1"),
    ("solver", "tol"): (lambda v: _is_num(v) and v > 0, "positive number"),
    ("solver", "max_iter"): (lambda v: _is_int(v) and v >= 1, "integer >= 1"),
    ("ope", "resamples"): (lambda v: _is_int(v) and v >= 100, "integer >= 100"),
    ("ope", "confidence"): (lambda v: _is_num(v) and 0 < v < 1, "number in (0, 1)"),
    ("ope", "seed"): (_is_int, "integer"),
    ("ope", "weight_cap"): (lambda v: v is None or (_is_num(v) and v > 0), "null or positive number"),
    ("rollout", "batches"): (lambda v: _is_int(v) and v >= 1, "integer >= 1"),
    ("rollout", "batch_size"): (lambda v: _is_int(v) and v >= 1, "integer >= 1"),
    ("rollout", "max_steps"): (lambda v: _is_int(v) and v >= 1, "integer >= 1"),
    ("rollout", "initial_dist"): (lambda v: v in ("empirical", "uniform"), "'empirical' or 'uniform'"),
    ("rollout", "seed"): (_is_int, "integer"),
    ("analysis", "gap_bin_edges"): (
        lambda v: v is None or (isinstance(v, list) and len(v) >= 2 and all(_is_num(x) for x in v)),
        "null or list of numbers"),
    ("analysis", "classifier_seed"): (_is_int, "integer"),
    ("analysis", "agreement_threshold"): (lambda v: _is_num(v) and 0 <= v < 1, "number in [0, 1)"),
    ("analysis", "n_repeats"): (lambda v: _is_int(v) and v >= 1, "integer >= 1"),
    ("synth", "s_count"): (lambda v: _is_int(v) and v >= 2, "integer >= 2"),
    ("synth", "n"): (lambda v: _is_int(v) and v >= 1, "integer >= 1"),
    ("synth", "seed"): (_is_int, "integer"),
    ("synth", "sample_seed"): (_is_int, "integer"),
    ("synth", "world"): (lambda v: isinstance(v, dict), "object"),
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like section.key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"override key {key!r} must be section.key")
    section, name = parts
    if section not in DEFAULTS or name not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key {key!r}")
    cfg.setdefault(section, {})[name] = _parse_value(value)


def validate(cfg: dict) -> dict:
    unknown_sections = set(cfg) - set(DEFAULTS)
    if unknown_sections:
        raise ConfigError(f"unknown config sections {sorted(unknown_sections)}")
    merged = copy.deepcopy(DEFAULTS)
    for section, values in cfg.items():
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be an object")
        unknown = set(values) - set(DEFAULTS[section])
        if unknown:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
        merged[section].update(values)
    for (section, key), (check, desc) in RULES.items():
        if not check(merged[section][key]):
            raise ConfigError(f"{section}.{key} must be {desc}, got {merged[section][key]!r}")
    return merged


def load_config(path: str | Path, overrides=()) -> tuple[dict, Path]:
    """Return the validated config and the directory relative paths resolve against."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for item in overrides:
        apply_override(raw, item)
    return validate(raw), path.resolve().parent


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def resolve_output_dir(cfg: dict, base: Path) -> Path:
    out = cfg["paths"]["output_dir"] or os.environ.get(OUTPUT_DIR_ENV) or "runs"
    out = Path(out)
    return out if out.is_absolute() else base / out
