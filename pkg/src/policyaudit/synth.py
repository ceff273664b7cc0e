"""A synthetic world with known dynamics, used to check every estimator.

The world is a random sparse absorbing MDP over ``S`` states and ``A``
actions, a full-support behavior policy, and a Gaussian feature emission
around well separated per-state means. Cohorts sampled from it carry their
planted state/action sequences so recovery can be scored exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._sampling import DIED, TRUNCATED, ChainSimulator
from .cohort import Cohort, Outcome, Schema, Trajectory
from .discretize import N_ACTIONS, DiscreteDataset, action_bins
from .errors import InvalidConfigError, SingularSystemError
from .mdp import DEFAULT_REWARD, TabularMdp
from .solver import STOCHASTIC, Policy


@dataclass(frozen=True)
class SynthConfig:
    branching: int = 3
    transition_concentration: float = 1.0
    absorb_rate: float = 0.07
    death_bias: float = 0.25
    death_concentration: float = 8.0
    behavior_concentration: float = 1.0
    behavior_uniform_mix: float = 0.05
    initial_concentration: float = 2.0
    feature_dim: int = 6
    noise_scale: float = 1.0
    mean_spacing: float = 8.0
    reward_magnitude: float = DEFAULT_REWARD
    fluid_edges: tuple[float, ...] = (100.0, 300.0, 800.0, 2000.0)
    vaso_edges: tuple[float, ...] = (0.05, 0.15, 0.4, 1.0)
    fluid_doses: tuple[float, ...] = (0.0, 50.0, 200.0, 500.0, 1200.0)
    vaso_doses: tuple[float, ...] = (0.0, 0.03, 0.1, 0.25, 0.6)

    @classmethod
    def from_dict(cls, obj: dict | None) -> "SynthConfig":
        obj = dict(obj or {})
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise InvalidConfigError(f"unknown synth config keys {sorted(unknown)}")
        for key in ("fluid_edges", "vaso_edges", "fluid_doses", "vaso_doses"):
            if key in obj:
                obj[key] = tuple(float(v) for v in obj[key])
        return cls(**obj)

    def validate(self, s_count: int) -> None:
        if self.branching < 1:
            raise InvalidConfigError("branching must be at least 1")
        if not 0 < self.absorb_rate <= 1:
            raise InvalidConfigError("absorb_rate must be in (0, 1]")
        if not 0 <= self.death_bias <= 1:
            raise InvalidConfigError("death_bias must be in [0, 1]")
        if min(self.transition_concentration, self.death_concentration,
               self.behavior_concentration, self.initial_concentration) <= 0:
            raise InvalidConfigError("concentrations must be positive")
        if not 0 < self.behavior_uniform_mix <= 1:
            raise InvalidConfigError("behavior_uniform_mix must be in (0, 1] for full support")
        if self.noise_scale < 0 or self.mean_spacing <= 0:
            raise InvalidConfigError("noise_scale must be >= 0 and mean_spacing > 0")
        if self.mean_spacing < 4 * self.noise_scale:
            raise InvalidConfigError("emission means must be at least 4 noise scales apart")
        if len(self.fluid_doses) != 5 or len(self.vaso_doses) != 5:
            raise InvalidConfigError("need 5 representative doses per drug")
        for name in ("fluid", "vaso"):
            edges = np.asarray(getattr(self, f"{name}_edges"))
            doses = np.asarray(getattr(self, f"{name}_doses"))
            if len(edges) != 4 or np.any(np.diff(edges) <= 0) or edges[0] <= 0:
                raise InvalidConfigError(f"{name}_edges must be 4 ascending positive values")
            if doses[0] != 0:
                raise InvalidConfigError(f"{name}_doses[0] must be 0")
            upper = np.concatenate([edges[:3], [np.inf]])
            lower = np.concatenate([[0.0], edges[:3]])
            d = doses[1:]
            if not (d[0] > 0 and np.all(d >= lower) and np.all(d < upper)):
                raise InvalidConfigError(f"{name}_doses must fall inside their bins")
        if self.feature_dim < 1:
            raise InvalidConfigError("feature_dim must be positive")


@dataclass(eq=False)
class GroundTruth:
    trans: np.ndarray            # (S, A, S+2), exact probabilities
    behavior: Policy
    initial: np.ndarray          # (S,)
    emission_means: np.ndarray   # (S, d)
    noise_scale: float
    seed: int
    config: SynthConfig = field(default_factory=SynthConfig)

    @property
    def s_count(self) -> int:
        return self.trans.shape[0]

    @property
    def a_count(self) -> int:
        return self.trans.shape[1]

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f"x{j}" for j in range(self.emission_means.shape[1]))

    def schema(self) -> Schema:
        return Schema(self.feature_names, tuple("a.u." for _ in self.feature_names))

    def as_mdp(self, gamma: float = 0.99) -> TabularMdp:
        return TabularMdp.from_probabilities(self.trans, self.config.reward_magnitude, gamma)

    def to_json(self) -> dict:
        return {
            "kind": "ground_truth",
            "seed": self.seed,
            "config": asdict(self.config),
            "trans": self.trans.tolist(),
            "behavior": self.behavior.table.tolist(),
            "initial": self.initial.tolist(),
            "emission_means": self.emission_means.tolist(),
            "noise_scale": self.noise_scale,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        trans = np.asarray(obj["trans"], dtype=np.float64)
        return cls(
            trans,
            Policy(STOCHASTIC, np.asarray(obj["behavior"]), trans.shape[1]),
            np.asarray(obj["initial"], dtype=np.float64),
            np.asarray(obj["emission_means"], dtype=np.float64),
            float(obj["noise_scale"]),
            int(obj["seed"]),
            SynthConfig.from_dict(obj["config"]),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        return cls.from_json(json.loads(Path(path).read_text()))


def _normalize_rows(w: np.ndarray) -> np.ndarray:
    """Divide by row sums and push the rounding residue onto each row's
    largest entry, so rows sum to 1 as closely as floating point allows."""
    p = w / w.sum(axis=-1, keepdims=True)
    flat = p.reshape(-1, p.shape[-1])
    resid = 1.0 - flat.sum(axis=1)
    top = np.argmax(flat, axis=1)
    flat[np.arange(len(flat)), top] += resid
    return flat.reshape(p.shape)


def _beta(rng, mean, conc, size):
    if mean <= 0:
        return np.zeros(size)
    if mean >= 1:
        return np.ones(size)
    return rng.beta(mean * conc, (1 - mean) * conc, size)


def _emission_means(rng, s_count, dim, spacing):
    side = spacing * max(2.0, s_count ** (1.0 / dim)) * 2.0
    means: list[np.ndarray] = []
    tries = 0
    while len(means) < s_count:
        cand = rng.uniform(0.0, side, dim)
        if all(np.linalg.norm(cand - m) >= spacing for m in means):
            means.append(cand)
        tries += 1
        if tries > 200 * s_count:
            side *= 1.5
            tries = 0
    return np.array(means)


def make_ground_truth(s_count: int = 20, a_count: int = N_ACTIONS, seed: int = 0,
                      config: SynthConfig | dict | None = None) -> GroundTruth:
    if s_count < 2 or a_count < 2:
        raise InvalidConfigError("need s_count >= 2 and a_count >= 2")
    cfg = config if isinstance(config, SynthConfig) else SynthConfig.from_dict(config)
    cfg.validate(s_count)
    rng = np.random.default_rng(seed)
    S, A = s_count, a_count
    k = min(cfg.branching, S)

    trans = np.zeros((S, A, S + 2))
    absorb = np.clip(cfg.absorb_rate * rng.uniform(0.5, 1.5, (S, A)), 0.0, 1.0)
    death_share = _beta(rng, cfg.death_bias, cfg.death_concentration, (S, A))
    for s in range(S):
        for a in range(A):
            targets = rng.choice(S, size=k, replace=False)
            w = rng.gamma(cfg.transition_concentration, 1.0, k)
            trans[s, a, targets] = (1.0 - absorb[s, a]) * w / w.sum()
    trans[:, :, S] = absorb * (1.0 - death_share)
    trans[:, :, S + 1] = absorb * death_share
    trans = _normalize_rows(trans)

    dirichlet = rng.gamma(cfg.behavior_concentration, 1.0, (S, A))
    dirichlet /= dirichlet.sum(axis=1, keepdims=True)
    behavior = _normalize_rows((1 - cfg.behavior_uniform_mix) * dirichlet + cfg.behavior_uniform_mix / A)

    init = _normalize_rows(rng.gamma(cfg.initial_concentration, 1.0, S))
    means = _emission_means(rng, S, cfg.feature_dim, cfg.mean_spacing)
    return GroundTruth(trans, Policy(STOCHASTIC, behavior, A), init, means, cfg.noise_scale, seed, cfg)


@dataclass(eq=False)
class SampledCohort:
    cohort: Cohort
    planted: DiscreteDataset

    def save_sidecar(self, path: str | Path) -> Path:
        """Planted sequences as JSON lines ``{patient_id, states, actions}``."""
        path = Path(path)
        p = self.planted
        with open(path, "w", newline="\n") as fh:
            for i, pid in enumerate(p.patient_ids):
                s, a, _ = p.trajectory(i)
                fh.write(json.dumps({"patient_id": pid, "states": s.tolist(), "actions": a.tolist()},
                                    separators=(",", ":")) + "\n")
        return path


def sample_cohort(g: GroundTruth, n: int, seed: int, policy: Policy | None = None,
                  max_steps: int = 100_000) -> SampledCohort:
    """Sample ``n`` trajectories under the behavior policy (or ``policy``)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if g.a_count != N_ACTIONS:
        raise InvalidConfigError("dose emission needs the 25-action grid")
    pol = g.behavior if policy is None else policy
    rng = np.random.default_rng(seed)
    starts = rng.choice(g.s_count, size=n, p=g.initial)
    outcome, length, (traj, states, actions) = ChainSimulator(g.trans, pol.probs()).run(
        starts, max_steps, rng, record=True)
    if np.any(outcome == TRUNCATED):
        raise RuntimeError("synthetic trajectory failed to absorb; raise max_steps")
    died = outcome == DIED
    features = g.emission_means[states]
    if g.noise_scale > 0:
        features = features + g.noise_scale * rng.standard_normal(features.shape)
    fb, vb = action_bins(actions)
    fluid = np.asarray(g.config.fluid_doses)[fb]
    vaso = np.asarray(g.config.vaso_doses)[vb]

    offsets = np.concatenate([[0], np.cumsum(length)]).astype(np.int64)
    width = len(str(n - 1))
    ids = tuple(f"p{i:0{width}d}" for i in range(n))
    trajs = []
    for i in range(n):
        lo, hi = offsets[i], offsets[i + 1]
        trajs.append(Trajectory(
            ids[i],
            Outcome.DIED if died[i] else Outcome.SURVIVED,
            np.arange(hi - lo, dtype=np.int64),
            features[lo:hi],
            fluid[lo:hi],
            vaso[lo:hi],
        ))
    planted = DiscreteDataset(g.s_count, ids, died, offsets, states, actions, features, fluid, vaso)
    return SampledCohort(Cohort(g.schema(), tuple(trajs)), planted)


# ---------------------------------------------------------------------------
# analytic oracles

def _induced_chain(g: GroundTruth, p: Policy):
    pi = p.probs()
    if pi.shape != (g.s_count, g.a_count):
        raise ValueError("policy does not match the ground truth dimensions")
    P = np.einsum("sa,sat->st", pi, g.trans)
    return P[:, :g.s_count], P[:, g.s_count], P[:, g.s_count + 1]


def analytic_policy_value(g: GroundTruth, p: Policy, gamma: float) -> np.ndarray:
    """Exact state values of ``p`` on the true dynamics by a direct linear solve."""
    Q, to_discharge, to_death = _induced_chain(g, p)
    R = g.config.reward_magnitude
    r = R * (to_discharge - to_death)
    lhs = np.eye(g.s_count) - gamma * Q
    try:
        v = np.linalg.solve(lhs, r)
    except np.linalg.LinAlgError:
        raise SingularSystemError("policy-evaluation system is singular (chain does not absorb)") from None
    if not np.all(np.isfinite(v)) or np.linalg.cond(lhs) > 1e12:
        raise SingularSystemError("policy-evaluation system is numerically singular")
    return v


def analytic_policy_return(g: GroundTruth, p: Policy, gamma: float) -> float:
    """Expected discounted return from the ground-truth start distribution."""
    return float(g.initial @ analytic_policy_value(g, p, gamma))


def absorption_probabilities(g: GroundTruth, p: Policy) -> np.ndarray:
    """``(S, 2)`` probabilities of ending in discharge / death, via the fundamental matrix."""
    Q, to_discharge, to_death = _induced_chain(g, p)
    N = np.linalg.inv(np.eye(g.s_count) - Q)
    return N @ np.column_stack([to_discharge, to_death])


def expected_absorption_time(g: GroundTruth, p: Policy) -> np.ndarray:
    """Expected number of steps to absorption from each state."""
    Q, _, _ = _induced_chain(g, p)
    return np.linalg.solve(np.eye(g.s_count) - Q, np.ones(g.s_count))
