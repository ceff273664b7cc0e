"""Offline-RL policy learning and auditing on fixed-interval ICU trajectories."""

__version__ = "0.1.0"

from .cohort import Cohort, Outcome, Schema, Trajectory, cohort_mortality, load_cohort, save_cohort, split_cohort
from .discretize import DiscreteDataset, DiscretizationModel, discretize_cohort, fit_discretizer
from .mdp import TabularMdp, estimate_mdp, load_mdp, save_mdp
from .ope import agreement_histogram, bootstrap_lower_bound, wis_evaluate
from .rollout import initial_distribution, simulate_trajectory, validate_model
from .solver import Policy, behavior_policy, policy_value_model_based, solve_optimal, zero_drug_policy
from .synth import GroundTruth, SynthConfig, make_ground_truth, sample_cohort

__all__ = [
    "Cohort", "Outcome", "Schema", "Trajectory", "cohort_mortality", "load_cohort", "save_cohort",
    "split_cohort", "DiscreteDataset", "DiscretizationModel", "discretize_cohort", "fit_discretizer",
    "TabularMdp", "estimate_mdp", "load_mdp", "save_mdp", "agreement_histogram", "bootstrap_lower_bound",
    "wis_evaluate", "initial_distribution", "simulate_trajectory", "validate_model", "Policy",
    "behavior_policy", "policy_value_model_based", "solve_optimal", "zero_drug_policy", "GroundTruth",
    "SynthConfig", "make_ground_truth", "sample_cohort",
]
