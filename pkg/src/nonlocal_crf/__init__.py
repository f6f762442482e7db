"""Marginal inference and learning for chain CRFs with non-local energies."""
from .chain import ChainModel, MarginalVector, layout_size, validate_marginals
from .oracle import bethe_entropy, log_partition, map_decode, marginals
from .energies import (
    EnergySpec, LinearMeasurement, MeanFieldEnergy, MeasurementEnergy, PoissonEnergy, PrototypeEnergy,
    QuadraticEnergy, ZeroEnergy, check_gradient,
)
from .inference import AugmentedProblem, SolverConfig, SolverError, map_predict, solve
from .exact import solve_augmented_exact
from .learning import Dataset, Example, LearnerConfig, Model, evaluate, predict, train
from .benchmarks import ConfigError, run_experiment

__version__ = "0.1.0"

__all__ = [
    "AugmentedProblem", "ChainModel", "ConfigError", "Dataset", "EnergySpec", "Example", "LearnerConfig",
    "LinearMeasurement", "MarginalVector", "MeanFieldEnergy", "MeasurementEnergy", "Model", "PoissonEnergy",
    "PrototypeEnergy", "QuadraticEnergy", "SolverConfig", "SolverError", "ZeroEnergy", "bethe_entropy",
    "check_gradient", "evaluate", "layout_size", "log_partition", "map_decode", "map_predict", "marginals",
    "predict", "run_experiment", "solve", "solve_augmented_exact", "train", "validate_marginals",
]
