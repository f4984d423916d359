"""Classical fixed-step ODE solvers with a learned additive compensation term."""

from .data import (
    InitSampler,
    TrajectoryDataset,
    default_sampler,
    generate_dataset,
    inject_noise,
    prefix_subset,
    read_dataset,
    write_dataset,
)
from .errors import (
    ActivationSingularityError,
    AttSolverError,
    BadMagicError,
    ConfigurationError,
    ContractViolation,
    FileFormatError,
    SingularMatrixError,
    SingularStateError,
    TruncatedFileError,
    VersionMismatchError,
)
from .nn import AttentionModule, RationalActivation, init_module, load_module, save_module
from .solvers import Scheme, StepMode, Trajectory, integration_term, observed_order, rollout, rollout_batch, step
from .systems import OdeSystem, elastic_pendulum, harmonic_oscillator, klink, make_system, spring_mass
from .training import ModelConfig, TrainConfig, TrainReport, compute_loss, fit, train_epoch, update_parameters

__version__ = "0.1.0"

__all__ = [
    "ActivationSingularityError", "AttSolverError", "AttentionModule", "BadMagicError", "ConfigurationError",
    "ContractViolation", "FileFormatError", "InitSampler", "ModelConfig", "OdeSystem", "RationalActivation",
    "Scheme", "SingularMatrixError", "SingularStateError", "StepMode", "TrainConfig", "TrainReport",
    "Trajectory", "TrajectoryDataset", "TruncatedFileError", "VersionMismatchError", "compute_loss",
    "default_sampler", "elastic_pendulum", "fit", "generate_dataset", "harmonic_oscillator",
    "init_module", "inject_noise", "integration_term", "klink", "load_module", "make_system",
    "observed_order", "prefix_subset", "read_dataset", "rollout", "rollout_batch", "save_module",
    "spring_mass", "step", "train_epoch", "update_parameters", "write_dataset",
]
