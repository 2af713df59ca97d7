"""Stable neural dynamic policies: mixtures of contracting linear systems
weighted by a neural network, trained by imitation, with machine-checkable
convergence certificates."""

from .core import (ElementaryDS, MaterializedPolicy, PolicyParams,
                   StabilityCertificate, lyapunov_rate, lyapunov_value,
                   policy_eval, reconstruct_A, reconstruct_L,
                   verify_certificate)
from .data import (Dataset, Trajectory, compute_attractor, estimate_velocities,
                   load_dataset, load_trajectories, save_dataset,
                   save_trajectories)
from .evaluation import EvalReport, multitask_eval, reproduction_error
from .rollout import (ObservationProvider, PerturbationEvent, RolloutRecord,
                      convergence_stats, integrate, vector_field_grid)
from .state import StateVector
from .training import (Checkpoint, TrainConfig, imitation_loss,
                       load_checkpoint, save_checkpoint, train)
from .weightnet import ConvFrontEnd, WeightNetParams, init_weight_net, weight_forward

__version__ = "0.1.0"

__all__ = [
    "StateVector", "ElementaryDS", "PolicyParams", "StabilityCertificate",
    "MaterializedPolicy", "reconstruct_L", "reconstruct_A", "policy_eval",
    "lyapunov_value", "lyapunov_rate", "verify_certificate",
    "WeightNetParams", "ConvFrontEnd", "init_weight_net", "weight_forward",
    "Trajectory", "Dataset", "load_trajectories", "save_trajectories",
    "load_dataset", "save_dataset", "estimate_velocities", "compute_attractor",
    "TrainConfig", "Checkpoint", "imitation_loss", "train",
    "save_checkpoint", "load_checkpoint",
    "ObservationProvider", "PerturbationEvent", "RolloutRecord",
    "integrate", "convergence_stats", "vector_field_grid",
    "EvalReport", "reproduction_error", "multitask_eval",
    "__version__",
]
