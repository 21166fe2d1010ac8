"""Constraint energy minimizing multiscale DG solver with residual-driven online enrichment."""
from .grid import GridConfig, build_grid
from .medium import PartitionOfUnity, compute_kappa_tilde, generate_field, load_field
from .assembly import assemble_forms, norms
from .offline import build_auxiliary_space, build_offline_space, solve_coarse
from .online import AdaptiveConfig, run_adaptive
from .driver import ExperimentConfig, run_experiment

__version__ = "0.1.0"

__all__ = [
    "GridConfig", "build_grid", "PartitionOfUnity", "compute_kappa_tilde", "generate_field",
    "load_field", "assemble_forms", "norms", "build_auxiliary_space", "build_offline_space",
    "solve_coarse", "AdaptiveConfig", "run_adaptive", "ExperimentConfig", "run_experiment",
]
