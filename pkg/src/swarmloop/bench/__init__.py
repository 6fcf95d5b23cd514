from .ate import compute_ate
from .io import (
    load_graph,
    load_trajectory,
    save_graph,
    save_trajectory,
)
from .runner import ExperimentConfig, run_experiment, sparsification_sweep

__all__ = [
    "compute_ate",
    "load_graph",
    "load_trajectory",
    "save_graph",
    "save_trajectory",
    "ExperimentConfig",
    "run_experiment",
    "sparsification_sweep",
]
