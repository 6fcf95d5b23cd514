"""Decentralized multi-robot loop closing with scale-aware pose graph
optimization: SE(3) math, factor graphs, LM/GNC solvers, a loop-closure
front-end with confidence weighting, a swarm simulator and a benchmark CLI.
"""

from . import frontend, graph, optimize, se3, swarm, world
from .se3 import Pose
from .types import Keyframe, LoopClosure, RegistrationResult

__all__ = [
    "frontend",
    "graph",
    "optimize",
    "se3",
    "swarm",
    "world",
    "Pose",
    "Keyframe",
    "LoopClosure",
    "RegistrationResult",
]

__version__ = "0.1.0"
