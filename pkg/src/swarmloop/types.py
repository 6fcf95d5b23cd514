"""Shared record types passed between the front-end, graph and swarm layers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Optional

import numpy as np

from .se3 import Pose


@dataclass(frozen=True)
class Keyframe:
    """One selected pose along a robot trajectory.

    ``odom_pose`` is the (possibly drifting) metric odometry estimate;
    ``descriptor`` is a unit-norm place descriptor; ``handle`` is an opaque
    token the registration oracle resolves (stands in for the raw frame).
    """

    robot: int
    index: int
    odom_pose: Pose
    descriptor: Optional[np.ndarray] = None
    handle: Any = None

    @property
    def key(self):
        return (self.robot, self.index)


@dataclass(frozen=True)
class RegistrationResult:
    """Up-to-scale relative pose plus the correspondence counts behind it."""

    rotation: np.ndarray          # 3x3, measured relative rotation
    translation: np.ndarray       # 3-vector, direction with arbitrary scale
    loop_correspondences: int
    odom_correspondences: int     # denominator of the confidence ratio
    odom_metric_translation: Optional[np.ndarray] = None  # known odometry step
    odom_oracle_translation: Optional[np.ndarray] = None  # same step, oracle frame

    def __post_init__(self):
        if self.loop_correspondences < 0:
            raise ValueError("loop correspondence count must be >= 0")
        if self.odom_correspondences <= 0:
            raise ValueError("odometry-pair correspondence count must be > 0")


@dataclass
class LoopClosure:
    """Accepted inter-robot loop closure, ready for graph construction."""

    from_robot: int
    from_index: int
    to_robot: int
    to_index: int
    rotation: np.ndarray          # measured relative rotation
    direction: np.ndarray         # measured translation, up to scale
    loop_correspondences: int
    odom_correspondences: int
    ratio: float
    confidence: float
    scale_init: float = 1.0       # s0 used to initialize the scale variable
    cluster_id: int = -1

    @property
    def from_key(self):
        return (self.from_robot, self.from_index)

    @property
    def to_key(self):
        return (self.to_robot, self.to_index)

    @property
    def robot_pair(self):
        return (min(self.from_robot, self.to_robot), max(self.from_robot, self.to_robot))

    def measurement(self) -> Pose:
        """Metric-scaled measurement using the current scale_init."""
        return Pose(self.rotation, self.scale_init * self.direction)

    def copy(self, **changes) -> "LoopClosure":
        return replace(self, **changes)
