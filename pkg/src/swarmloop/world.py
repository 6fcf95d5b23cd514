"""Synthetic multi-robot worlds for simulation and benchmarking.

Robots travel along straight lines through a common crossing region, so
every robot pair overlaps once.  Place descriptors are random Fourier
features of ground-truth position: cosine similarity decays like an RBF
kernel of inter-keyframe distance, which gives realistic nearest-neighbor
place recognition without any model inference.

Each robot pair carries one hidden translation scale (log-uniform in a
configurable range) applied by the registration oracle; loops from one
crossing form one cluster, so hidden scales are per-cluster by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import se3
from .frontend import OracleNoise, SyntheticRegistrationOracle, make_descriptor
from .se3 import Pose
from .types import Keyframe


@dataclass
class WorldConfig:
    n_robots: int = 3
    n_keyframes: int = 110             # base trajectory steps per robot
    keyframe_spacing: float = 1.0      # m between consecutive base steps
    keyframe_stride: int = 1           # keep every n-th step (sparsification);
                                       # the physical path stays the same
    lateral_offset: float = 0.4        # m, per-robot sideways shift at the crossing
    descriptor_dim: int = 512
    descriptor_length_scale: float = 2.0
    descriptor_noise: float = 0.02
    odom_sigma_rot: float = 0.0        # per-step odometry drift, rad
    odom_sigma_trans: float = 0.0      # per-step odometry drift, m
    scale_range: tuple = (0.2, 5.0)    # hidden per-pair scales, log-uniform
    fixed_scale: Optional[float] = None  # overrides scale_range when set
    oracle_noise: OracleNoise = field(default_factory=OracleNoise)
    shared_odom_scale: bool = True
    seed: int = 0


class SyntheticWorld:
    """Ground-truth trajectories, odometry, descriptors and hidden scales."""

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        root = np.random.SeedSequence(cfg.seed)
        traj_ss, desc_ss, scale_ss, odom_ss, oracle_ss = root.spawn(5)
        self._oracle_seed = oracle_ss.generate_state(1)[0]

        self.true_poses: Dict[int, List[Pose]] = {}
        self._build_trajectories(np.random.default_rng(traj_ss))
        self._build_scales(np.random.default_rng(scale_ss))
        self._build_odometry(np.random.default_rng(odom_ss))
        self._build_descriptors(np.random.default_rng(desc_ss))

    # -- construction -------------------------------------------------------

    def _build_trajectories(self, rng):
        cfg = self.cfg
        n = cfg.n_keyframes
        half = (n - 1) / 2.0
        for r in range(cfg.n_robots):
            theta = 2.0 * np.pi * r / cfg.n_robots + 0.35
            u = np.array([np.cos(theta), np.sin(theta), 0.0])
            perp = np.array([-np.sin(theta), np.cos(theta), 0.0])
            offset = cfg.lateral_offset * (r - (cfg.n_robots - 1) / 2.0)
            poses = []
            for step in range(0, n, cfg.keyframe_stride):
                s = (step - half) * cfg.keyframe_spacing
                p = s * u + offset * perp
                p[2] = 0.15 * np.sin(0.05 * step + r)
                yaw = theta + 0.1 * np.sin(step / 7.0 + r)
                R = se3.so3_exp(np.array([0.0, 0.0, yaw]))
                poses.append(Pose(R, p))
            self.true_poses[r] = poses

    def _build_scales(self, rng):
        cfg = self.cfg
        lo, hi = cfg.scale_range
        self.pair_scales: Dict[tuple, float] = {}
        for a in range(cfg.n_robots):
            for b in range(a + 1, cfg.n_robots):
                if cfg.fixed_scale is not None:
                    s = float(cfg.fixed_scale)
                else:
                    s = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
                self.pair_scales[(a, b)] = s

    def _build_odometry(self, rng):
        """Noisy relative odometry measurements and their integration."""
        cfg = self.cfg
        self.odom_measurements: Dict[int, List[Pose]] = {}
        self.odom_poses: Dict[int, List[Pose]] = {}
        for r in range(cfg.n_robots):
            truth = self.true_poses[r]
            meas, integrated = [], [truth[0]]
            for i in range(1, len(truth)):
                rel = se3.between(truth[i - 1], truth[i])
                if cfg.odom_sigma_rot > 0 or cfg.odom_sigma_trans > 0:
                    xi = np.concatenate([
                        rng.normal(0, cfg.odom_sigma_rot, 3),
                        rng.normal(0, cfg.odom_sigma_trans, 3),
                    ])
                    rel = rel.compose(se3.exp(xi))
                meas.append(rel)
                integrated.append(integrated[-1].compose(rel))
            self.odom_measurements[r] = meas
            self.odom_poses[r] = integrated

    def _build_descriptors(self, rng):
        cfg = self.cfg
        dim = cfg.descriptor_dim
        W = rng.standard_normal((dim, 3)) / cfg.descriptor_length_scale
        b = rng.uniform(0.0, 2.0 * np.pi, dim)
        self.descriptors: Dict[int, List[np.ndarray]] = {}
        for r in range(cfg.n_robots):
            descs = []
            for pose in self.true_poses[r]:
                feat = np.cos(W @ pose.t + b)
                feat = feat + cfg.descriptor_noise * rng.standard_normal(dim)
                descs.append(make_descriptor(feat))
            self.descriptors[r] = descs

    # -- oracle interface ----------------------------------------------------

    def true_pose(self, robot: int, index: int) -> Pose:
        return self.true_poses[robot][index]

    def scale_for_pair(self, ra: int, ia: int, rb: int, ib: int) -> float:
        if ra == rb:
            return self.scale_for_odom(ra, ia)
        return self.pair_scales[(min(ra, rb), max(ra, rb))]

    def scale_for_odom(self, robot: int, index: int) -> float:
        # independent odometry-pair scale: geometric mean of the robot's pairs
        scales = [s for (a, b), s in self.pair_scales.items() if robot in (a, b)]
        return float(np.exp(np.mean(np.log(scales)))) if scales else 1.0

    def odom_step_translation(self, robot: int, index: int) -> np.ndarray:
        return self.odom_measurements[robot][index - 1].t

    # -- keyframes -----------------------------------------------------------

    def keyframe(self, robot: int, index: int) -> Keyframe:
        return Keyframe(
            robot=robot,
            index=index,
            odom_pose=self.odom_poses[robot][index],
            descriptor=self.descriptors[robot][index],
            handle=(robot, index),
        )

    def keyframes(self, robot: int) -> List[Keyframe]:
        return [self.keyframe(robot, i) for i in range(len(self.true_poses[robot]))]

    def make_oracle(self, noise: OracleNoise = None) -> SyntheticRegistrationOracle:
        return SyntheticRegistrationOracle(
            self,
            noise if noise is not None else self.cfg.oracle_noise,
            seed=int(self._oracle_seed),
            shared_odom_scale=self.cfg.shared_odom_scale,
        )
