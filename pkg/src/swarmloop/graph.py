"""Factor-graph data model: variables, factors, residuals and Jacobians.

Pose residuals use the tangent-space Mahalanobis interpretation of the
matrix-difference cost: for measurement Z and prediction B = T_from^{-1} T_to,

    r = log(Z^{-1} B),    cost = r^T (p * Omega) r

Jacobians are exact at every linearization point (not only at zero error):
the first-order forms H_to = I and H_from = -Adj(B^{-1}) are pre-multiplied
by the inverse right Jacobian of log at r.  Likewise the scale Jacobian of a
scaled loop factor carries the full chain through log; the zero-error limit
reduces to [0; -R_bar^T t_bar].
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import se3
from .se3 import Pose
from .types import Keyframe, LoopClosure


class GraphBuildError(Exception):
    pass


class Formulation(enum.Enum):
    BASE = "base"
    INDEPENDENT_SCALES = "independent_scales"
    SMOOTHED_SCALES = "smoothed_scales"
    SHARED_SCALE = "shared_scale"


_KIND_ORDER = {"pose": 0, "scale": 1}


@dataclass(frozen=True, order=False)
class VariableKey:
    kind: str   # "pose" | "scale"
    robot: int
    index: int

    def __post_init__(self):
        if self.kind not in _KIND_ORDER:
            raise ValueError(f"unknown variable kind {self.kind!r}")

    def sort_key(self):
        return (self.robot, _KIND_ORDER[self.kind], self.index)

    def __lt__(self, other):
        return self.sort_key() < other.sort_key()

    def dim(self) -> int:
        return 6 if self.kind == "pose" else 1

    def __repr__(self):
        return f"{self.kind[0]}{self.robot}:{self.index}"


def pose_key(robot: int, index: int) -> VariableKey:
    return VariableKey("pose", robot, index)


def scale_key(robot: int, index: int) -> VariableKey:
    return VariableKey("scale", robot, index)


# ---------------------------------------------------------------------------
# factors


@dataclass(frozen=True)
class PriorFactor:
    key: VariableKey
    value: Pose
    info: np.ndarray  # 6x6

    def keys(self):
        return (self.key,)


@dataclass(frozen=True)
class OdometryFactor:
    from_key: VariableKey
    to_key: VariableKey
    measurement: Pose
    info: np.ndarray  # 6x6

    def __post_init__(self):
        if self.from_key.robot != self.to_key.robot:
            raise GraphBuildError("odometry factor must stay on one robot")
        if self.to_key.index != self.from_key.index + 1:
            raise GraphBuildError("odometry factor must link consecutive keyframes")

    def keys(self):
        return (self.from_key, self.to_key)


@dataclass(frozen=True)
class LoopFactor:
    from_key: VariableKey
    to_key: VariableKey
    measurement: Pose  # metric-scaled
    info: np.ndarray
    confidence: float = 1.0

    def keys(self):
        return (self.from_key, self.to_key)

    def effective_info(self) -> np.ndarray:
        return apply_confidence(self.info, self.confidence)


@dataclass(frozen=True)
class ScaledLoopFactor:
    from_key: VariableKey
    to_key: VariableKey
    scale: VariableKey
    rotation: np.ndarray   # measured relative rotation R_bar
    direction: np.ndarray  # measured translation t_bar, up to scale
    info: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        if np.linalg.norm(self.direction) <= 0.0:
            raise GraphBuildError("scaled loop factor needs a nonzero direction")

    def keys(self):
        return (self.from_key, self.to_key, self.scale)

    def effective_info(self) -> np.ndarray:
        return apply_confidence(self.info, self.confidence)


@dataclass(frozen=True)
class ScaleSmoothFactor:
    si: VariableKey
    sj: VariableKey
    info: float  # positive scalar

    def __post_init__(self):
        if self.si == self.sj:
            raise GraphBuildError("scale smoothing factor needs two distinct scales")

    def keys(self):
        return (self.si, self.sj)


Factor = Union[PriorFactor, OdometryFactor, LoopFactor, ScaledLoopFactor, ScaleSmoothFactor]


def apply_confidence(info: np.ndarray, p: float) -> np.ndarray:
    """Scale the full information matrix by the confidence probability."""
    if not (0.0 < p <= 1.0):
        raise ValueError(f"confidence must lie in (0, 1], got {p}")
    return p * info


# ---------------------------------------------------------------------------
# residuals and Jacobians


def _relative_residual(measurement: Pose, t_from: Pose, t_to: Pose):
    B = se3.between(t_from, t_to)
    E = measurement.inverse().compose(B)
    r = se3.log(E)
    return r, B, E


def residual_odometry(f: OdometryFactor, est: Dict[VariableKey, object]) -> np.ndarray:
    r, _, _ = _relative_residual(f.measurement, est[f.from_key], est[f.to_key])
    return r


def residual_loop(f: LoopFactor, est, jacobians: bool = False):
    r, B, _ = _relative_residual(f.measurement, est[f.from_key], est[f.to_key])
    if not jacobians:
        return r
    Jri = se3.se3_right_jacobian_inv(r)
    H_from = -Jri @ se3.adjoint(B.inverse())
    H_to = Jri
    return r, (H_from, H_to)


# odometry factors share the loop residual/Jacobian structure
def residual_odometry_jac(f: OdometryFactor, est):
    r, B, _ = _relative_residual(f.measurement, est[f.from_key], est[f.to_key])
    Jri = se3.se3_right_jacobian_inv(r)
    return r, (-Jri @ se3.adjoint(B.inverse()), Jri)


def residual_scaled_loop(f: ScaledLoopFactor, est, jacobians: bool = False):
    s = float(est[f.scale])
    if s <= 0.0:
        raise ValueError(f"scale estimate must be positive, got {s}")
    measurement = Pose(f.rotation, s * f.direction)
    r, B, E = _relative_residual(measurement, est[f.from_key], est[f.to_key])
    if not jacobians:
        return r
    Jri = se3.se3_right_jacobian_inv(r)
    H_from = -Jri @ se3.adjoint(B.inverse())
    H_to = Jri
    # d t_E / ds = -R_bar^T t_bar is a left translation of E; pull it to the
    # right tangent space through Adj(E^{-1}) and the log Jacobian.
    zeta = np.concatenate([np.zeros(3), -(f.rotation.T @ f.direction)])
    H_s = (Jri @ se3.adjoint(E.inverse()) @ zeta).reshape(6, 1)
    return r, (H_from, H_to, H_s)


def residual_prior(f: PriorFactor, est, jacobians: bool = False):
    E = f.value.inverse().compose(est[f.key])
    r = se3.log(E)
    if not jacobians:
        return r
    return r, (se3.se3_right_jacobian_inv(r),)


def residual_scale_smooth(f: ScaleSmoothFactor, est, jacobians: bool = False):
    r = np.array([float(est[f.sj]) - float(est[f.si])])
    if not jacobians:
        return r
    return r, (np.array([[-1.0]]), np.array([[1.0]]))


def factor_residual(f: Factor, est, jacobians: bool = False):
    """Dispatch: residual (and per-key Jacobian blocks) for any factor."""
    if isinstance(f, PriorFactor):
        return residual_prior(f, est, jacobians)
    if isinstance(f, OdometryFactor):
        return residual_odometry_jac(f, est) if jacobians else residual_odometry(f, est)
    if isinstance(f, LoopFactor):
        return residual_loop(f, est, jacobians)
    if isinstance(f, ScaledLoopFactor):
        return residual_scaled_loop(f, est, jacobians)
    if isinstance(f, ScaleSmoothFactor):
        return residual_scale_smooth(f, est, jacobians)
    raise TypeError(f"unknown factor type {type(f)}")


def factor_info(f: Factor) -> np.ndarray:
    if isinstance(f, (LoopFactor, ScaledLoopFactor)):
        return f.effective_info()
    if isinstance(f, ScaleSmoothFactor):
        return np.array([[float(f.info)]])
    return f.info


def factor_cost(f: Factor, est) -> float:
    r = factor_residual(f, est)
    return float(r @ factor_info(f) @ r)


# ---------------------------------------------------------------------------
# graph


@dataclass
class FactorGraph:
    variables: Dict[VariableKey, object] = field(default_factory=dict)
    factors: List[Factor] = field(default_factory=list)
    trajectory_lengths: Dict[int, int] = field(default_factory=dict)
    loops: List[LoopClosure] = field(default_factory=list)
    formulation: Formulation = Formulation.BASE

    def sorted_keys(self) -> List[VariableKey]:
        return sorted(self.variables.keys(), key=VariableKey.sort_key)

    def total_cost(self, est=None, loop_weights: Optional[Dict[int, float]] = None) -> float:
        est = self.variables if est is None else est
        total = 0.0
        for idx, f in enumerate(self.factors):
            c = factor_cost(f, est)
            if loop_weights is not None and isinstance(f, (LoopFactor, ScaledLoopFactor)):
                c *= loop_weights.get(idx, 1.0)
            total += c
        return total

    def loop_factor_indices(self) -> List[int]:
        return [
            i for i, f in enumerate(self.factors)
            if isinstance(f, (LoopFactor, ScaledLoopFactor))
        ]

    def pose_components(self) -> List[set]:
        """Connected components over pose variables (via any shared factor)."""
        parent = {k: k for k in self.variables if k.kind == "pose"}

        def find(k):
            while parent[k] != k:
                parent[k] = parent[parent[k]]
                k = parent[k]
            return k

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

        for f in self.factors:
            pks = [k for k in f.keys() if k.kind == "pose"]
            for a, b in zip(pks, pks[1:]):
                union(a, b)
        comps: Dict[VariableKey, set] = {}
        for k in parent:
            comps.setdefault(find(k), set()).add(k)
        return [comps[r] for r in sorted(comps, key=VariableKey.sort_key)]


DEFAULT_ODOM_INFO = np.diag([100.0, 100.0, 100.0, 25.0, 25.0, 25.0])
DEFAULT_LOOP_INFO = np.diag([25.0, 25.0, 25.0, 4.0, 4.0, 4.0])
DEFAULT_SCALE_SMOOTH_INFO = 10.0
DEFAULT_PRIOR_INFO = np.eye(6) * 1e6
SHARED_SCALE_INDEX = 0


def build_graph(
    keyframes: Dict[int, Sequence[Keyframe]],
    odometry: Dict[int, Sequence[Pose]],
    loops: Sequence[LoopClosure],
    formulation: Formulation = Formulation.BASE,
    odom_info: np.ndarray = None,
    loop_info: np.ndarray = None,
    scale_smooth_info: float = DEFAULT_SCALE_SMOOTH_INFO,
    prior_info: np.ndarray = None,
) -> FactorGraph:
    """Assemble the multi-robot graph under one of the four formulations.

    Pose variables are initialized from keyframe odometry estimates and scale
    variables from each loop's scale_init.  One prior anchors the lowest-id
    robot's first keyframe in every pose-connected component (gauge fixing).
    Deterministic: identical inputs yield an identical factor ordering.
    """
    odom_info = DEFAULT_ODOM_INFO if odom_info is None else odom_info
    loop_info = DEFAULT_LOOP_INFO if loop_info is None else loop_info
    prior_info = DEFAULT_PRIOR_INFO if prior_info is None else prior_info
    if isinstance(formulation, str):
        formulation = Formulation(formulation)

    g = FactorGraph(formulation=formulation)
    for robot in sorted(keyframes):
        kfs = keyframes[robot]
        g.trajectory_lengths[robot] = len(kfs)
        for kf in kfs:
            g.variables[pose_key(kf.robot, kf.index)] = kf.odom_pose

    odom_factors = []
    for robot in sorted(odometry):
        for i, m in enumerate(odometry[robot]):
            odom_factors.append(
                OdometryFactor(pose_key(robot, i), pose_key(robot, i + 1), m, odom_info)
            )

    loops = sorted(
        loops, key=lambda l: (l.from_robot, l.from_index, l.to_robot, l.to_index)
    )
    for loop in loops:
        for k in (pose_key(*loop.from_key), pose_key(*loop.to_key)):
            if k not in g.variables:
                raise GraphBuildError(f"loop references unknown keyframe {k}")

    loop_factors: List[Factor] = []
    smooth_factors: List[ScaleSmoothFactor] = []
    if formulation is Formulation.BASE:
        for loop in loops:
            loop_factors.append(
                LoopFactor(
                    pose_key(*loop.from_key),
                    pose_key(*loop.to_key),
                    loop.measurement(),
                    loop_info,
                    loop.confidence,
                )
            )
    elif formulation is Formulation.SHARED_SCALE:
        min_robot = min(keyframes) if keyframes else 0
        sk = scale_key(min_robot, SHARED_SCALE_INDEX)
        if loops:
            g.variables[sk] = float(np.mean([l.scale_init for l in loops]))
        for loop in loops:
            loop_factors.append(
                ScaledLoopFactor(
                    pose_key(*loop.from_key),
                    pose_key(*loop.to_key),
                    sk,
                    loop.rotation,
                    loop.direction,
                    loop_info,
                    loop.confidence,
                )
            )
    else:
        # independent or smoothed: one scale variable per loop, keyed by the
        # loop's global ordinal in the sorted order
        scale_keys = []
        for ordinal, loop in enumerate(loops):
            sk = scale_key(loop.from_robot, ordinal)
            g.variables[sk] = float(loop.scale_init)
            scale_keys.append(sk)
            loop_factors.append(
                ScaledLoopFactor(
                    pose_key(*loop.from_key),
                    pose_key(*loop.to_key),
                    sk,
                    loop.rotation,
                    loop.direction,
                    loop_info,
                    loop.confidence,
                )
            )
        if formulation is Formulation.SMOOTHED_SCALES:
            clusters: Dict[int, List[int]] = {}
            for ordinal, loop in enumerate(loops):
                clusters.setdefault(loop.cluster_id, []).append(ordinal)
            for cid in sorted(clusters):
                chain = clusters[cid]  # already in (robot, index) sorted order
                for a, b in zip(chain, chain[1:]):
                    smooth_factors.append(
                        ScaleSmoothFactor(scale_keys[a], scale_keys[b], scale_smooth_info)
                    )

    g.factors.extend(odom_factors)
    g.factors.extend(loop_factors)
    g.factors.extend(smooth_factors)
    g.loops = list(loops)

    # gauge: one prior per pose-connected component, anchored at the lowest
    # robot id's first keyframe within the component
    priors = []
    for comp in g.pose_components():
        anchor = min(comp, key=VariableKey.sort_key)
        priors.append(PriorFactor(anchor, g.variables[anchor], prior_info))
    g.factors = priors + g.factors
    return g
