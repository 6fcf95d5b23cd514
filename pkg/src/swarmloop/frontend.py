"""Loop-closure candidate generation and vetting.

Descriptor matching (cosine nearest neighbor with threshold), the
correspondence-ratio confidence (logistic map), ratio filtering,
odometry-based scale initialization, loop clustering, and the pluggable
registration oracle that stands in for learned registration models.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import se3
from .se3 import Pose
from .types import Keyframe, LoopClosure, RegistrationResult

log = logging.getLogger(__name__)

DESCRIPTOR_DIM = 512


@dataclass(frozen=True)
class ConfidenceParams:
    k: float = 2.0            # logistic steepness
    ratio_threshold: float = 0.3
    similarity_threshold: float = 0.1

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("logistic steepness k must be > 0")
        if self.ratio_threshold < 0:
            raise ValueError("ratio threshold must be >= 0")
        if not (-1.0 <= self.similarity_threshold <= 1.0):
            raise ValueError("similarity threshold must lie in [-1, 1]")


@dataclass(frozen=True)
class CandidateMatch:
    from_robot: int
    from_index: int
    to_robot: int
    to_index: int
    similarity: float

    @property
    def from_key(self):
        return (self.from_robot, self.from_index)

    @property
    def to_key(self):
        return (self.to_robot, self.to_index)


def make_descriptor(v: np.ndarray) -> np.ndarray:
    """Normalize to unit length; descriptors are always stored normalized."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n <= 0:
        raise ValueError("descriptor must be nonzero")
    return v / n


def match_descriptors(
    own: Sequence[Keyframe],
    other: Sequence[Keyframe],
    params: ConfidenceParams,
) -> List[CandidateMatch]:
    """Best cosine-similarity counterpart in `other` for each own keyframe.

    Exact linear scan; ties broken by lowest (robot, index).  A candidate is
    emitted only if its similarity reaches the similarity threshold.
    """
    if not other:
        return []
    other_sorted = sorted(other, key=lambda kf: (kf.robot, kf.index))
    D = np.stack([kf.descriptor for kf in other_sorted])
    out = []
    for kf in own:
        sims = D @ kf.descriptor
        best = int(np.argmax(sims))  # argmax returns the first (lowest) maximum
        s = float(sims[best])
        if s >= params.similarity_threshold:
            o = other_sorted[best]
            out.append(CandidateMatch(kf.robot, kf.index, o.robot, o.index, s))
    return out


def correspondence_ratio(loop_count: int, odom_count: int) -> float:
    if odom_count <= 0:
        raise ValueError("no valid odometry pair (zero correspondences)")
    return loop_count / odom_count


def confidence(r: float, k: float = 2.0) -> float:
    """Logistic confidence p = 1 / (1 + exp(-k (r - 1))); p(1) = 0.5."""
    return 1.0 / (1.0 + np.exp(-k * (r - 1.0)))


@dataclass
class RegistrationOutcome:
    """A candidate with its registration; produced before ratio filtering."""

    candidate: CandidateMatch
    result: RegistrationResult
    ratio: float = field(init=False)

    def __post_init__(self):
        self.ratio = correspondence_ratio(
            self.result.loop_correspondences, self.result.odom_correspondences
        )


def filter_loops(
    outcomes: Sequence[RegistrationOutcome],
    params: ConfidenceParams,
) -> List[Tuple[RegistrationOutcome, float]]:
    """Keep outcomes with ratio >= threshold (boundary inclusive); attach the
    logistic confidence.  Output order equals input order."""
    kept = []
    for o in outcomes:
        if o.ratio >= params.ratio_threshold:
            kept.append((o, float(confidence(o.ratio, params.k))))
    return kept


@dataclass(frozen=True)
class ScaleInit:
    translation: np.ndarray
    s0: float
    degenerate: bool = False


def scale_init(
    odom_metric_t: np.ndarray,
    odom_oracle_t: np.ndarray,
    loop_t: np.ndarray,
) -> ScaleInit:
    """Rescale an up-to-scale loop translation with the odometry norm ratio.

    Assumes the oracle applied the same scaling to the odometry pair and the
    loop pair.  A (near-)stationary odometry pair cannot anchor the scale;
    we fall back to s0 = 1 and flag the result.
    """
    denom = float(np.linalg.norm(odom_oracle_t))
    if denom < 1e-9:
        log.warning("stationary odometry pair; falling back to scale init 1.0")
        return ScaleInit(np.array(loop_t, dtype=float), 1.0, degenerate=True)
    s0 = float(np.linalg.norm(odom_metric_t)) / denom
    return ScaleInit(s0 * np.asarray(loop_t, dtype=float), s0)


CLUSTER_KEYFRAME_GAP = 10


def cluster_loops(loops: Sequence[LoopClosure], gap: int = CLUSTER_KEYFRAME_GAP) -> List[int]:
    """Union-find clustering of loops on the same robot pair whose endpoint
    indices both differ by fewer than `gap` keyframes.  Returns one cluster
    id per loop (the smallest member ordinal); also sets loop.cluster_id."""
    n = len(loops)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    def endpoints(l: LoopClosure):
        # canonical orientation: indices keyed by the lower robot id first
        if l.from_robot <= l.to_robot:
            return l.from_index, l.to_index
        return l.to_index, l.from_index

    for i in range(n):
        for j in range(i + 1, n):
            if loops[i].robot_pair != loops[j].robot_pair:
                continue
            ai, aj = endpoints(loops[i])
            bi, bj = endpoints(loops[j])
            if abs(ai - bi) < gap and abs(aj - bj) < gap:
                union(i, j)

    ids = [find(i) for i in range(n)]
    for loop, cid in zip(loops, ids):
        loop.cluster_id = cid
    return ids


# ---------------------------------------------------------------------------
# registration oracles


class RegistrationOracle:
    """Behavioral contract: given two keyframes, return a RegistrationResult
    or None on failure.  Implementations must be deterministic per seed and
    independent of call order."""

    def register(self, a: Keyframe, b: Keyframe) -> Optional[RegistrationResult]:
        raise NotImplementedError


@dataclass
class OracleNoise:
    sigma_rot: float = 0.0       # rad, tangent-space
    sigma_trans: float = 0.0     # m, applied before the hidden scale
    outlier_rate: float = 0.0
    outlier_box: float = 25.0    # outlier translation uniform in [-box, box]^3
    inlier_mean_correspondences: float = 120.0
    odom_mean_correspondences: float = 150.0
    outlier_mean_correspondences: float = 25.0
    overlap_length_scale: float = 5.0


class SyntheticRegistrationOracle(RegistrationOracle):
    """Stands in for a learned registration model on synthetic worlds.

    Inliers return the ground-truth relative pose perturbed by zero-mean
    tangent noise, with the translation divided by a hidden per-cluster scale
    (so the optimizer must recover that scale).  Outliers return a uniformly
    random rotation and a translation uniform in a box.  Correspondence
    counts are Poisson-distributed so inlier ratios concentrate above the
    filter threshold and outlier ratios below it.

    All randomness derives from (seed, keyframe pair), making results
    deterministic and call-order independent.
    """

    def __init__(self, world, noise: OracleNoise = None, seed: int = 0,
                 shared_odom_scale: bool = True):
        self.world = world
        self.noise = noise or OracleNoise()
        self.seed = seed
        self.shared_odom_scale = shared_odom_scale
        self._outlier_pairs = set()

    def _rng(self, a: Keyframe, b: Keyframe) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(
                entropy=(self.seed, a.robot, a.index, b.robot, b.index)
            )
        )

    def is_outlier(self, a: Keyframe, b: Keyframe) -> bool:
        rng = self._rng(a, b)
        return bool(rng.uniform() < self.noise.outlier_rate)

    def register(self, a: Keyframe, b: Keyframe) -> Optional[RegistrationResult]:
        nz = self.noise
        rng = self._rng(a, b)
        outlier = bool(rng.uniform() < nz.outlier_rate)

        truth_a = self.world.true_pose(a.robot, a.index)
        truth_b = self.world.true_pose(b.robot, b.index)
        rel = se3.between(truth_a, truth_b)
        hidden = self.world.scale_for_pair(a.robot, a.index, b.robot, b.index)

        # odometry pair on the registering robot: (index-1, index)
        if a.index == 0:
            return None  # no odometry pair exists for the first keyframe
        prev = self.world.true_pose(a.robot, a.index - 1)
        odom_rel = se3.between(prev, truth_a)
        odom_noise = np.concatenate(
            [rng.normal(0, nz.sigma_rot, 3), rng.normal(0, nz.sigma_trans, 3)]
        )
        odom_meas = odom_rel.compose(se3.exp(odom_noise))
        odom_scale = hidden if self.shared_odom_scale else self.world.scale_for_odom(
            a.robot, a.index
        )
        odom_oracle_t = odom_meas.t / odom_scale
        odom_metric_t = self.world.odom_step_translation(a.robot, a.index)
        odom_count = max(1, int(rng.poisson(nz.odom_mean_correspondences)))

        if outlier:
            self._outlier_pairs.add((a.key, b.key))
            R = se3.random_rotation(rng)
            t = rng.uniform(-nz.outlier_box, nz.outlier_box, 3)
            loop_count = int(rng.poisson(nz.outlier_mean_correspondences))
            return RegistrationResult(
                R, t, loop_count, odom_count,
                odom_metric_translation=odom_metric_t,
                odom_oracle_translation=odom_oracle_t,
            )

        xi = np.concatenate(
            [rng.normal(0, nz.sigma_rot, 3), rng.normal(0, nz.sigma_trans, 3)]
        )
        noisy = rel.compose(se3.exp(xi))
        dist = float(np.linalg.norm(truth_a.t - truth_b.t))
        overlap = float(np.exp(-0.5 * (dist / nz.overlap_length_scale) ** 2))
        loop_count = int(rng.poisson(nz.inlier_mean_correspondences * overlap))
        return RegistrationResult(
            noisy.R, noisy.t / hidden, loop_count, odom_count,
            odom_metric_translation=odom_metric_t,
            odom_oracle_translation=odom_oracle_t,
        )


ORACLE_CSV_FIELDS = [
    "robot_a", "index_a", "robot_b", "index_b",
    "qx", "qy", "qz", "qw", "tx", "ty", "tz",
    "loop_correspondences", "odom_correspondences",
    "odom_metric_tx", "odom_metric_ty", "odom_metric_tz",
    "odom_oracle_tx", "odom_oracle_ty", "odom_oracle_tz",
]


class FileRegistrationOracle(RegistrationOracle):
    """Replays precomputed registrations from a CSV table, enabling runs
    against real model outputs without any model code.  Pairs missing from
    the table register as failures."""

    def __init__(self, path: str):
        self.table: Dict[tuple, RegistrationResult] = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (
                    int(row["robot_a"]), int(row["index_a"]),
                    int(row["robot_b"]), int(row["index_b"]),
                )
                q = np.array([float(row["qx"]), float(row["qy"]),
                              float(row["qz"]), float(row["qw"])])
                R = quaternion_to_rotation(q)
                t = np.array([float(row["tx"]), float(row["ty"]), float(row["tz"])])
                self.table[key] = RegistrationResult(
                    R, t,
                    int(row["loop_correspondences"]),
                    int(row["odom_correspondences"]),
                    odom_metric_translation=np.array(
                        [float(row["odom_metric_tx"]), float(row["odom_metric_ty"]),
                         float(row["odom_metric_tz"])]),
                    odom_oracle_translation=np.array(
                        [float(row["odom_oracle_tx"]), float(row["odom_oracle_ty"]),
                         float(row["odom_oracle_tz"])]),
                )

    def register(self, a: Keyframe, b: Keyframe) -> Optional[RegistrationResult]:
        return self.table.get((a.robot, a.index, b.robot, b.index))


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """(qx, qy, qz, qw) -> rotation matrix."""
    x, y, z, w = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> (qx, qy, qz, qw) with qw >= 0 (canonical sign)."""
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)
