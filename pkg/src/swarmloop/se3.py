"""SO(3)/SE(3) manifold arithmetic.

Conventions, fixed once for the whole package:

* Tangent vectors (twists) are 6-vectors ordered [rotation; translation].
* Perturbations are right-multiplicative: P (+) xi = P * exp(xi).
* Rotations are stored as 3x3 orthonormal matrices and re-orthonormalized
  after every 64 compositions to bound drift.
* log() at rotation angle pi picks the axis deterministically: the column
  of (R + I) with the largest diagonal entry, sign fixed so the first
  nonzero component is positive.
"""

from __future__ import annotations

import numpy as np

_RENORM_EVERY = 64
_EPS = 1e-12


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula, stable for small angles."""
    theta = np.linalg.norm(omega)
    K = hat(omega)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R; angle in [0, pi], deterministic branch at pi."""
    trace = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(trace)
    if theta < 1e-8:
        # first-order: vee of the skew part
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if np.pi - theta < 1e-6:
        # near pi the sin-based formula degenerates; use R + I column
        M = R + np.eye(3)
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k]
        axis = axis / np.linalg.norm(axis)
        for c in axis:
            if abs(c) > _EPS:
                if c < 0.0:
                    axis = -axis
                break
        return theta * axis
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * vee


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    K = hat(omega)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a = (1.0 - np.cos(theta)) / (theta * theta)
    b = (theta - np.sin(theta)) / (theta ** 3)
    return np.eye(3) + a * K + b * (K @ K)


def so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    K = hat(omega)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    cot_half = theta * 0.5 / np.tan(theta * 0.5)
    return np.eye(3) - 0.5 * K + (1.0 - cot_half) / (theta * theta) * (K @ K)


def renormalize_rotation(R: np.ndarray) -> np.ndarray:
    """Project onto SO(3); keeps determinant +1.

    Two Newton orthogonalization steps (quadratic convergence) handle the
    tiny drift accumulated by composition chains; a full SVD projection is
    used only if the input is far from orthonormal.
    """
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err < 1e-4:
        for _ in range(2):
            R = R @ (1.5 * np.eye(3) - 0.5 * (R.T @ R))
        return R
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


class Pose:
    """Element of SE(3): rotation matrix + metric translation.

    Immutable; arrays are copied on construction and marked read-only.
    """

    __slots__ = ("R", "t", "_ops", "_quat")

    def __init__(self, R=None, t=None, _ops: int = 0):
        R = np.eye(3) if R is None else np.array(R, dtype=float)
        t = np.zeros(3) if t is None else np.array(t, dtype=float)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if t.shape != (3,):
            raise ValueError(f"translation must be length 3, got {t.shape}")
        if _ops >= _RENORM_EVERY:
            R = renormalize_rotation(R)
            _ops = 0
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "_ops", _ops)
        # serialization cache: the exact quaternion this pose was parsed from
        object.__setattr__(self, "_quat", None)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    @staticmethod
    def _new(R: np.ndarray, t: np.ndarray, ops: int) -> "Pose":
        # internal fast path: R, t are freshly computed float arrays
        if ops >= _RENORM_EVERY:
            R = renormalize_rotation(R)
            ops = 0
        p = object.__new__(Pose)
        object.__setattr__(p, "R", R)
        object.__setattr__(p, "t", t)
        object.__setattr__(p, "_ops", ops)
        object.__setattr__(p, "_quat", None)
        return p

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def compose(self, other: "Pose") -> "Pose":
        return Pose._new(
            self.R @ other.R,
            self.R @ other.t + self.t,
            self._ops + other._ops + 1,
        )

    def __mul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose._new(Rt, -(Rt @ self.t), self._ops)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        return Pose(T[:3, :3], T[:3, 3])

    def retract(self, xi: np.ndarray) -> "Pose":
        """Right-multiplicative update P * exp(xi)."""
        return self.compose(exp(xi))

    def __repr__(self):
        return f"Pose(t={self.t.tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def between(a: Pose, b: Pose) -> Pose:
    """Relative pose a^{-1} * b."""
    return a.inverse().compose(b)


def exp(xi: np.ndarray) -> Pose:
    """SE(3) exponential; xi = [omega; v]."""
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[:3], xi[3:]
    R = so3_exp(omega)
    t = so3_left_jacobian(omega) @ v
    return Pose._new(R, t, 0)


def log(p: Pose) -> np.ndarray:
    """SE(3) logarithm; inverse of exp away from the angle-pi cut."""
    omega = so3_log(p.R)
    v = so3_left_jacobian_inv(omega) @ p.t
    return np.concatenate([omega, v])


def adjoint(p: Pose) -> np.ndarray:
    """6x6 adjoint with [omega; v] ordering: exp(Ad(p) xi) = p exp(xi) p^{-1}."""
    A = np.zeros((6, 6))
    A[:3, :3] = p.R
    A[3:, :3] = hat(p.t) @ p.R
    A[3:, 3:] = p.R
    return A


def ad(xi: np.ndarray) -> np.ndarray:
    """se(3) algebra adjoint (Lie bracket matrix) with [omega; v] ordering."""
    omega, v = xi[:3], xi[3:]
    A = np.zeros((6, 6))
    A[:3, :3] = hat(omega)
    A[3:, :3] = hat(v)
    A[3:, 3:] = hat(omega)
    return A


def se3_right_jacobian(xi: np.ndarray) -> np.ndarray:
    """Right Jacobian of exp, via the series sum_k (-ad)^k / (k+1)!.

    Converges to machine precision for |rotation| < pi.
    """
    A = -ad(np.asarray(xi, dtype=float))
    J = np.eye(6)
    term = np.eye(6)
    for k in range(1, 40):
        term = term @ A / (k + 1.0)
        J = J + term
        if np.abs(term).max() < 1e-17:
            break
    return J


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return np.linalg.inv(se3_right_jacobian(xi))


def tangent_distance(a: Pose, b: Pose) -> float:
    """Norm of log(a^{-1} b); zero iff a == b."""
    return float(np.linalg.norm(log(between(a, b))))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation (QR of a Gaussian matrix, det fixed to +1)."""
    M = rng.standard_normal((3, 3))
    Q, Rr = np.linalg.qr(M)
    Q = Q @ np.diag(np.sign(np.diag(Rr)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def random_pose(rng: np.random.Generator, trans_scale: float = 1.0) -> Pose:
    return Pose(random_rotation(rng), rng.standard_normal(3) * trans_scale)
