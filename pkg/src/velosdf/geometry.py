"""Rigid-body helpers: skew maps, rotation-vector exponential, poses and
similarity alignment of point sets.

All functions are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Below this angle Rodrigues' sin(x)/x terms lose precision; use the series.
SMALL_ANGLE = 1e-8


class DegenerateInput(ValueError):
    """Raised when a point set cannot define a unique alignment."""


def skew(v) -> np.ndarray:
    """Return the 3x3 matrix ``S`` with ``S @ w == cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(theta) -> np.ndarray:
    """Exponential map so(3) -> SO(3) via Rodrigues' formula."""
    theta = np.asarray(theta, dtype=np.float64).reshape(3)
    K = skew(theta)
    angle = float(np.linalg.norm(theta))
    if angle < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / angle**2
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_rotvec(R) -> np.ndarray:
    """Inverse of :func:`rotvec_to_matrix` for angles in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos_a = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(cos_a))
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-6:
        return 0.5 * w
    if np.pi - angle < 1e-6:
        # axis from the symmetric part; sign is arbitrary at pi
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        axis = B[k] / axis[k]
        return angle * axis / np.linalg.norm(axis)
    return angle / (2.0 * np.sin(angle)) * w


def rotation_angle(R) -> float:
    """Geodesic angle (radians) of a rotation matrix.

    Uses ``atan2(sin, cos)`` so that small angles keep full precision
    (``arccos`` near 1 loses about half the digits).
    """
    R = np.asarray(R, dtype=np.float64)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(w), (np.trace(R) - 1.0) / 2.0))


def matrix_to_quaternion(R) -> np.ndarray:
    """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s])
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix from ``(qx, qy, qz, qw)``; the input is normalized first."""
    x, y, z, w = np.asarray(q, dtype=np.float64).reshape(4) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Transform an ``(..., 3)`` array of points."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0) and abs(np.linalg.det(R) - 1.0) <= tol)

    def __matmul__(self, other: "Pose") -> "Pose":
        return pose_compose(self, other)


def pose_compose(a: Pose, b: Pose) -> Pose:
    """``a o b``: apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_inverse(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


@dataclass(frozen=True)
class Trajectory:
    """Timestamped poses with strictly increasing timestamps."""

    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.array(self.timestamps, dtype=np.float64).reshape(-1)
        poses = tuple(self.poses)
        if len(ts) != len(poses):
            raise ValueError(f"{len(ts)} timestamps for {len(poses)} poses")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_pose(self, p: Pose) -> Pose:
        """Map a camera-to-world pose into the aligned frame (rotation is not scaled)."""
        return Pose(self.rotation @ p.rotation, self.apply(p.translation))


def umeyama_align(source: Sequence, target: Sequence) -> SimilarityTransform:
    """Least-squares similarity ``target ~ s R source + t`` (Umeyama 1991)."""
    X = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if X.shape != Y.shape:
        raise DegenerateInput(f"point count mismatch: {len(X)} vs {len(Y)}")
    n = len(X)
    if n < 3:
        raise DegenerateInput(f"need at least 3 points, got {n}")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    var_x = float(np.sum(Xc**2)) / n
    if var_x <= 1e-300:
        raise DegenerateInput("source points have zero variance")
    cov = Yc.T @ Xc / n
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.sum(d * np.diag(S))) / var_x
    t = my - s * R @ mx
    return SimilarityTransform(s, R, t)
