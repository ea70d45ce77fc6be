"""Pinhole camera: +z forward, +x right, +y down, pixel centers at integers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import Pose

MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Row and column index of every pixel, flattened row-major."""
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return rows.reshape(-1), cols.reshape(-1)

    def directions(self, rows, cols) -> np.ndarray:
        """Unit camera-frame ray directions through the given pixels."""
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        d = np.stack([(cols - self.cx) / self.fx, (rows - self.cy) / self.fy, np.ones_like(rows)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def project_to_frame(x, pose: Pose, K: Intrinsics):
    """Transform points by ``pose`` and project them.

    Returns ``(pixel, depth, valid)`` where ``pixel`` is ``(u, v)`` =
    (column, row). A point is invalid when its depth is at most ``MIN_DEPTH``
    or it falls outside the image rectangle.
    """
    x = np.asarray(x, dtype=np.float64)
    y = pose.apply(x)
    Z = y[..., 2]
    safe = np.where(Z > MIN_DEPTH, Z, 1.0)
    u = K.fx * y[..., 0] / safe + K.cx
    v = K.fy * y[..., 1] / safe + K.cy
    valid = (Z > MIN_DEPTH) & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    return np.stack([u, v], axis=-1), Z, valid


def project_tensor(y, K: Intrinsics):
    """Differentiable pinhole projection of camera-frame points ``(N, 3)``.

    Returns ``(rows, cols, valid)``; invalid points get a safe denominator so
    the graph stays finite, and must be masked by the caller.
    """
    y = ad.tensor(y)
    Z = y[:, 2]
    valid = Z.data > MIN_DEPTH
    safe = ad.where(valid, Z, 1.0)
    cols = y[:, 0] / safe * K.fx + K.cx
    rows = y[:, 1] / safe * K.fy + K.cy
    valid = valid & (cols.data >= 0) & (cols.data <= K.width - 1) & (rows.data >= 0) & (rows.data <= K.height - 1)
    return rows, cols, valid
