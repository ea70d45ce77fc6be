"""Image, depth and trajectory metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import Pose, Trajectory, pose_compose, pose_inverse, rotation_angle, umeyama_align

PROTOCOL_VERSION = "velosdf-eval-1 (ssim: luma, 11x11 gaussian sigma 1.5; depth: median-ratio; rpe: delta 1, mean)"
PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])


class SizeMismatch(ValueError):
    pass


class TooSmall(ValueError):
    pass


class EmptyMask(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DepthMetrics:
    abrel: float
    sqrel: float
    delta1: float


@dataclass(frozen=True)
class PoseMetrics:
    rpe_t: float
    rpe_r: float
    ate: float


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise SizeMismatch(f"{a.shape} vs {b.shape}")


def psnr(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _same_shape(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _to_luma(img: np.ndarray) -> np.ndarray:
    return img @ LUMA if img.ndim == 3 else img


def ssim(pred, gt, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained windows, on ITU-R 601 luma."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _same_shape(pred, gt)
    a, b = _to_luma(pred), _to_luma(gt)
    if a.shape[0] < window or a.shape[1] < window:
        raise TooSmall(f"image {a.shape} smaller than {window}x{window}")
    g = _gaussian_window(window, sigma)
    r = window // 2

    def blur(x):
        y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return y[r:-r, r:-r]

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    c1, c2 = 0.01**2, 0.03**2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def depth_metrics(pred, gt, mask=None) -> DepthMetrics:
    """Median-ratio scaled AbRel, SqRel and delta1 (threshold 1.25)."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _same_shape(pred, gt)
    valid = np.isfinite(gt) & (gt > 0) & np.isfinite(pred) & (pred > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise EmptyMask("no valid depth pixels")
    p, g = pred[valid], gt[valid]
    p = p * (np.median(g) / np.median(p))
    err = np.abs(p - g)
    err[err <= 4.0 * np.finfo(np.float64).eps * g] = 0.0  # rounding of the rescale, not a depth error
    abrel = float(np.mean(err / g))
    sqrel = float(np.mean(err**2 / g))
    delta1 = float(np.mean(np.maximum(p / g, g / p) < 1.25))
    return DepthMetrics(abrel, sqrel, delta1)


def align_trajectory(pred: Trajectory, gt: Trajectory) -> list[Pose]:
    if np.array_equal(pred.positions(), gt.positions()):
        return list(pred.poses)  # zero residual: the identity is already optimal
    S = umeyama_align(pred.positions(), gt.positions())
    return [S.apply_pose(p) for p in pred.poses]


def pose_metrics(pred: Trajectory, gt: Trajectory) -> PoseMetrics:
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predicted vs {len(gt)} ground-truth poses")
    if not np.allclose(pred.timestamps, gt.timestamps, rtol=0, atol=1e-9):
        raise LengthMismatch("timestamps differ")
    aligned = align_trajectory(pred, gt)
    res = np.array([a.translation - g.translation for a, g in zip(aligned, gt.poses)])
    ate = float(np.sqrt(np.mean(np.sum(res**2, axis=1))))
    et, er = [], []
    for i in range(len(gt) - 1):
        dg = pose_compose(pose_inverse(gt.poses[i]), gt.poses[i + 1])
        dp = pose_compose(pose_inverse(aligned[i]), aligned[i + 1])
        E = pose_compose(pose_inverse(dg), dp)
        et.append(np.linalg.norm(E.translation))
        er.append(np.degrees(rotation_angle(E.rotation)))
    return PoseMetrics(float(np.mean(et)), float(np.mean(er)), ate)


def trajectory_extent(traj: Trajectory) -> float:
    """Largest distance between any two camera positions."""
    x = traj.positions()
    return float(np.max(np.linalg.norm(x[:, None] - x[None], axis=-1)))


def metrics_record(img: dict, depth: DepthMetrics | None, pose: PoseMetrics | None, n_frames: int) -> dict:
    rec = {"psnr": img.get("psnr"), "ssim": img.get("ssim")}
    rec.update(asdict(depth) if depth else {"abrel": None, "sqrel": None, "delta1": None})
    rec.update(asdict(pose) if pose else {"rpe_t": None, "rpe_r": None, "ate": None})
    rec["n_frames"] = n_frames
    rec["protocol-version"] = PROTOCOL_VERSION
    return rec


def dumps_metrics(rec: dict) -> str:
    return json.dumps(rec, indent=2, sort_keys=True) + "\n"
