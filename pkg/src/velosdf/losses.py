"""Training objective: color, eikonal, SDF-flow, photometric and SDF consistency terms."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Intrinsics, project_tensor
from .field import FieldNetworks
from .motion import apply_transform

COMPONENTS = ("rgb", "eik", "flow", "photo", "sdf")


class EmptyBatch(ValueError):
    pass


class AllInvalid(UserWarning):
    """No neighbor projection landed inside its target image."""


@dataclass(frozen=True)
class LossWeights:
    lambda_eik: float = 0.1
    lambda_flow: float = 0.1
    lambda_photo: float = 1.0
    lambda_sdf: float = 0.1
    zero_until_epoch: int = 200
    ramp_epochs: int = 200

    def __post_init__(self):
        for k in ("lambda_eik", "lambda_flow", "lambda_photo", "lambda_sdf"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if self.zero_until_epoch < 0 or self.ramp_epochs < 0:
            raise ValueError("schedule epochs must be non-negative")

    def sdf_weight(self, epoch: int) -> float:
        """Effective lambda_sdf: zero, then a linear ramp, then constant."""
        if epoch < self.zero_until_epoch:
            return 0.0
        if self.ramp_epochs == 0:
            return self.lambda_sdf
        frac = min(1.0, (epoch - self.zero_until_epoch) / self.ramp_epochs)
        return self.lambda_sdf * frac

    def effective(self, epoch: int, stage: int) -> dict:
        if stage == 2:
            return {"rgb": 1.0, "eik": self.lambda_eik, "flow": 0.0, "photo": 0.0, "sdf": 0.0}
        if stage != 1:
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        return {
            "rgb": 1.0,
            "eik": self.lambda_eik,
            "flow": self.lambda_flow,
            "photo": self.lambda_photo,
            "sdf": self.sdf_weight(epoch),
        }


def _nonempty(n: int, what: str) -> None:
    if n == 0:
        raise EmptyBatch(f"{what} is empty")


def loss_rgb(pred, target) -> Tensor:
    """Mean over rays of the (unsquared) Euclidean color residual."""
    pred = ad.tensor(pred)
    _nonempty(pred.shape[0], "ray batch")
    if pred.shape != np.shape(target):
        raise ValueError(f"color shapes differ: {pred.shape} vs {np.shape(target)}")
    return ad.mean(ad.norm(pred - target, axis=-1))


def loss_eikonal(nets: FieldNetworks, params: dict, points, t) -> Tensor:
    points = ad.tensor(points)
    _nonempty(points.shape[0], "eikonal point set")
    n = nets.surface_normal(params, points, t)
    dev = ad.norm(n, axis=-1) - 1.0
    return ad.mean(dev * dev)


def flow_residual(nets: FieldNetworks, params: dict, velocity, points, t) -> Tensor:
    """``ds/dt + (omega x x + v) . n`` per point; ``velocity`` is ``(6,)`` or ``(M, 6)``."""
    points = ad.tensor(points)
    velocity = ad.tensor(velocity)
    g = nets.sdf_gradients(params, points, t)
    omega, v = velocity[..., :3], velocity[..., 3:]
    motion = ad.cross(ad.broadcast_to(omega, points.shape), points) + v
    return g[:, 3] + ad.sum_(motion * g[:, :3], axis=-1)


def loss_flow(nets: FieldNetworks, params: dict, velocity, points, weights, t) -> Tensor:
    """Mean over rays of ``sum_i SG(alpha_i) |flow residual_i|``.

    ``points`` is ``(R, K, 3)`` and ``weights`` ``(R, K)``. The weights are
    detached, so only the residual carries gradients.
    """
    points = ad.tensor(points)
    R, K = points.shape[:2]
    _nonempty(R, "ray batch")
    w = ad.stop_gradient(weights)
    res = flow_residual(nets, params, velocity, ad.reshape(points, (R * K, 3)), t)
    return ad.sum_(w * ad.abs_(ad.reshape(res, (R, K)))) * (1.0 / R)


def top_weight_samples(weights: np.ndarray, k: int) -> np.ndarray:
    """Indices ``(R, k)`` of the largest rendering weights per ray."""
    k = min(k, weights.shape[1])
    idx = np.argpartition(-weights, k - 1, axis=1)[:, :k]
    return np.sort(idx, axis=1)


def edge_mask(image: np.ndarray, threshold: float) -> np.ndarray:
    """True where any channel varies by at least ``threshold`` within a 3x3 window.

    Bilinear resampling across such edges (silhouettes against the
    background) does not follow the surface, so those source pixels are
    left out of the photometric term. ``threshold <= 0`` masks nothing.
    """
    image = np.asarray(image, dtype=np.float64)
    if threshold <= 0:
        return np.zeros(image.shape[:2], dtype=bool)
    spread = maximum_filter(image, size=(3, 3, 1)) - minimum_filter(image, size=(3, 3, 1))
    return spread.max(axis=-1) >= threshold


def loss_photo(surface_points, source_colors, neighbors, K: Intrinsics, return_count: bool = False):
    """Mean L1 color difference between each source pixel and its reprojection.

    ``neighbors`` is a list of ``(R, p, image)``: the transform from the
    source camera into a neighbor camera and that neighbor's ``(H, W, 3)``
    image. Projections behind the camera or outside the image are dropped
    from both sum and count; if none survive the loss is 0 and an
    :class:`AllInvalid` warning is issued.
    """
    x = ad.tensor(surface_points)
    _nonempty(x.shape[0], "ray batch")
    total, count = None, 0
    for Rn, pn, image in neighbors:
        y = apply_transform(Rn, pn, x)
        rows, cols, valid = project_tensor(y, K)
        m = int(valid.sum())
        if m == 0:
            continue
        sampled = ad.bilinear_sample(image, rows, cols)
        diff = ad.sum_(ad.abs_(sampled - source_colors), axis=-1)
        term = ad.sum_(ad.where(valid, diff, 0.0))
        total = term if total is None else total + term
        count += m
    if count == 0:
        warnings.warn("no valid projections for the photometric loss", AllInvalid, stacklevel=2)
        out = ad.Tensor(np.array(0.0))
    else:
        out = total * (1.0 / count)
    return (out, count) if return_count else out


def loss_sdf_consistency(nets: FieldNetworks, params: dict, points, t, transform, t_w) -> Tensor:
    """Mean ``|s(x, t) - s(P x, t_w)|`` with ``transform = (R, p)`` mapping frame t to the world frame."""
    points = ad.tensor(points)
    _nonempty(points.shape[0], "point set")
    if float(t) == float(t_w):
        return ad.Tensor(np.array(0.0))  # the transport is the identity
    moved = apply_transform(transform[0], transform[1], points)
    n = points.shape[0]
    times = np.concatenate([np.full(n, float(t)), np.full(n, float(t_w))])
    s = nets.sdf(params, ad.concat([points, moved], axis=0), times)
    return ad.mean(ad.abs_(s[:n] - s[n:]))


def total_loss(components: dict, weights: LossWeights, epoch: int, stage: int) -> tuple[Tensor, dict]:
    """Weighted sum of the available components; returns ``(total, effective weights)``.

    Components with zero effective weight are left out of the graph.
    """
    eff = weights.effective(epoch, stage)
    total = ad.Tensor(np.array(0.0))
    for name in COMPONENTS:
        w = eff[name]
        if w == 0.0 or name not in components or components[name] is None:
            continue
        total = total + components[name] * w
    return total, eff
