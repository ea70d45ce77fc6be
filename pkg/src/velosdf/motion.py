"""Continuous camera motion: a time -> (omega, v) network and its integration.

Sign convention used throughout the package: ``(omega, v)`` generate the
motion of static scene points expressed in camera coordinates,
``dx/dt = omega x x + v``. ``pose_between(t1, t2)`` therefore maps camera-t1
coordinates to camera-t2 coordinates, and consecutive Euler sub-steps
``(psi(omega dt), v dt)`` compose exactly: ``B(t1->t3) = B(t2->t3) o B(t1->t2)``
whenever t2 lies on the sub-step grid. A physical camera moving with body
velocity ``(w_c, v_c)`` corresponds to ``(omega, v) = (-w_c, -v_c)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .geometry import Pose, pose_inverse
from .nets import MLPShape, encoded_dim, init_mlp, mlp_forward, positional_encoding

TIME_TOL = 1e-9


class TimeOutOfRange(ValueError):
    pass


def check_time(*ts) -> None:
    for t in ts:
        a = np.asarray(t, dtype=np.float64)
        if np.any(a < -1.0 - TIME_TOL) or np.any(a > 1.0 + TIME_TOL) or not np.all(np.isfinite(a)):
            raise TimeOutOfRange(f"time {t} outside [-1, 1]")


def normalized_times(n_frames: int) -> np.ndarray:
    """Frame ``i`` of ``T`` maps to ``-1 + 2 i / (T - 1)``."""
    if n_frames < 2:
        return np.zeros(n_frames)
    return -1.0 + 2.0 * np.arange(n_frames) / (n_frames - 1)


@dataclass(frozen=True)
class VelocitySample:
    omega: np.ndarray
    vel: np.ndarray
    time: float


@dataclass(frozen=True)
class IntegrationConfig:
    substeps_per_frame: int = 10
    frame_dt: float = 2.0 / 23.0

    def __post_init__(self):
        if self.substeps_per_frame < 1:
            raise ValueError("substeps_per_frame must be >= 1")
        if self.frame_dt <= 0:
            raise ValueError("frame_dt must be positive")

    def n_steps(self, length: float) -> int:
        return max(1, math.ceil(self.substeps_per_frame * abs(length) / self.frame_dt - 1e-9))


class MotionNetwork:
    """MLP ``t -> (omega, v)`` on a positional encoding of t.

    The output layer starts at zero, so an untrained network predicts a
    static camera.
    """

    prefix = "motion"

    def __init__(self, store: ParameterStore | None = None, *, octaves: int = 6, hidden: int = 128,
                 layers: int = 4, beta: float = 100.0, seed: int = 0, output_scale: float = 1.0):
        self.octaves = octaves
        self.beta = beta
        self.output_scale = output_scale
        self.shape = MLPShape(encoded_dim(1, octaves), hidden, layers, 6)
        self.store = store if store is not None else ParameterStore()
        if f"{self.prefix}.W0" not in self.store:
            init_mlp(self.store, self.prefix, self.shape, np.random.default_rng(seed))
            last = self.shape.layers
            self.store[f"{self.prefix}.W{last}"][...] = 0.0
            self.store[f"{self.prefix}.b{last}"][...] = 0.0

    def params(self, trainable: bool = False) -> dict:
        return self.store.leaves(self.prefix, trainable)

    def forward(self, params: dict, t) -> Tensor:
        """``(M,)`` times -> ``(M, 6)`` rows of ``[omega, v]``."""
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        enc = positional_encoding(t, self.octaves)
        act = lambda h: ad.softplus(h, self.beta)
        out = mlp_forward(params, self.prefix, self.shape, enc, act)
        return out * self.output_scale if self.output_scale != 1.0 else out

    def velocities(self, t, params: dict | None = None) -> np.ndarray:
        check_time(t)
        return self.forward(params or self.params(), t).data

    def predict_velocity(self, t: float, params: dict | None = None) -> VelocitySample:
        out = self.velocities(np.array([t]), params)[0]
        return VelocitySample(out[:3].copy(), out[3:].copy(), float(t))


def _euler_chain(rot_steps: Tensor, trans_steps: Tensor) -> tuple[Tensor, Tensor]:
    """Left-accumulate sub-steps along axis -3 / -2.

    ``rot_steps`` is ``(..., U, 3, 3)``, ``trans_steps`` is ``(..., U, 3)``.
    Returns the composed ``(..., 3, 3)`` rotation and ``(..., 3)`` translation.
    """
    U = rot_steps.shape[-3]
    R = rot_steps[..., 0, :, :]
    p = trans_steps[..., 0, :]
    for u in range(1, U):
        Ru = rot_steps[..., u, :, :]
        R = ad.matmul(Ru, R)
        p = ad.reshape(ad.matmul(Ru, ad.reshape(p, p.shape + (1,))), p.shape) + trans_steps[..., u, :]
    return R, p


def relative_transform(net: MotionNetwork, params: dict, t: float, length: float,
                       cfg: IntegrationConfig) -> tuple[Tensor, Tensor]:
    """Differentiable ``B(t -> t + length)`` for ``length >= 0`` as (R, p) tensors."""
    if length < 0:
        raise ValueError("length must be non-negative")
    check_time(t, t + length)
    if length == 0:
        return ad.Tensor(np.eye(3)), ad.Tensor(np.zeros(3))
    n = cfg.n_steps(length)
    dt = length / n
    times = t + dt * np.arange(n)
    vel = net.forward(params, times)
    rots = ad.rotvec_to_matrix(vel[:, :3] * dt)
    return _euler_chain(rots, vel[:, 3:] * dt)


def integrate_relative(net: MotionNetwork, t: float, length: float, cfg: IntegrationConfig,
                       params: dict | None = None) -> Pose:
    """Euler-integrated transform from time t to t + length (length > 0)."""
    if length <= 0:
        raise ValueError("length must be positive")
    R, p = relative_transform(net, params or net.params(), t, length, cfg)
    return Pose(R.data, p.data)


def pose_between(net: MotionNetwork, t1: float, t2: float, cfg: IntegrationConfig,
                 params: dict | None = None) -> Pose:
    """Transform mapping camera-t1 coordinates to camera-t2 coordinates."""
    check_time(t1, t2)
    if t1 == t2:
        return Pose.identity()
    if t1 < t2:
        return integrate_relative(net, t1, t2 - t1, cfg, params)
    return pose_inverse(integrate_relative(net, t2, t1 - t2, cfg, params))


def scene_flow_at(net: MotionNetwork, x, t: float, params: dict | None = None) -> np.ndarray:
    """``-(omega(t) x x + v(t))`` for points ``x`` of shape ``(3,)`` or ``(N, 3)``."""
    s = net.predict_velocity(t, params)
    x = np.asarray(x, dtype=np.float64)
    return -(np.cross(s.omega, x) + s.vel)


class FrameChain:
    """Per-step cache of differentiable frame-to-frame transforms.

    Integrates every consecutive frame gap of the full timeline with ``U``
    sub-steps in one batched network call; transforms between arbitrary
    frames are products of gap transforms, which equals integrating the whole
    interval with ``U * |i - j|`` sub-steps.
    """

    def __init__(self, net: MotionNetwork, params: dict, times, substeps: int):
        self.times = np.asarray(times, dtype=np.float64)
        T = len(self.times)
        gaps = np.diff(self.times)
        self.substeps = substeps
        frac = np.arange(substeps) / substeps
        sub_t = (self.times[:-1, None] + gaps[:, None] * frac[None, :]).reshape(-1)
        vel = net.forward(params, sub_t)
        dt = np.repeat(gaps / substeps, substeps)[:, None]
        rots = ad.rotvec_to_matrix(vel[:, :3] * dt)
        trans = vel[:, 3:] * dt
        R, p = _euler_chain(ad.reshape(rots, (T - 1, substeps, 3, 3)), ad.reshape(trans, (T - 1, substeps, 3)))
        self.gap_R, self.gap_p = R, p
        self._cache: dict = {}

    def forward_transform(self, i: int, j: int) -> tuple[Tensor, Tensor]:
        """``B(t_i -> t_j)`` for ``i <= j``."""
        if (i, j) in self._cache:
            return self._cache[(i, j)]
        if i == j:
            out = (ad.Tensor(np.eye(3)), ad.Tensor(np.zeros(3)))
        elif j == i + 1:
            out = (self.gap_R[i], self.gap_p[i])
        else:
            R0, p0 = self.forward_transform(i, j - 1)
            Rg, pg = self.gap_R[j - 1], self.gap_p[j - 1]
            out = (ad.matmul(Rg, R0), ad.matmul(Rg, p0) + pg)
        self._cache[(i, j)] = out
        return out

    def transform(self, i: int, j: int) -> tuple[Tensor, Tensor]:
        """``P(t_i -> t_j)``: forward transform, or the inverse of the reverse one."""
        if i <= j:
            return self.forward_transform(i, j)
        R, p = self.forward_transform(j, i)
        Rt = ad.swapaxes(R, -1, -2)
        return Rt, -ad.matmul(Rt, p)


def apply_transform(R, p, x) -> Tensor:
    """Apply ``x -> R x + p`` to an ``(N, 3)`` batch."""
    return ad.matmul(x, ad.swapaxes(R, -1, -2)) + p
