"""Analytic ground truth: SDF scenes, shading, camera velocity profiles and a
sphere-tracing renderer that writes datasets to disk.

Profiles describe the physical camera: body-frame angular velocity ``w_c``
and velocity ``v_c`` per unit normalized time, so that the camera-to-world
pose ``(R, p)`` obeys ``dR/dt = R [w_c]x`` and ``dp/dt = R v_c``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import Intrinsics
from .fileio import write_intrinsics, write_pfm, write_png, write_png16_depth, write_trajectory, atomic_write_text
from .geometry import Pose, Trajectory, rotvec_to_matrix, skew
from .motion import normalized_times

TRACE_TOL = 1e-5
TRACE_ITERS = 256


# --------------------------------------------------------------------- scenes


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple = (0.8, 0.8, 0.8)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius

    def gradient(self, x: np.ndarray) -> np.ndarray:
        d = x - np.asarray(self.center)
        return d / np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-300)


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple
    albedo: tuple = (0.8, 0.8, 0.8)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        q = np.abs(x - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        rel = x - np.asarray(self.center)
        q = np.abs(rel) - np.asarray(self.half)
        sign = np.where(rel >= 0, 1.0, -1.0)
        pos = np.maximum(q, 0.0)
        n_out = np.linalg.norm(pos, axis=-1, keepdims=True)
        g_out = sign * pos / np.maximum(n_out, 1e-300)
        g_in = sign * (np.arange(3) == q.argmax(axis=-1)[..., None])
        return np.where(n_out > 0, g_out, g_in)


@dataclass(frozen=True)
class Plane:
    """Half-space boundary ``normal . x = offset``; positive on the normal side."""

    normal: tuple
    offset: float
    albedo: tuple = (0.8, 0.8, 0.8)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        return x @ (n / np.linalg.norm(n)) - self.offset

    def gradient(self, x: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        return np.broadcast_to(n / np.linalg.norm(n), x.shape).copy()


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple
    light: tuple = (0.3, 0.8, 0.5)
    ambient: float = 0.2
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        for p in self.primitives:
            if np.any(np.asarray(p.albedo) < 0) or np.any(np.asarray(p.albedo) > 1):
                raise ValueError("albedo must lie in [0, 1]")

    def light_dir(self) -> np.ndarray:
        l = np.asarray(self.light, dtype=np.float64)
        return l / np.linalg.norm(l)


def _all_sdfs(scene: AnalyticScene, x: np.ndarray) -> np.ndarray:
    return np.stack([p.sdf(x) for p in scene.primitives], axis=-1)


def scene_sdf(scene: AnalyticScene, x) -> np.ndarray:
    """Union (min) of the primitive SDFs at ``(..., 3)`` points."""
    return _all_sdfs(scene, np.asarray(x, dtype=np.float64)).min(axis=-1)


def scene_gradient(scene: AnalyticScene, x) -> np.ndarray:
    """Analytic gradient of the closest primitive."""
    x = np.asarray(x, dtype=np.float64)
    which = _all_sdfs(scene, x).argmin(axis=-1)
    out = np.zeros(x.shape)
    for k, p in enumerate(scene.primitives):
        m = which == k
        if np.any(m):
            out[m] = p.gradient(x[m])
    return out


def camera_sdf(scene: AnalyticScene, cam_to_world: Pose, x_cam) -> np.ndarray:
    """The scene's SDF expressed in a camera frame."""
    return scene_sdf(scene, cam_to_world.apply(x_cam))


def sphere_trace(scene: AnalyticScene, origins, dirs, max_depth: float, tol: float = TRACE_TOL,
                 max_iter: int = TRACE_ITERS) -> tuple[np.ndarray, np.ndarray]:
    """March ``h += max(s, tol / 2)`` until ``s < tol`` (hit) or ``h > max_depth``.

    Works on single rays ``(3,)`` or batches ``(N, 3)``; returns ``(hit, depth)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    single = d.ndim == 1
    o, d = np.atleast_2d(o), np.atleast_2d(d)
    o = np.broadcast_to(o, d.shape)
    n = len(d)
    h = np.zeros(n)
    hit = np.zeros(n, bool)
    active = np.ones(n, bool)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        s = scene_sdf(scene, o[idx] + h[idx, None] * d[idx])
        done = s < tol
        hit[idx[done]] = True
        step = np.maximum(s[~done], tol / 2)
        h[idx[~done]] += step
        active[idx[done]] = False
        active[idx[~done][h[idx[~done]] > max_depth]] = False
    hit &= h <= max_depth
    if single:
        return bool(hit[0]), float(h[0])
    return hit, h


def shade(scene: AnalyticScene, x, d=None) -> np.ndarray:
    """Lambertian color at surface points; the view direction is ignored."""
    x = np.asarray(x, dtype=np.float64)
    which = _all_sdfs(scene, x).argmin(axis=-1)
    n = scene_gradient(scene, x)
    albedo = np.asarray([p.albedo for p in scene.primitives], dtype=np.float64)[which]
    lam = np.maximum(0.0, n @ scene.light_dir())
    c = albedo * (scene.ambient + (1.0 - scene.ambient) * lam)[..., None]
    return np.clip(c, 0.0, 1.0)


# ------------------------------------------------------------------ profiles


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``position`` looking at ``target`` (+y down in the image)."""
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), position)


def se3_exp(w, v) -> Pose:
    """Closed-form ``exp`` of the twist ``(w, v)`` as a pose."""
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    th = float(np.linalg.norm(w))
    K = skew(w)
    if th < 1e-8:
        V = np.eye(3) + 0.5 * K + K @ K / 6.0
    else:
        V = np.eye(3) + (1 - math.cos(th)) / th**2 * K + (th - math.sin(th)) / th**3 * (K @ K)
    return Pose(rotvec_to_matrix(w), V @ v)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


@dataclass(frozen=True)
class VelocityProfile:
    """Camera motion over normalized time [-1, 1].

    kinds:
      ``constant``: body velocities ``omega``, ``vel`` from ``start``.
      ``dolly``: ``constant`` without rotation.
      ``orbit``: look-at orbit of ``radius`` at ``elevation`` around
      ``center``, sweeping ``arc`` radians starting at azimuth ``azimuth0``.
      ``piecewise``: body velocities interpolated with a smoothstep between
      ``knots`` (times) and ``values`` (rows of omega ++ vel).
    """

    kind: str = "orbit"
    omega: tuple = (0.0, 0.0, 0.0)
    vel: tuple = (0.0, 0.0, 0.0)
    start: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (0.0, 0.0, 0.0))
    radius: float = 3.0
    elevation: float = 0.3
    arc: float = math.pi / 2
    azimuth0: float = 0.0
    center: tuple = (0.0, 0.0, 0.0)
    knots: tuple = ()
    values: tuple = ()
    rk4_steps: int = 1000

    def __post_init__(self):
        if self.kind not in ("constant", "dolly", "orbit", "piecewise"):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.kind == "piecewise" and (len(self.knots) < 1 or len(self.knots) != len(self.values)):
            raise ValueError("piecewise profile needs matching knots and values")

    def start_pose(self) -> Pose:
        if self.kind == "orbit":
            return self._orbit_pose(-1.0)
        s = np.asarray(self.start, dtype=np.float64)
        return Pose(s[:3].T, s[3])  # rows: x, y, z camera axes in world, then position

    def _azimuth(self, t: float) -> float:
        return self.azimuth0 + self.arc * (t + 1.0) / 2.0

    def _orbit_pose(self, t: float) -> Pose:
        a, e, r = self._azimuth(t), self.elevation, self.radius
        c = np.asarray(self.center, dtype=np.float64)
        pos = c + r * np.array([math.cos(e) * math.sin(a), math.sin(e), math.cos(e) * math.cos(a)])
        return look_at(pos, c)

    def velocity(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Body-frame ``(w_c, v_c)`` at time t."""
        if self.kind in ("constant", "dolly"):
            w = np.zeros(3) if self.kind == "dolly" else np.asarray(self.omega, dtype=np.float64)
            return w, np.asarray(self.vel, dtype=np.float64)
        if self.kind == "orbit":
            P = self._orbit_pose(t)
            w_world = np.array([0.0, self.arc / 2.0, 0.0])
            rel = P.translation - np.asarray(self.center, dtype=np.float64)
            return P.rotation.T @ w_world, P.rotation.T @ np.cross(w_world, rel)
        knots = np.asarray(self.knots, dtype=np.float64)
        vals = np.asarray(self.values, dtype=np.float64)
        if t <= knots[0]:
            row = vals[0]
        elif t >= knots[-1]:
            row = vals[-1]
        else:
            k = int(np.searchsorted(knots, t, side="right")) - 1
            u = _smoothstep((t - knots[k]) / (knots[k + 1] - knots[k]))
            row = vals[k] + u * (vals[k + 1] - vals[k])
        return row[:3].copy(), row[3:].copy()


def rk4_pose(profile: VelocityProfile, t: float, steps: int | None = None) -> Pose:
    """Integrate the camera-to-world ODE from -1 to t with classic RK4."""
    n = steps or profile.rk4_steps
    P0 = profile.start_pose()
    R, p = P0.rotation.copy(), P0.translation.copy()
    if t <= -1.0:
        return P0
    h = (t + 1.0) / n

    def f(tt, R, p):
        w, v = profile.velocity(tt)
        return R @ skew(w), R @ v

    tt = -1.0
    for _ in range(n):
        k1 = f(tt, R, p)
        k2 = f(tt + h / 2, R + h / 2 * k1[0], p + h / 2 * k1[1])
        k3 = f(tt + h / 2, R + h / 2 * k2[0], p + h / 2 * k2[1])
        k4 = f(tt + h, R + h * k3[0], p + h * k3[1])
        R = R + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        p = p + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        tt += h
    U, _, Vt = np.linalg.svd(R)  # back onto SO(3)
    return Pose(U @ Vt, p)


def pose_at(profile: VelocityProfile, t: float) -> Pose:
    """Camera-to-world pose at normalized time t."""
    if profile.kind == "orbit":
        return profile._orbit_pose(t)
    if profile.kind in ("constant", "dolly"):
        w, v = profile.velocity(t)
        P0 = profile.start_pose()
        return P0 @ se3_exp(w * (t + 1.0), v * (t + 1.0))
    return rk4_pose(profile, t)


def ground_truth_pose(profile: VelocityProfile, i: int, T: int) -> Pose:
    if not 0 <= i < T:
        raise IndexError(f"frame {i} outside [0, {T})")
    return pose_at(profile, float(normalized_times(T)[i]))


def ground_truth_trajectory(profile: VelocityProfile, T: int) -> Trajectory:
    times = normalized_times(T)
    return Trajectory(times, tuple(pose_at(profile, float(t)) for t in times))


# ------------------------------------------------------------------- datasets


@dataclass(frozen=True)
class GeneratorConfig:
    T: int = 24
    K: Intrinsics = field(default_factory=lambda: Intrinsics(48.0, 48.0, 24.0, 24.0, 48, 48))
    near: float = 1.0
    far: float = 6.5
    seed: int = 0
    depth_png_scale: float = 1000.0
    supersample: int = 1  # color samples per pixel side; 1 renders pixel centres only


SPHERE_ALBEDO = (0.9, 0.45, 0.25)
GROUND_ALBEDO = (0.35, 0.6, 0.85)


def orbiter_scene() -> AnalyticScene:
    """Unit sphere on a finite ground slab whose top face is the plane y = -1.

    The slab keeps every surface inside the [near, far] range of the
    orbiter cameras.
    """
    return AnalyticScene(
        primitives=(
            Sphere((0.0, 0.0, 0.0), 1.0, albedo=SPHERE_ALBEDO),
            Box((0.0, -1.25, 0.0), (2.0, 0.25, 2.0), albedo=GROUND_ALBEDO),
        ),
        light=(0.4, 1.0, 0.6),
        ambient=0.2,
        background=(0.0, 0.0, 0.0),
    )


def orbiter_plane_scene() -> AnalyticScene:
    """The same sphere over an unbounded ground plane y = -1."""
    return AnalyticScene(
        primitives=(
            Sphere((0.0, 0.0, 0.0), 1.0, albedo=SPHERE_ALBEDO),
            Plane((0.0, 1.0, 0.0), -1.0, albedo=GROUND_ALBEDO),
        ),
        light=(0.4, 1.0, 0.6),
        ambient=0.2,
        background=(0.0, 0.0, 0.0),
    )


def orbiter_profile() -> VelocityProfile:
    return VelocityProfile(kind="orbit", radius=3.0, elevation=0.3, arc=math.pi / 2)


PRESETS = {"orbiter": (orbiter_scene, orbiter_profile), "orbiter-plane": (orbiter_plane_scene, orbiter_profile)}


def render_frame(scene: AnalyticScene, cam_to_world: Pose, K: Intrinsics, far: float,
                 supersample: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Image ``(H, W, 3)`` and along-ray depth ``(H, W)`` (0 where nothing is hit within ``far``).

    Colors are box-filtered over a ``supersample x supersample`` grid inside
    each pixel so silhouettes are anti-aliased; depth is traced through the
    pixel centre.
    """
    rows, cols = K.pixel_grid()
    n = max(int(supersample), 1)
    offsets = (np.arange(n) + 0.5) / n - 0.5
    o, R = cam_to_world.translation, cam_to_world.rotation
    color = np.zeros((len(rows), 3))
    for dr in offsets:
        for dc in offsets:
            d = K.directions(rows + dr, cols + dc) @ R.T
            hit, h = sphere_trace(scene, o, d, far)
            c = np.tile(np.asarray(scene.background, dtype=np.float64), (len(d), 1))
            if hit.any():
                c[hit] = shade(scene, o + h[hit, None] * d[hit], d[hit])
            color += c
    color /= n * n
    hit, h = sphere_trace(scene, o, K.directions(rows, cols) @ R.T, far)
    depth = np.where(hit, h, 0.0)
    return color.reshape(K.height, K.width, 3), depth.reshape(K.height, K.width)


def generate_dataset(scene: AnalyticScene, profile: VelocityProfile, cfg: GeneratorConfig, out_dir) -> dict:
    """Render every frame and write the dataset directory. Returns the meta dict."""
    out = Path(out_dir)
    traj = ground_truth_trajectory(profile, cfg.T)
    for i, P in enumerate(traj.poses):
        img, depth = render_frame(scene, P, cfg.K, cfg.far, cfg.supersample)
        write_png(out / "images" / f"{i:04d}.png", img)
        write_pfm(out / "depth" / f"{i:04d}.pfm", depth)
        write_png16_depth(out / "depth_png" / f"{i:04d}.png", depth, cfg.depth_png_scale)
    write_trajectory(traj, out / "gt_traj.txt")
    write_intrinsics(out / "intrinsics.txt", cfg.K)
    meta = {
        "T": cfg.T,
        "near": cfg.near,
        "far": cfg.far,
        "seed": cfg.seed,
        "depth": "distance along the unit ray direction; 0 = no hit",
        "depth_png_scale": cfg.depth_png_scale,
        "scene": _echo(scene),
        "profile": _echo(profile),
    }
    atomic_write_text(out / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def _echo(obj) -> dict:
    d = asdict(obj)
    if isinstance(obj, AnalyticScene):
        d["primitives"] = [{"type": type(p).__name__.lower(), **asdict(p)} for p in obj.primitives]
    return d
