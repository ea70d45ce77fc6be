"""Two-stage optimization, test-pose registration, view rendering and checkpoints."""

from __future__ import annotations

import dataclasses
import math
import os
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore
from .camera import Intrinsics
from .field import FieldConfig, FieldNetworks, sample_ray_depths
from .fileio import ConfigError, TrainingData, atomic_write_text, format_value, load_arrays, save_arrays, apply_config
from .geometry import Pose, pose_inverse, rotvec_to_matrix
from .losses import (
    LossWeights,
    edge_mask,
    loss_eikonal,
    loss_flow,
    loss_photo,
    loss_rgb,
    loss_sdf_consistency,
    top_weight_samples,
    total_loss,
)
from .motion import FrameChain, IntegrationConfig, MotionNetwork, pose_between

CSV_HEADER = "epoch,stage,L_rgb,L_eik,L_flow,L_photo,L_sdf,total,lambda_sdf_effective"


class NotConverged(UserWarning):
    pass


@dataclass(frozen=True)
class TrainConfig:
    rays_per_batch: int = 1024
    samples_per_ray: int = 128
    near: float = 0.0  # 0: take near/far from the dataset
    far: float = 0.0
    lr: float = 1e-3
    stage2_lr_floor: float = 0.1  # cosine decay ends at this fraction of lr
    stage1_epochs: int = 600
    stage2_epochs: int = 5000
    early_stop: bool = False
    early_stop_patience: int = 50
    early_stop_rel: float = 1e-4
    substeps: int = 10
    world_frame: int = -1  # -1: middle training frame
    neighbor_offsets: tuple = (-2, -1, 1, 2)
    lambda_eik: float = 0.1
    lambda_flow: float = 0.1
    lambda_photo: float = 1.0
    lambda_sdf: float = 0.1
    zero_until_epoch: int = 200
    ramp_epochs: int = 200
    flow_samples: int = 0  # per ray, by rendering weight; 0 uses every sample
    photo_min_opacity: float = 0.5
    photo_edge_threshold: float = 0.2  # source pixels on stronger edges skip the photo term
    fd_eps: float = 1e-4
    sdf_hidden: int = 128
    sdf_layers: int = 4
    sdf_skip: int = 2
    feature_dim: int = 64
    color_hidden: int = 64
    color_layers: int = 3
    x_octaves: int = 6
    d_octaves: int = 4
    t_octaves: int = 4
    softplus_beta: float = 100.0
    gamma_init: float = 10.0
    init_radius: float = 0.5
    motion_hidden: int = 128
    motion_layers: int = 4
    motion_octaves: int = 6
    motion_output_scale: float = 4.0  # scene units per unit normalized time of one raw output
    background: tuple = (0.0, 0.0, 0.0)
    register_iters: int = 300
    register_rays: int = 256
    register_lr: float = 0.01
    render_chunk: int = 512
    test_every: int = 8
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.rays_per_batch < 1:
            raise ConfigError("rays_per_batch must be >= 1")
        if self.samples_per_ray < 2:
            raise ConfigError("samples_per_ray must be >= 2")
        if (self.near or self.far) and not 0 < self.near < self.far:
            raise ConfigError("need 0 < near < far")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_eik, self.lambda_flow, self.lambda_photo, self.lambda_sdf,
                           self.zero_until_epoch, self.ramp_epochs)

    def is_deterministic(self) -> bool:
        return self.deterministic or os.environ.get("COPE_DETERMINISTIC") == "1"


# Laptop-sized settings used by the acceptance run; everything else keeps
# the defaults above.
DESK_PRESET = {
    "rays_per_batch": 64,
    "samples_per_ray": 32,
    "stage1_epochs": 300,
    "stage2_epochs": 40,
    "flow_samples": 4,
    "sdf_hidden": 64,
    "feature_dim": 16,
    "color_hidden": 32,
    "color_layers": 2,
    "motion_hidden": 32,
    "register_iters": 100,
    "register_rays": 192,
    "zero_until_epoch": 200,
    "ramp_epochs": 100,
}


def preset_config(name: str = "default", **overrides) -> TrainConfig:
    if name == "default":
        base = TrainConfig()
    elif name == "desk":
        base = dataclasses.replace(TrainConfig(), **DESK_PRESET)
    else:
        raise ConfigError(f"unknown preset {name!r}")
    return dataclasses.replace(base, **overrides)


# ---------------------------------------------------------------------- model


class Model:
    """Field and motion networks over one parameter store, plus the timeline."""

    def __init__(self, cfg: TrainConfig, times, train_idx, K: Intrinsics, near: float, far: float,
                 store: ParameterStore | None = None):
        self.cfg = cfg
        self.times = np.asarray(times, dtype=np.float64)
        self.train_idx = np.asarray(train_idx, dtype=np.int64)
        self.K = K
        self.near = cfg.near or near
        self.far = cfg.far or far
        if cfg.world_frame >= 0:
            self.world_index = int(cfg.world_frame)
        else:
            self.world_index = int(self.train_idx[len(self.train_idx) // 2])
        self.stage, self.epoch = 0, 0
        self._edges: dict[int, np.ndarray] = {}
        self.store = store if store is not None else ParameterStore()
        fcfg = FieldConfig(
            hidden=cfg.sdf_hidden, layers=cfg.sdf_layers, skip=cfg.sdf_skip if cfg.sdf_skip >= 0 else None,
            feature_dim=cfg.feature_dim, color_hidden=cfg.color_hidden, color_layers=cfg.color_layers,
            x_octaves=cfg.x_octaves, d_octaves=cfg.d_octaves, t_octaves=cfg.t_octaves, beta=cfg.softplus_beta,
            center=(0.0, 0.0, 0.5 * (self.near + self.far)), scale=0.5 * (self.far - self.near),
            init_radius=cfg.init_radius, gamma_init=cfg.gamma_init, background=tuple(cfg.background),
            fd_eps=cfg.fd_eps,
        )
        self.field = FieldNetworks(fcfg, self.store, seed=cfg.seed)
        self.motion = MotionNetwork(self.store, octaves=cfg.motion_octaves, hidden=cfg.motion_hidden,
                                    layers=cfg.motion_layers, beta=cfg.softplus_beta, seed=cfg.seed + 1,
                                    output_scale=cfg.motion_output_scale)
        gaps = np.diff(self.times)
        self.integration = IntegrationConfig(cfg.substeps, float(gaps.min()) if len(gaps) else 1.0)

    @property
    def t_w(self) -> float:
        return float(self.times[self.world_index])

    def camera_to_world(self, i: int) -> Pose:
        """Pose of frame i in the world (= frame ``world_index``) camera coordinates."""
        return pose_between(self.motion, float(self.times[i]), self.t_w, self.integration)

    def trajectory_poses(self) -> list[Pose]:
        return [self.camera_to_world(i) for i in range(len(self.times))]

    def edges(self, data: TrainingData, i: int) -> np.ndarray:
        if i not in self._edges:
            self._edges[i] = edge_mask(data.images[i], self.cfg.photo_edge_threshold)
        return self._edges[i]

    def frustum_box(self) -> tuple[np.ndarray, np.ndarray]:
        K = self.K
        xs = np.array([-K.cx, K.width - 1 - K.cx]) / K.fx
        ys = np.array([-K.cy, K.height - 1 - K.cy]) / K.fy
        lo = np.array([self.far * xs.min(), self.far * ys.min(), self.near])
        hi = np.array([self.far * xs.max(), self.far * ys.max(), self.far])
        return lo, hi


# ------------------------------------------------------------------ utilities


class LossLog:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []

    @classmethod
    def load(cls, path, stages=(1, 2)) -> "LossLog":
        """Re-open an existing log, keeping rows of the given stages."""
        log = cls(path)
        for r in read_loss_csv(path):
            if r["stage"] in stages:
                comps = {n: r[f"L_{n}"] for n in ("rgb", "eik", "flow", "photo", "sdf")}
                log.add(r["epoch"], r["stage"], comps, r["total"], r["lambda_sdf_effective"])
        return log

    def add(self, epoch: int, stage: int, comps: dict, total: float, lam_sdf: float) -> None:
        self.rows.append({"epoch": epoch, "stage": stage, **comps, "total": total, "lambda_sdf": lam_sdf})

    def text(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            vals = [r.get(k, 0.0) for k in ("rgb", "eik", "flow", "photo", "sdf")]
            lines.append(",".join([str(r["epoch"]), str(r["stage"])] + [repr(float(v)) for v in vals]
                                  + [repr(float(r["total"])), repr(float(r["lambda_sdf"]))]))
        return "\n".join(lines) + "\n"

    def flush(self) -> None:
        if self.path:
            atomic_write_text(self.path, self.text())


def read_loss_csv(path) -> list[dict]:
    lines = Path(path).read_text().strip().splitlines()
    keys = lines[0].split(",")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        row = {k: float(v) for k, v in zip(keys, vals)}
        row["epoch"], row["stage"] = int(row["epoch"]), int(row["stage"])
        out.append(row)
    return out


def _pixel_batch(K: Intrinsics, n: int, rng: np.random.Generator):
    pix = rng.choice(K.width * K.height, size=min(n, K.width * K.height), replace=False)
    rows, cols = np.divmod(pix, K.width)
    return rows, cols


def _point_set(pts: np.ndarray, box, n: int, rng: np.random.Generator) -> np.ndarray:
    """Half re-used ray samples, half uniform in the box."""
    flat = pts.reshape(-1, 3)
    half = n // 2
    reuse = flat[rng.choice(len(flat), size=half, replace=False)]
    uni = box[0] + rng.random((n - half, 3)) * (box[1] - box[0])
    return np.concatenate([reuse, uni])


def _frame_neighbors(pos: int, n_train: int, offsets) -> list[int]:
    """Positions in the training sequence reached by ``offsets``, clipped at the ends."""
    return [pos + o for o in offsets if 0 <= pos + o < n_train]


def _cosine_lr(lr: float, floor: float, k: int, n: int) -> float:
    if n <= 1:
        return lr
    return lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * k / (n - 1))))


# -------------------------------------------------------------------- stage 1


def stage1_step(model: Model, data: TrainingData, pos: int, epoch: int, rng: np.random.Generator,
                lr: float | None = None) -> dict:
    """One joint update on training frame ``data.train_idx[pos]``. Returns component values."""
    cfg, f, mot = model.cfg, model.field, model.motion
    i = int(data.train_idx[pos])
    t = float(data.times[i])
    params = {**f.params(True), **mot.params(True)}
    weights = cfg.loss_weights()
    eff = weights.effective(epoch, 1)
    K = data.K
    rows, cols = _pixel_batch(K, cfg.rays_per_batch, rng)
    dirs = K.directions(rows, cols)
    R = len(rows)
    h = sample_ray_depths(model.near, model.far, cfg.samples_per_ray, rng, True, n_rays=R)
    target = data.images[i][rows, cols]
    pts = dirs[:, None, :] * h[..., None]
    box = model.frustum_box()
    xs = _point_set(pts, box, R, rng)
    neigh_pos = _frame_neighbors(pos, len(data.train_idx), cfg.neighbor_offsets)
    comps = {}
    with ad.Tape() as tape:
        out = f.render_rays(params, np.zeros((R, 3)), dirs, t, h)
        comps["rgb"] = loss_rgb(out["color"], target)
        if eff["eik"]:
            comps["eik"] = loss_eikonal(f, params, xs, t)
        if eff["flow"]:
            w = out["weights"].data
            if cfg.flow_samples > 0:
                idx = top_weight_samples(w, cfg.flow_samples)
                fp, fw = pts[np.arange(R)[:, None], idx], w[np.arange(R)[:, None], idx]
            else:
                fp, fw = pts, w
            vel = mot.forward(params, np.array([t]))[0]
            comps["flow"] = loss_flow(f, params, vel, fp, fw, t)
        need_chain = (eff["photo"] and neigh_pos) or (eff["sdf"] and i != model.world_index)
        chain = FrameChain(mot, params, data.times, cfg.substeps) if need_chain else None
        if eff["photo"] and neigh_pos:
            keep = out["opacity"].data >= cfg.photo_min_opacity
            keep &= ~model.edges(data, i)[rows, cols]
            if keep.any():
                sel = np.nonzero(keep)[0]
                neighbors = []
                for q in neigh_pos:
                    j = int(data.train_idx[q])
                    Rn, pn = chain.transform(i, j)
                    neighbors.append((Rn, pn, data.images[j]))
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    comps["photo"] = loss_photo(out["surface_point"][sel], target[sel], neighbors, K)
        if eff["sdf"]:
            if i == model.world_index:
                comps["sdf"] = ad.Tensor(np.array(0.0))
            else:
                comps["sdf"] = loss_sdf_consistency(f, params, xs, t, chain.transform(i, model.world_index), model.t_w)
        total, _ = total_loss(comps, weights, epoch, 1)
        tape.backward(total)
    grads = ad.gradients_by_name(params)
    ad.adam_step(model.store, grads, lr=cfg.lr if lr is None else lr)
    vals = {k: float(v.data) for k, v in comps.items()}
    vals["total"] = float(total.data)
    return vals


def _epoch_summary(rows: list[dict]) -> dict:
    keys = set().union(*rows)
    return {k: float(np.mean([r.get(k, 0.0) for r in rows])) for k in keys}


def train_stage1(model: Model, data: TrainingData, log: LossLog | None = None, epochs: int | None = None,
                 progress=None) -> Model:
    """Joint training of motion, SDF and color networks."""
    cfg = model.cfg
    if len(data.train_idx) < 3:
        raise ValueError("stage 1 needs at least 3 training frames")
    log = log or LossLog()
    weights = cfg.loss_weights()
    rng = np.random.default_rng(cfg.seed)
    n_epochs = cfg.stage1_epochs if epochs is None else epochs
    best, since = math.inf, 0
    model.stage = 1
    for epoch in range(n_epochs):
        rows = [stage1_step(model, data, int(pos), epoch, rng) for pos in rng.permutation(len(data.train_idx))]
        s = _epoch_summary(rows)
        log.add(epoch, 1, {k: s.get(k, 0.0) for k in ("rgb", "eik", "flow", "photo", "sdf")}, s["total"],
                weights.sdf_weight(epoch))
        model.epoch = epoch + 1
        if progress:
            progress(1, epoch, s)
        if cfg.early_stop:
            if s["total"] < best * (1.0 - cfg.early_stop_rel):
                best, since = s["total"], 0
            else:
                since += 1
                if since >= cfg.early_stop_patience:
                    break
    log.flush()
    return model


# -------------------------------------------------------------------- stage 2


def cached_world_poses(model: Model, frames) -> dict[int, Pose]:
    return {int(i): model.camera_to_world(int(i)) for i in frames}


def train_stage2(model: Model, data: TrainingData, log: LossLog | None = None, epochs: int | None = None,
                 progress=None) -> Model:
    """Field-only training at the world time with frozen, cached poses."""
    cfg, f = model.cfg, model.field
    log = log or LossLog()
    rng = np.random.default_rng(cfg.seed + 1000)
    poses = cached_world_poses(model, data.train_idx)
    names = f.param_names()
    model.store.reset_optimizer()
    n_epochs = cfg.stage2_epochs if epochs is None else epochs
    n_steps = n_epochs * len(data.train_idx)
    weights = cfg.loss_weights()
    lo, hi = model.frustum_box()
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    K, t_w = data.K, model.t_w
    model.stage = 2
    step = 0
    for epoch in range(n_epochs):
        rows_log = []
        for pos in rng.permutation(len(data.train_idx)):
            i = int(data.train_idx[pos])
            P = poses[i]
            rows, cols = _pixel_batch(K, cfg.rays_per_batch, rng)
            dirs = K.directions(rows, cols) @ P.rotation.T
            R = len(rows)
            origins = np.broadcast_to(P.translation, (R, 3))
            h = sample_ray_depths(model.near, model.far, cfg.samples_per_ray, rng, True, n_rays=R)
            pts = origins[:, None, :] + dirs[:, None, :] * h[..., None]
            wc = P.apply(corners)
            xs = _point_set(pts, (wc.min(0), wc.max(0)), R, rng)
            params = f.params(True)
            comps = {}
            with ad.Tape() as tape:
                out = f.render_rays(params, origins, dirs, t_w, h)
                comps["rgb"] = loss_rgb(out["color"], data.images[i][rows, cols])
                if weights.lambda_eik:
                    comps["eik"] = loss_eikonal(f, params, xs, t_w)
                total, eff = total_loss(comps, weights, epoch, 2)
                tape.backward(total)
            lr = _cosine_lr(cfg.lr, cfg.stage2_lr_floor, step, n_steps)
            ad.adam_step(model.store, ad.gradients_by_name(params), lr=lr, names=names)
            step += 1
            rows_log.append({**{k: float(v.data) for k, v in comps.items()}, "total": float(total.data)})
        s = _epoch_summary(rows_log)
        log.add(epoch, 2, {k: s.get(k, 0.0) for k in ("rgb", "eik", "flow", "photo", "sdf")}, s["total"], eff["sdf"])
        model.epoch = epoch + 1
        if progress:
            progress(2, epoch, s)
    log.flush()
    return model


# ------------------------------------------------------------- registration


@dataclass
class RegistrationResult:
    pose: Pose
    loss: float
    iterations: int
    converged: bool


def _render_pose_batch(model: Model, params, R_c2w, p_c2w, rows, cols, rng, stratified=True):
    K = model.K
    d_cam = K.directions(rows, cols)
    dirs = ad.matmul(d_cam, ad.swapaxes(R_c2w, 0, 1))
    n = len(rows)
    origins = ad.broadcast_to(p_c2w, (n, 3))
    if stratified:
        h = sample_ray_depths(model.near, model.far, model.cfg.samples_per_ray, rng, True, n_rays=n)
    else:
        h = np.broadcast_to(sample_ray_depths(model.near, model.far, model.cfg.samples_per_ray, None, False), (n, model.cfg.samples_per_ray))
    return model.field.render_rays(params, origins, dirs, model.t_w, h)


def register_test_pose(model: Model, image: np.ndarray, init_frame: int, iters: int | None = None,
                       seed: int | None = None) -> RegistrationResult:
    """Fit a pose for ``image`` with the field frozen, starting from frame ``init_frame``.

    The pose is ``(exp(r) R0, p0 + dp)`` around the initial camera-to-world
    pose; Adam minimizes the color loss on random pixel subsets and the
    best-loss iterate is returned.
    """
    cfg = model.cfg
    iters = cfg.register_iters if iters is None else iters
    rng = np.random.default_rng(cfg.seed + 2000 if seed is None else seed)
    P0 = model.camera_to_world(init_frame)
    if iters <= 0:
        return RegistrationResult(P0, math.nan, 0, True)
    store = ParameterStore({"delta.r": np.zeros(3), "delta.p": np.zeros(3)})
    params_f = model.field.params(False)
    best, best_pose, history = math.inf, P0, []
    for k in range(iters):
        leaves = store.leaves("delta", True)
        rows, cols = _pixel_batch(model.K, cfg.register_rays, rng)
        with ad.Tape() as tape:
            Rot = ad.matmul(ad.rotvec_to_matrix(leaves["delta.r"]), P0.rotation)
            pos = leaves["delta.p"] + P0.translation
            out = _render_pose_batch(model, params_f, Rot, pos, rows, cols, rng)
            loss = loss_rgb(out["color"], image[rows, cols])
            tape.backward(loss)
        val = float(loss.data)
        history.append(val)
        if val < best:
            best = val
            best_pose = Pose(Rot.data, pos.data)
        ad.adam_step(store, ad.gradients_by_name(leaves), lr=cfg.register_lr)
    tail = history[-max(2, iters // 5):]
    converged = (max(tail) - min(tail)) <= 0.05 * max(best, 1e-12) or iters < 10
    if not converged:
        warnings.warn(f"pose registration still moving after {iters} iterations", NotConverged, stacklevel=2)
    return RegistrationResult(best_pose, best, iters, converged)


def nearest_training_frame(train_idx, i: int) -> int:
    train_idx = np.asarray(train_idx)
    return int(train_idx[np.argmin(np.abs(train_idx - i))])


# ------------------------------------------------------------------- render


def render_views(model: Model, poses, K: Intrinsics | None = None, chunk: int | None = None):
    """Render camera-to-world ``poses`` at the world time.

    Returns arrays of images ``(N, H, W, 3)``, depths ``(N, H, W)`` and
    opacities ``(N, H, W)``. Sample depths are bin midpoints, so renders
    are deterministic.
    """
    K = K or model.K
    chunk = chunk or model.cfg.render_chunk
    params = model.field.params(False)
    rows, cols = K.pixel_grid()
    d_cam = K.directions(rows, cols)
    h1 = sample_ray_depths(model.near, model.far, model.cfg.samples_per_ray, None, False)
    imgs, depths, ops = [], [], []
    for P in poses:
        dirs = d_cam @ P.rotation.T
        c, dep, op = [], [], []
        for s in range(0, len(dirs), chunk):
            d = dirs[s:s + chunk]
            n = len(d)
            out = model.field.render_rays(params, np.broadcast_to(P.translation, (n, 3)), d, model.t_w,
                                          np.broadcast_to(h1, (n, len(h1))))
            c.append(out["color"].data)
            dep.append(out["depth"].data)
            op.append(out["opacity"].data)
        imgs.append(np.concatenate(c).reshape(K.height, K.width, 3))
        depths.append(np.concatenate(dep).reshape(K.height, K.width))
        ops.append(np.concatenate(op).reshape(K.height, K.width))
    return np.stack(imgs), np.stack(depths), np.stack(ops)


# --------------------------------------------------------------- checkpoints


def config_echo(cfg: TrainConfig) -> dict[str, str]:
    return {f.name: format_value(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


def save_checkpoint(model: Model, stem) -> None:
    """Write ``stem.txt`` + ``stem.bin`` atomically."""
    s = model.store
    K = model.K
    header = {
        "stage": str(model.stage),
        "epoch": str(model.epoch),
        "adam.step": str(s.step),
        "world_index": str(model.world_index),
        "near": repr(float(model.near)),
        "far": repr(float(model.far)),
        "intrinsics": " ".join(repr(float(v)) for v in (K.fx, K.fy, K.cx, K.cy, K.width, K.height)),
    }
    header.update({f"config.{k}": v for k, v in config_echo(model.cfg).items()})
    sections = {
        "timeline": {"times": model.times, "train_idx": model.train_idx.astype(np.float64)},
        "param": dict(s.params),
        "adam.m": dict(s.m),
        "adam.v": dict(s.v),
    }
    save_arrays(stem, sections, header)


def load_checkpoint(stem) -> Model:
    sections, header = load_arrays(stem)
    cfg = apply_config(TrainConfig(), {k[7:]: v for k, v in header.items() if k.startswith("config.")})
    store = ParameterStore()
    for name, arr in sections["param"].items():
        store.add(name, arr.copy())
        store.m[name][...] = sections["adam.m"][name]
        store.v[name][...] = sections["adam.v"][name]
    store.step = int(header["adam.step"])
    fx, fy, cx, cy, w, h = (float(v) for v in header["intrinsics"].split())
    K = Intrinsics(fx, fy, cx, cy, int(w), int(h))
    tl = sections["timeline"]
    model = Model(cfg, tl["times"], tl["train_idx"].astype(np.int64), K, float(header["near"]),
                  float(header["far"]), store)
    model.world_index = int(header["world_index"])
    model.stage, model.epoch = int(header["stage"]), int(header["epoch"])
    return model
