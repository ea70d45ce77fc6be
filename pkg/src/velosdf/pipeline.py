"""End-to-end run: train both stages, register test views, render and evaluate."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .fileio import (
    SceneDataset,
    atomic_write_text,
    format_config,
    read_trajectory,
    write_pfm,
    write_png,
    write_trajectory,
)
from .geometry import Trajectory
from .metrics import DepthMetrics, depth_metrics, dumps_metrics, metrics_record, pose_metrics, psnr, ssim
from .trainer import (
    LossLog,
    Model,
    TrainConfig,
    load_checkpoint,
    nearest_training_frame,
    register_test_pose,
    render_views,
    save_checkpoint,
    train_stage1,
    train_stage2,
)


def train(dataset: SceneDataset, cfg: TrainConfig, out_dir, stage: int | None = None, progress=None) -> Model:
    """Run stage 1, stage 2, or both (``stage=None``) and write checkpoints and logs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.txt", format_config(cfg))
    data = dataset.training_view()
    log_path = out / "losses.csv"
    if stage in (None, 1):
        log = LossLog(log_path)
        model = Model(cfg, data.times, data.train_idx, data.K, data.near, data.far)
        train_stage1(model, data, log, progress=progress)
        save_checkpoint(model, out / "stage1")
    else:
        log = LossLog.load(log_path, stages=(1,)) if log_path.exists() else LossLog(log_path)
        model = load_checkpoint(out / "stage1")
    if stage in (None, 2):
        train_stage2(model, data, log, progress=progress)
        save_checkpoint(model, out / "stage2")
    write_trajectory(Trajectory(model.times, tuple(model.trajectory_poses())), out / "traj.txt")
    return model


def latest_checkpoint(run_dir) -> Path:
    run = Path(run_dir)
    for name in ("stage2", "stage1"):
        if (run / f"{name}.txt").exists():
            return run / name
    raise FileNotFoundError(f"no checkpoint in {run}")


def register_poses(model: Model, dataset: SceneDataset, out_dir) -> Trajectory:
    """Register every test frame, starting from its nearest training frame."""
    poses = []
    for i in dataset.test_idx:
        init = nearest_training_frame(dataset.train_idx, int(i))
        res = register_test_pose(model, dataset.images[i], init, seed=model.cfg.seed + 2000 + int(i))
        poses.append(res.pose)
    traj = Trajectory(dataset.times[dataset.test_idx], tuple(poses))
    write_trajectory(traj, Path(out_dir) / "test_poses.txt")
    return traj


def render_test_views(model: Model, test_traj: Trajectory, out_dir):
    images, depths, ops = render_views(model, test_traj.poses)
    out = Path(out_dir)
    for k, (img, d) in enumerate(zip(images, depths)):
        write_png(out / "renders" / f"test_{k:04d}.png", img)
        write_pfm(out / "renders" / f"test_{k:04d}.pfm", d)
    return images, depths, ops


def evaluate(model: Model, dataset: SceneDataset, test_traj: Trajectory, out_dir) -> dict:
    """Write ``metrics.json``: image and depth metrics on test frames, pose metrics on all frames."""
    images, depths, _ = render_test_views(model, test_traj, out_dir)
    ps, ss, dm = [], [], []
    for k, i in enumerate(dataset.test_idx):
        gt = dataset.images[i]
        ps.append(psnr(np.clip(images[k], 0, 1), gt))
        ss.append(ssim(np.clip(images[k], 0, 1), gt))
        if dataset.gt_depths is not None:
            dm.append(depth_metrics(depths[k], dataset.gt_depths[i]))
    depth = None
    if dm:
        depth = DepthMetrics(*(float(np.mean([getattr(d, f) for d in dm])) for f in ("abrel", "sqrel", "delta1")))
    pose = None
    if dataset.gt_traj is not None:
        pred = Trajectory(model.times, tuple(model.trajectory_poses()))
        pose = pose_metrics(pred, dataset.gt_traj)
    rec = metrics_record({"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}, depth, pose, len(dataset.test_idx))
    atomic_write_text(Path(out_dir) / "metrics.json", dumps_metrics(rec))
    return rec


def run_all(dataset: SceneDataset, cfg: TrainConfig, out_dir, progress=None) -> dict:
    model = train(dataset, cfg, out_dir, progress=progress)
    test_traj = register_poses(model, dataset, out_dir)
    return evaluate(model, dataset, test_traj, out_dir)
