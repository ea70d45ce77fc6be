import numpy as np
import pytest

from velosdf.camera import Intrinsics
from velosdf.synthetic import (
    AnalyticScene,
    GeneratorConfig,
    Plane,
    Sphere,
    VelocityProfile,
    generate_dataset,
    orbiter_profile,
    orbiter_scene,
)


@pytest.fixture(scope="session")
def orbiter_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("orbiter")
    generate_dataset(orbiter_scene(), orbiter_profile(), GeneratorConfig(), out)
    return out


def small_scene_config():
    scene = AnalyticScene(
        (Sphere((0.0, 0.0, 0.0), 0.8, albedo=(0.9, 0.4, 0.2)), Plane((0.0, 1.0, 0.0), -0.8, albedo=(0.3, 0.6, 0.9))),
        light=(0.4, 1.0, 0.6),
    )
    prof = VelocityProfile(kind="orbit", radius=2.5, elevation=0.3, arc=0.4)
    cfg = GeneratorConfig(T=9, K=Intrinsics(16.0, 16.0, 8.0, 8.0, 16, 16), near=0.8, far=4.5)
    return scene, prof, cfg


@pytest.fixture(scope="session")
def small_dir(tmp_path_factory):
    """A 9-frame 16x16 dataset for fast training smoke tests."""
    out = tmp_path_factory.mktemp("small")
    generate_dataset(*small_scene_config(), out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- desk-scale runs

DESK_SEEDS = (0, 1, 2)


class DeskRuns:
    """Criterion-7 pipeline runs: one per seed plus a repeat of the first seed."""

    def __init__(self, dataset, dirs, records, seconds, rerun_dir, rerun_record):
        self.dataset = dataset
        self.dirs = dirs
        self.records = records
        self.seconds = seconds
        self.rerun_dir = rerun_dir
        self.rerun_record = rerun_record

    def median(self, key):
        return float(np.median([self.records[s][key] for s in DESK_SEEDS]))


def _run_desk(dataset, seed, out):
    import time

    from velosdf.pipeline import run_all
    from velosdf.trainer import preset_config

    start = time.perf_counter()
    rec = run_all(dataset, preset_config("desk", seed=seed), out)
    return rec, time.perf_counter() - start


@pytest.fixture(scope="session")
def desk_runs(orbiter_dir, tmp_path_factory):
    from velosdf.fileio import load_dataset

    dataset = load_dataset(orbiter_dir)
    root = tmp_path_factory.mktemp("desk")
    dirs, records, seconds = {}, {}, {}
    for seed in DESK_SEEDS:
        dirs[seed] = root / f"seed{seed}"
        records[seed], seconds[seed] = _run_desk(dataset, seed, dirs[seed])
    rerun = root / f"seed{DESK_SEEDS[0]}-again"
    rerun_record, _ = _run_desk(dataset, DESK_SEEDS[0], rerun)
    return DeskRuns(dataset, dirs, records, seconds, rerun, rerun_record)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
