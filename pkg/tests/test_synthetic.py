import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from velosdf.camera import Intrinsics
from velosdf.fileio import read_pfm, read_png
from velosdf.geometry import pose_compose, pose_inverse
from velosdf.synthetic import (
    TRACE_TOL,
    AnalyticScene,
    Box,
    GeneratorConfig,
    Plane,
    Sphere,
    VelocityProfile,
    camera_sdf,
    generate_dataset,
    ground_truth_pose,
    ground_truth_trajectory,
    look_at,
    orbiter_plane_scene,
    orbiter_profile,
    orbiter_scene,
    pose_at,
    rk4_pose,
    scene_gradient,
    scene_sdf,
    shade,
    sphere_trace,
)

UNIT = AnalyticScene((Sphere((0.0, 0.0, 0.0), 1.0),))


def test_scene_sdf_examples():
    assert scene_sdf(UNIT, [2.0, 0, 0]) == 1.0
    assert scene_sdf(UNIT, [0.0, 0, 0]) == -1.0
    plane = AnalyticScene((Plane((0.0, 1.0, 0.0), 0.0),))
    assert scene_sdf(plane, [5.0, -2.0, 3.0]) == -2.0
    box = AnalyticScene((Box((0.0, 0, 0), (1.0, 2.0, 3.0)),))
    assert scene_sdf(box, [4.0, 0, 0]) == 3.0 and scene_sdf(box, [0.0, 0, 0]) == -1.0
    assert np.isclose(scene_sdf(box, [2.0, 3.0, 0]), np.sqrt(2))
    both = AnalyticScene((Sphere((0.0, 0, 0), 1.0), Sphere((5.0, 0, 0), 1.0)))
    assert scene_sdf(both, [4.5, 0, 0]) == -0.5


def test_albedo_validated():
    with pytest.raises(ValueError):
        AnalyticScene((Sphere((0.0, 0, 0), 1.0, albedo=(1.2, 0, 0)),))


def test_gradient_is_unit_outside_primitives():
    scene = orbiter_plane_scene()
    rng = np.random.default_rng(0)
    x = rng.uniform(-3, 3, (3000, 3))
    x = x[scene_sdf(scene, x) > 1e-3][:1000]
    assert len(x) == 1000
    g = scene_gradient(scene, x)
    assert np.abs(np.linalg.norm(g, axis=1) - 1).max() < 1e-9
    # and it matches central differences of the SDF away from the union seam
    s = np.stack([scene.primitives[k].sdf(x) for k in range(2)], 1)
    away = np.abs(s[:, 0] - s[:, 1]) > 1e-3
    h = 1e-6
    fd = np.stack([(scene_sdf(scene, x + h * e) - scene_sdf(scene, x - h * e)) / (2 * h) for e in np.eye(3)], 1)
    assert np.abs(fd[away] - g[away]).max() < 1e-6


def test_sphere_trace_examples():
    hit, d = sphere_trace(UNIT, np.array([0.0, 0, -3]), np.array([0.0, 0, 1]), 10.0)
    assert hit and abs(d - 2.0) < TRACE_TOL
    hit, _ = sphere_trace(UNIT, np.array([0.0, 0, -3]), np.array([0.0, 0, -1]), 10.0)
    assert not hit
    # grazing ray: the quadratic |o + h d|^2 = 1 gives the analytic entry depth
    o, d = np.array([0.999, 0.0, -3.0]), np.array([0.0, 0.0, 1.0])
    hit, h = sphere_trace(UNIT, o, d, 10.0)
    b, c = o @ d, o @ o - 1.0
    exact = -b - np.sqrt(b * b - c)
    assert hit and abs(h - exact) < 0.02 * exact
    with pytest.raises(ValueError):
        sphere_trace(UNIT, o, d, 10.0, tol=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_sphere_trace_hits_lie_on_surface(seed):
    rng = np.random.default_rng(seed)
    scene = orbiter_scene()
    o = np.array([0.0, 1.0, 3.5])
    d = rng.normal(size=(200, 3)) * 0.3 + [0, -0.4, -1]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    hit, h = sphere_trace(scene, o, d, 8.0)
    assert np.all(np.abs(scene_sdf(scene, o + h[hit, None] * d[hit])) < TRACE_TOL)
    assert np.all(h[hit] <= 8.0)


def test_shade_examples():
    scene = AnalyticScene((Sphere((0.0, 0, 0), 1.0, albedo=(0.5, 0.25, 1.0)),), light=(0.0, 1.0, 0.0), ambient=0.2)
    alb = np.array([0.5, 0.25, 1.0])
    assert np.allclose(shade(scene, np.array([[0.0, 1.0, 0.0]])), alb)
    assert np.allclose(shade(scene, np.array([[1.0, 0.0, 0.0]])), 0.2 * alb)
    x = np.array([[0.6, 0.8, 0.0]])
    assert np.array_equal(shade(scene, x, np.array([[0, 0, 1.0]])), shade(scene, x, np.array([[1.0, 0, 0]])))


def test_constant_profile_closed_form():
    delta = 0.4
    prof = VelocityProfile(kind="dolly", vel=(0.0, 0.0, delta))
    T = 24
    for i in (0, 5, 23):
        t = -1 + 2 * i / (T - 1)
        P = ground_truth_pose(prof, i, T)
        assert np.allclose(P.translation, [0, 0, delta * (t + 1)], atol=1e-15)
        assert np.array_equal(P.rotation, np.eye(3))
    with pytest.raises(IndexError):
        ground_truth_pose(prof, 24, 24)


def test_orbit_stays_on_circle():
    prof = orbiter_profile()
    traj = ground_truth_trajectory(prof, 24)
    for P in traj.poses:
        r = np.linalg.norm(P.translation)
        assert abs(r - 3.0) < 1e-9 and abs(P.translation[1] - 3.0 * np.sin(0.3)) < 1e-9
    ang = np.degrees(np.arccos(np.clip((np.trace(traj.poses[0].rotation.T @ traj.poses[-1].rotation) - 1) / 2, -1, 1)))
    assert abs(ang - 90.0) < 1e-6  # the look-at axis turns with the azimuth


def test_rk4_matches_closed_form_constant_omega():
    prof = VelocityProfile(kind="constant", omega=(0.3, -0.6, 0.9), vel=(0.5, 0.2, -0.4))
    for t in (-0.5, 0.3, 1.0):
        a, b = rk4_pose(prof, t), pose_at(prof, t)
        assert np.abs(a.matrix() - b.matrix()).max() < 1e-9


def test_orbit_velocity_integrates_to_closed_form():
    # the orbit's body velocities reproduce its closed-form poses
    prof = orbiter_profile()
    for t in (-0.2, 1.0):
        assert np.abs(rk4_pose(prof, t).matrix() - pose_at(prof, t).matrix()).max() < 1e-9


def test_piecewise_profile():
    prof = VelocityProfile(kind="piecewise", knots=(-1.0, 1.0), values=((0, 0, 0, 0, 0, 0), (0, 0, 0, 2.0, 0, 0)))
    w, v = prof.velocity(0.0)
    assert np.allclose(v, [1.0, 0, 0]) and np.array_equal(w, np.zeros(3))
    # displacement = integral of 2 * smoothstep((t + 1) / 2) over [-1, 1] = 2
    assert abs(pose_at(prof, 1.0).translation[0] - 2.0) < 1e-9
    with pytest.raises(ValueError):
        VelocityProfile(kind="piecewise", knots=(0.0,), values=())
    with pytest.raises(ValueError):
        VelocityProfile(kind="zigzag")


def test_look_at_convention():
    P = look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0])
    assert np.allclose(P.rotation[:, 2], [0, 0, 1]) and np.allclose(P.rotation[:, 1], [0, -1, 0])
    assert P.is_valid()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 23), st.integers(0, 23))
def test_rigid_motion_identity(seed, i, j):
    # a point seen in camera j, carried to camera i by B = P_i^-1 P_j, has the same SDF
    rng = np.random.default_rng(seed)
    scene, prof = orbiter_scene(), orbiter_profile()
    Pi, Pj = ground_truth_pose(prof, i, 24), ground_truth_pose(prof, j, 24)
    x = rng.uniform(-3, 3, (20, 3)) + [0, 0, 3]
    B = pose_compose(pose_inverse(Pi), Pj)
    assert np.allclose(camera_sdf(scene, Pj, x), camera_sdf(scene, Pi, B.apply(x)), atol=1e-12)
    assert np.allclose(scene_sdf(scene, Pj.apply(x)), camera_sdf(scene, Pj, x))


def test_generate_dataset(tmp_path):
    cfg = GeneratorConfig(T=3, K=Intrinsics(12.0, 12.0, 6.0, 6.0, 13, 13))
    scene = AnalyticScene((Sphere((0.0, 0, 0), 1.0),), light=(0.0, 0.0, 1.0))
    prof = VelocityProfile(kind="dolly", vel=(0.0, 0.0, 0.2), start=((1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, -3)))
    meta = generate_dataset(scene, prof, cfg, tmp_path / "a")
    generate_dataset(scene, prof, cfg, tmp_path / "b")
    assert meta["T"] == 3
    for i in range(3):
        a = (tmp_path / "a" / "images" / f"{i:04d}.png").read_bytes()
        assert a == (tmp_path / "b" / "images" / f"{i:04d}.png").read_bytes()
        depth = read_pfm(tmp_path / "a" / "depth" / f"{i:04d}.pfm")
        assert depth.shape == (13, 13) and np.all(depth <= cfg.far)
        # principal pixel looks straight at the sphere center
        dist = 3.0 - 0.2 * i  # camera z = -3 + 0.2 (t + 1), t = -1 + i
        assert abs(depth[6, 6] - (dist - 1.0)) < 1e-4  # PFM stores float32
    img = read_png(tmp_path / "a" / "images" / "0000.png")
    assert img.shape == (13, 13, 3) and img[0, 0].sum() == 0 and img[6, 6].sum() > 0
    for name in ("gt_traj.txt", "intrinsics.txt", "meta.json"):
        assert (tmp_path / "a" / name).exists()
