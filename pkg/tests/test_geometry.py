import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_camera, random_facing_plane, random_pair
from pmrl.exceptions import BehindCameraError, DegeneratePlaneError
from pmrl.geometry import (
    Camera,
    apply_homography,
    depth_from_plane,
    homography,
    intrinsics,
    plane_from_depth_normal,
    project,
    relative_pose,
    unproject,
)

K = intrinsics(50.0, 64, 48)
PP = np.array([32.0, 24.0])


def test_fronto_parallel_depth():
    n = np.array([0.0, 0.0, -1.0])
    assert depth_from_plane(n, 2.0, PP, K) == pytest.approx(2.0)
    pix = np.array([[0.5, 0.5], [63.5, 40.2], [10.0, 3.0]])
    assert np.allclose(depth_from_plane(n, 2.0, pix, K), 2.0)


def test_plane_from_depth_normal_at_principal_point():
    n, delta = plane_from_depth_normal(2.0, np.array([0.0, 0.0, -1.0]), PP, K)
    assert delta == pytest.approx(2.0)


def test_grazing_and_backfacing_planes_rejected():
    with pytest.raises(DegeneratePlaneError):
        depth_from_plane(np.array([1.0, 0.0, 0.0]), 1.0, PP, K)
    with pytest.raises(DegeneratePlaneError):
        plane_from_depth_normal(2.0, np.array([0.0, 0.0, 1.0]), PP, K)
    with pytest.raises(DegeneratePlaneError):
        plane_from_depth_normal(-1.0, np.array([0.0, 0.0, -1.0]), PP, K)


def test_random_plane_residual_and_round_trip():
    rng = np.random.default_rng(0)
    worst_res = worst_rt = 0.0
    for _ in range(1000):
        pix = rng.uniform([0, 0], [64, 48])
        n, delta = random_facing_plane(rng, pix, K, rng.uniform(0.5, 20))
        d = depth_from_plane(n, delta, pix, K)
        X = d * (np.linalg.inv(K) @ np.array([*pix, 1.0]))
        worst_res = max(worst_res, abs(n @ X + delta))
        _, delta2 = plane_from_depth_normal(d, n, pix, K)
        worst_rt = max(worst_rt, abs(delta2 - delta))
    assert worst_res < 1e-9 and worst_rt < 1e-9


def test_homography_identity_and_pure_rotation():
    rng = np.random.default_rng(1)
    cam = random_camera(rng)
    n, delta = random_facing_plane(rng, PP, cam.K, 3.0)
    assert np.max(np.abs(homography(n, delta, cam, cam) - np.eye(3))) < 1e-12
    R = random_camera(rng).R
    src = Camera(cam.K, R @ cam.R, R @ cam.t, 64, 48)
    expected = cam.K @ relative_pose(cam, src)[0] @ cam.K_inv
    for _ in range(3):
        n, delta = random_facing_plane(rng, PP, cam.K, rng.uniform(1, 5))
        assert np.allclose(homography(n, delta, cam, src), expected, atol=1e-12)


def test_homography_degenerate_delta():
    rng = np.random.default_rng(2)
    ref, src = random_pair(rng)
    with pytest.raises(DegeneratePlaneError):
        homography(np.array([0.0, 0.0, -1.0]), 0.0, ref, src)


def test_homography_matches_intersect_and_project():
    rng = np.random.default_rng(3)
    worst, compared = 0.0, 0
    while compared < 1000:
        ref, src = random_pair(rng)
        n, delta = random_facing_plane(rng, PP, ref.K, rng.uniform(2, 8))
        H = homography(n, delta, ref, src)
        pix = rng.uniform([0, 0], [64, 48], size=(50, 2))
        d = depth_from_plane(n, delta, pix, ref.K)
        X = unproject(ref, pix, d)
        Xs = src.to_camera_frame(X)
        keep = (d > 0) & (Xs[:, 2] > 0.1)
        direct = (Xs[keep] @ src.K.T)[:, :2] / Xs[keep, 2:3]
        if not keep.any():
            continue
        warped, _ = apply_homography(H, pix[keep])
        worst = max(worst, np.max(np.abs(warped - direct)))
        compared += int(keep.sum())
    assert worst < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_plane_scaling_is_projective(seed, scale):
    rng = np.random.default_rng(seed)
    ref, src = random_pair(rng)
    pix = rng.uniform([0, 0], [64, 48], size=(5, 2))
    n, delta = random_facing_plane(rng, PP, ref.K, rng.uniform(1, 10))
    d1 = depth_from_plane(n, delta, pix, ref.K)
    d2 = depth_from_plane(scale * n, scale * delta, pix, ref.K)
    assert np.allclose(d1, d2, rtol=1e-9)
    H1 = homography(n, delta, ref, src)
    H2 = homography(scale * n, scale * delta, ref, src)
    assert np.allclose(H1, H2, rtol=1e-9, atol=1e-12)


def test_relative_pose_routes_agree():
    rng = np.random.default_rng(4)
    cam = random_camera(rng)
    R, t = relative_pose(cam, cam)
    assert np.allclose(R, np.eye(3)) and np.allclose(t, 0)
    # translated copies: R = I and t = R_s (C_r - C_s)
    shift = np.array([0.3, -0.2, 0.5])
    moved = Camera(cam.K, cam.R, cam.t - cam.R @ shift, 64, 48)
    R, t = relative_pose(cam, moved)
    assert np.allclose(R, np.eye(3), atol=1e-12)
    assert np.allclose(t, moved.R @ (cam.center - moved.center), atol=1e-12)
    for _ in range(5):
        a, b = random_camera(rng), random_camera(rng)
        R, t = relative_pose(a, b)
        X = rng.normal(size=(100, 3))
        assert np.max(np.abs(a.to_camera_frame(X) @ R.T + t - b.to_camera_frame(X))) < 1e-9


def test_project_examples_and_round_trip():
    cam = Camera(K, np.eye(3), np.zeros(3), 64, 48)
    pix, depth = project(cam, np.array([0.0, 0.0, 5.0]))
    assert np.allclose(pix, PP) and depth == pytest.approx(5.0)
    with pytest.raises(BehindCameraError):
        project(cam, np.array([0.0, 0.0, -1.0]))
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10):
        c = random_camera(rng)
        X = c.to_world_frame(np.column_stack([rng.uniform(-2, 2, (100, 2)), rng.uniform(0.5, 10, 100)]))
        p, d = project(c, X)
        worst = max(worst, np.max(np.abs(unproject(c, p, d) - X)))
    assert worst < 1e-9


def test_scaled_camera_keeps_pixel_centres():
    cam = Camera(K, np.eye(3), np.zeros(3), 64, 48)
    half = cam.scaled(0.5)
    assert (half.width, half.height) == (32, 24)
    X = np.array([0.3, -0.1, 4.0])
    assert np.allclose(project(half, X)[0], 0.5 * project(cam, X)[0])


def test_camera_validation():
    rng = np.random.default_rng(6)
    random_camera(rng).validate()
    bad = Camera(K, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 64, 48)
    with pytest.raises(ValueError):
        bad.validate()
