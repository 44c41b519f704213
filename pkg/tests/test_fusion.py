import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmrl.fusion import (
    ConsistencyThresholds,
    GridIndex,
    PointCloud,
    check_sources,
    cloud_metrics,
    consistency_mask,
    dedupe_grid,
    depth_metrics,
    f1_score,
    fuse,
    gt_cloud,
)
from pmrl.geometry import Camera, intrinsics, project_unchecked
from pmrl.synth import SceneConfig, generate_scene, render_scene

PLANAR = SceneConfig(background=False, num_patches=1, occluder_fraction=0.0, min_coverage=0.05)


@pytest.fixture(scope="module")
def planar():
    scene = generate_scene(0, PLANAR)
    views = render_scene(scene)
    return scene, views


def _maps(views):
    return [v.gt_depth for v in views], [v.gt_normal for v in views], [v.camera for v in views]


# -- consistency ----------------------------------------------------------------


def test_hand_built_three_view_counts():
    cam = Camera(intrinsics(2.0, 2, 2), np.eye(3), np.zeros(3), 2, 2)
    n = np.broadcast_to([0.0, 0.0, -1.0], (2, 2, 3)).copy()
    ref = np.full((2, 2), 2.0)
    src1 = np.array([[2.0, 2.1], [2.0, 0.0]])
    src2 = np.array([[2.01, 2.0], [0.0, 2.0]])
    n2 = n.copy()
    tilt = np.deg2rad(20)
    n2[1, 1] = [np.sin(tilt), 0.0, -np.cos(tilt)]
    # hand enumeration (rows y, cols x):
    #   (0,0) both agree; (0,1) src1 off by 5%; (1,0) src2 has no depth;
    #   (1,1) src1 has no depth and src2's normal is 20° off
    expected = np.array([[2, 1], [1, 0]])
    count = consistency_mask(ref, n, cam, [src1, src2], [n, n2], [cam, cam])
    assert np.array_equal(count, expected)


def test_self_consistency_of_gt_maps(planar):
    _, views = planar
    d, n, c = _maps(views)
    check = check_sources(d[0], n[0], c[0], d[1:], n[1:], c[1:], ConsistencyThresholds())
    for k, v in enumerate(views[1:]):
        # pixels whose surface point lands on a valid pixel of the source
        pts = c[0].to_world_frame(c[0].rays(np.stack(np.meshgrid(np.arange(64), np.arange(64)), -1) + 0.5)
                                  * d[0][..., None])
        q, z = project_unchecked(v.camera, pts)
        col, row = np.floor(q[..., 0]).astype(int), np.floor(q[..., 1]).astype(int)
        inside = (d[0] > 0) & (z > 0) & (col >= 0) & (col < 64) & (row >= 0) & (row < 64)
        lands = inside.copy()
        lands[inside] = v.gt_depth[row[inside], col[inside]] > 0
        assert lands.sum() > 200
        assert np.array_equal(check.passed[k], lands)


def test_scaled_source_fails_everywhere(planar):
    _, views = planar
    d, n, c = _maps(views)
    bad = [x.copy() for x in d]
    bad[2] = bad[2] * 2.0
    check = check_sources(d[0], n[0], c[0], bad[1:], n[1:], c[1:], ConsistencyThresholds())
    assert not check.passed[1].any()
    assert check.passed[0].sum() > 200
    # with an unlimited relative-depth tolerance the scaled source is no longer rejected by that test
    loose = ConsistencyThresholds(max_reproj_px=np.inf, max_rel_depth=np.inf)
    assert check_sources(d[0], n[0], c[0], bad[1:], n[1:], c[1:], loose).passed[1].sum() > 200


def test_count_invariant_to_source_order(planar):
    _, views = planar
    d, n, c = _maps(views)
    base = consistency_mask(d[0], n[0], c[0], d[1:], n[1:], c[1:])
    for perm in ([3, 1, 4, 2, 0], [4, 3, 2, 1, 0]):
        assert np.array_equal(base, consistency_mask(d[0], n[0], c[0], [d[1 + i] for i in perm],
                                                     [n[1 + i] for i in perm], [c[1 + i] for i in perm]))


# -- fusion ---------------------------------------------------------------------


def test_fused_points_lie_on_gt_planes():
    scene = generate_scene(1, SceneConfig(width=48, height=48))
    d, n, c = _maps(render_scene(scene))
    cloud = fuse(d, n, c)
    assert len(cloud) > 1000 and np.all(cloud.support >= 2)
    residual = np.min([np.abs(cloud.points @ p.normal + p.delta) for p in scene.patches], axis=0)
    assert residual.max() < 1e-6
    assert np.allclose(np.linalg.norm(cloud.normals, axis=1), 1.0)


def test_min_views_threshold_and_empty_inputs(planar):
    _, views = planar
    d, n, c = _maps(views[:2])
    assert len(fuse(d, n, c)) == 0
    assert len(fuse(d, n, c, ConsistencyThresholds(min_consistent_views=1))) > 200
    assert len(fuse([], [], [])) == 0


def test_fusion_order_independent(planar):
    _, views = planar
    d, n, c = _maps(views)
    a = fuse(d, n, c).points
    perm = [4, 0, 5, 2, 1, 3]
    b = fuse([d[i] for i in perm], [n[i] for i in perm], [c[i] for i in perm]).points
    assert a.shape == b.shape
    a, b = a[np.lexsort(a.T[::-1])], b[np.lexsort(b.T[::-1])]
    assert np.max(np.abs(a - b)) < 1e-12


def test_consuming_fusion_yields_fewer_points(planar):
    _, views = planar
    d, n, c = _maps(views)
    assert 0 < len(fuse(d, n, c, consume=True)) < len(fuse(d, n, c))


def test_gt_self_fusion(planar):
    _, views = planar
    d, n, c = _maps(views)
    m = cloud_metrics(fuse(d, n, c), gt_cloud(d, n, c, 0.01), 0.01)
    assert m.accuracy == 1.0 and m.f1 > 0.99


# -- metrics --------------------------------------------------------------------

PRED10 = np.array([[0, 0, 0], [0.05, 0, 0], [0.2, 0.1, 0], [1, 1, 1], [1.02, 1, 1],
                   [-0.5, 0.3, 0.2], [2, 0, 0], [2.099, 0, 0], [0, 3, 0], [0.3, 0.3, 0.3]], float)
GT10 = np.array([[0, 0, 0.01], [0.1, 0, 0], [1, 1, 1.1], [1.5, 1, 1], [-0.5, 0.3, 0.25],
                 [2.1, 0, 0], [0, 3.2, 0], [5, 5, 5], [0.3, 0.35, 0.3], [0.19, 0.1, 0.05]], float)


def _brute(a, b, tau):
    dist = np.linalg.norm(a[:, None] - b[None], axis=-1)
    return float((dist.min(axis=1) <= tau).mean())


@pytest.mark.parametrize("tau", [0.01, 0.05, 0.1, 0.2])
def test_ten_point_case_matches_brute_force(tau):
    m = cloud_metrics(PointCloud(PRED10), PointCloud(GT10), tau)
    acc, comp = _brute(PRED10, GT10, tau), _brute(GT10, PRED10, tau)
    assert m.accuracy == acc and m.completeness == comp
    assert m.f1 == f1_score(acc, comp)


def test_ten_point_case_by_hand():
    m = cloud_metrics(PointCloud(PRED10), PointCloud(GT10), 0.06)
    # hits: p0 (0.01), p1 (0.05), p2 (0.051), p5 (0.05), p7 (0.001), p9 (0.05)
    assert m.accuracy == 0.6
    assert m.n_pred == 10 and m.n_gt == 10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.5))
def test_grid_metrics_match_brute_force(seed, tau):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (60, 3)), rng.uniform(-1, 1, (50, 3))
    m = cloud_metrics(PointCloud(a), PointCloud(b), tau)
    assert m.accuracy == _brute(a, b, tau) and m.completeness == _brute(b, a, tau)


def test_grid_index_distances():
    rng = np.random.default_rng(3)
    pts, q = rng.normal(size=(200, 3)), rng.normal(size=(50, 3))
    out = GridIndex(pts, 0.3).nearest_within(q, 0.3)
    exact = np.linalg.norm(q[:, None] - pts[None], axis=-1).min(axis=1)
    assert np.array_equal(np.isfinite(out), exact <= 0.3)
    assert np.allclose(out[np.isfinite(out)], exact[exact <= 0.3], rtol=0, atol=1e-15)


def test_metric_examples():
    pts = np.random.default_rng(4).normal(size=(30, 3))
    m = cloud_metrics(PointCloud(pts), PointCloud(pts), 0.01)
    assert (m.accuracy, m.completeness, m.f1) == (1.0, 1.0, 1.0)
    assert f1_score(0.5, 0.5) == 0.5
    empty = cloud_metrics(PointCloud(), PointCloud(pts), 0.01)
    assert empty.accuracy_undefined and empty.f1 == 0.0 and empty.completeness == 0.0
    no_gt = cloud_metrics(PointCloud(pts), PointCloud(), 0.01)
    assert no_gt.completeness_undefined and no_gt.f1 == 0.0


@settings(max_examples=200, deadline=None)
@given(st.one_of(st.just(0.0), st.floats(1e-6, 1)), st.one_of(st.just(0.0), st.floats(1e-6, 1)))
def test_f1_bounds(a, c):
    f = f1_score(a, c)
    assert min(a, c) - 1e-12 <= f <= max(a, c) + 1e-12
    assert (f == 0) == (a == 0 or c == 0)


def test_dedupe_grid():
    pts = np.array([[0.001, 0, 0], [0.002, 0, 0], [0.02, 0, 0], [0.0011, 0.0, 0.0]])
    assert dedupe_grid(pts, 0.005).tolist() == [0, 2]


# -- depth metrics --------------------------------------------------------------


def test_depth_metric_examples():
    gt = np.full((4, 4), 2.0)
    m = depth_metrics(gt, gt)
    assert m["mae"] == 0 and m["within_2pct"] == 1
    m = depth_metrics(gt + 0.09, gt)
    assert m["mae"] == pytest.approx(0.09) and m["within_5pct"] == 1 and m["within_2pct"] == 0
    assert depth_metrics(gt, np.zeros((4, 4)))["undefined"]


def test_depth_metrics_loop_oracle():
    rng = np.random.default_rng(5)
    gt = np.where(rng.random((6, 7)) < 0.8, rng.uniform(1, 3, (6, 7)), 0.0)
    pred = gt * rng.uniform(0.9, 1.1, gt.shape)
    mask = rng.random(gt.shape) < 0.7
    errs, rels = [], []
    for i, j in itertools.product(range(6), range(7)):
        if mask[i, j] and gt[i, j] > 0:
            errs.append(pred[i, j] - gt[i, j])
            rels.append(abs(pred[i, j] - gt[i, j]) / gt[i, j])
    m = depth_metrics(pred, gt, mask)
    assert m["n"] == len(errs)
    assert m["mae"] == pytest.approx(sum(abs(e) for e in errs) / len(errs), rel=1e-14)
    assert m["rmse"] == pytest.approx((sum(e * e for e in errs) / len(errs)) ** 0.5, rel=1e-14)
    assert m["within_2pct"] == sum(r <= 0.02 for r in rels) / len(rels)
    assert m["within_5pct"] == sum(r <= 0.05 for r in rels) / len(rels)
