import filecmp

import numpy as np
import pytest

from pmrl.exceptions import GenerationError, ParseError
from pmrl.geometry import Camera, apply_homography, homography, intrinsics, pixel_grid
from pmrl.synth import (
    Patch,
    SceneConfig,
    SyntheticScene,
    covisibility,
    generate_scene,
    occlusion_disagreement,
    read_scene,
    read_views,
    render_at,
    render_scene,
    render_view,
    select_sources,
    write_views,
)

SMALL = SceneConfig(width=32, height=32)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(7, SMALL)


@pytest.fixture(scope="module")
def views(scene):
    return render_scene(scene)


def _flat_scene(half=10.0):
    cam = Camera(intrinsics(30.0, 32, 32), np.eye(3), np.zeros(3), 32, 32, 1.0, 5.0)
    patch = Patch(np.array([0.0, 0.0, -1.0]), 3.0, np.array([0.0, 0.0, 3.0]), np.array([1.0, 0.0, 0.0]),
                  np.array([0.0, 1.0, 0.0]), half, half, 1)
    return SyntheticScene([patch], [cam], seed=3), cam


def test_fronto_parallel_patch():
    sc, cam = _flat_scene()
    view = render_view(sc, cam)
    assert np.all(view.gt_depth == pytest.approx(3.0, abs=1e-12))
    assert np.allclose(view.gt_normal, [0.0, 0.0, -1.0])
    assert view.image.min() >= 0 and view.image.max() <= 1


def test_missed_pixels_have_zero_depth():
    sc, cam = _flat_scene(half=0.5)
    view = render_view(sc, cam)
    assert (view.gt_depth == 0).any() and (view.gt_depth == 3.0).any()
    assert np.all(view.gt_normal[view.gt_depth == 0] == 0)


def test_determinism():
    a, b = generate_scene(7, SMALL), generate_scene(7, SMALL)
    assert a.to_dict() == b.to_dict()
    for va, vb in zip(render_scene(a), render_scene(b)):
        assert np.array_equal(va.image, vb.image) and np.array_equal(va.gt_depth, vb.gt_depth)
    assert generate_scene(8, SMALL).to_dict() != a.to_dict()


def test_scene_invariants(scene, views):
    for view in views:
        cam = view.camera
        assert view.valid.mean() >= 0.6
        d = view.gt_depth[view.valid]
        assert d.min() >= cam.d_min and d.max() <= cam.d_max
        assert np.allclose(np.linalg.norm(view.gt_normal[view.valid], axis=-1), 1.0, atol=1e-12)


def test_gt_maps_satisfy_plane_equation(scene, views):
    worst = 0.0
    for view in views:
        cam = view.camera
        rays = cam.rays(pixel_grid(cam.height, cam.width))
        X = cam.to_world_frame(view.gt_depth[..., None] * rays)
        for pid, patch in enumerate(scene.patches):
            mask = view.patch_id == pid
            if mask.any():
                worst = max(worst, np.max(np.abs(X[mask] @ patch.normal + patch.delta)))
    assert worst < 1e-9


def test_photoconsistency_via_homography(scene, views):
    ref = views[0]
    cam = ref.camera
    pix = pixel_grid(cam.height, cam.width)
    checked = 0
    for other in views[1:]:
        covis = covisibility(scene, ref, other.camera)
        for pid, patch in enumerate(scene.patches):
            mask = covis & (ref.patch_id == pid)
            if not mask.any():
                continue
            n_c = cam.R @ patch.normal
            H = homography(n_c, patch.delta - n_c @ cam.t, cam, other.camera)
            q, _ = apply_homography(H, pix[mask])
            image, _, _, ids = render_at(scene, other.camera, q)
            same = ids == pid
            assert same.mean() > 0.99
            assert np.max(np.abs(image[same] - ref.image[mask][same])) < 1e-6
            checked += int(same.sum())
    assert checked > 500


def test_no_occluders_means_all_patches_visible():
    cfg = SceneConfig(width=32, height=32, occluder_fraction=0.0)
    sc = generate_scene(3, cfg)
    for view in render_scene(sc):
        assert set(np.unique(view.patch_id[view.valid])) == set(range(len(sc.patches)))


def test_occluders_create_disagreement():
    cfg = SceneConfig(width=32, height=32, occluder_fraction=0.5)
    sc = generate_scene(11, cfg)
    assert any(p.occluder for p in sc.patches)
    views = render_scene(sc)
    worst = max(occlusion_disagreement(sc, views[i], views[j].camera)
                for i in range(len(views)) for j in range(len(views)) if i != j)
    assert worst >= 0.2


def test_generation_errors():
    with pytest.raises(GenerationError):
        generate_scene(0, SceneConfig(num_cameras=1))
    with pytest.raises(GenerationError):
        generate_scene(0, SceneConfig(width=16, height=16, min_coverage=1.01, max_retries=2))


def test_select_sources(scene, views):
    chosen = select_sources(views, 0, scene, n_total=3, n_best=2, rng=np.random.default_rng(0))
    assert len(chosen) == 3 and 0 not in chosen and len(set(chosen)) == 3
    assert select_sources(views, 0, scene, n_total=10) == [1, 2, 3, 4, 5]
    # the best-ranked are the most covisible
    frac = {i: covisibility(scene, views[0], views[i].camera).mean() for i in range(1, 6)}
    assert set(chosen[:2]) == set(sorted(frac, key=lambda i: -frac[i])[:2])


def test_dataset_round_trip(tmp_path, scene, views):
    write_views(tmp_path, views, scene)
    names = sorted(p.name for p in tmp_path.iterdir())
    for kind in ("image", "depth", "normal"):
        assert sum(n.startswith(kind + "_") for n in names) == 6
    assert sum(n == "cameras.txt" for n in names) == 1
    back = read_views(tmp_path)
    for a, b in zip(views, back):
        assert np.array_equal(a.image.astype(np.float32), b.image)
        assert np.array_equal(a.gt_depth.astype(np.float32), b.gt_depth)
        assert np.array_equal(a.gt_normal.astype(np.float32), b.gt_normal)
        assert np.array_equal(a.camera.K, b.camera.K) and np.array_equal(a.camera.R, b.camera.R)
        assert np.array_equal(a.camera.t, b.camera.t) and a.camera.d_max == b.camera.d_max
    again = read_scene(tmp_path)
    assert again.to_dict() == scene.to_dict()
    write_views(tmp_path / "copy", back)
    assert filecmp.cmp(tmp_path / "depth_002.pfm", tmp_path / "copy" / "depth_002.pfm", shallow=False)


def test_truncated_pfm_names_offset(tmp_path, views):
    write_views(tmp_path, views[:2])
    path = tmp_path / "image_001.pfm"
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(ParseError) as info:
        read_views(tmp_path)
    header = len(b"Pf\n32 32\n-1.0\n")
    assert info.value.path.endswith("image_001.pfm")
    assert info.value.offset == header + 4 * ((len(data) - 10 - header) // 4)
    assert f"byte {info.value.offset}" in str(info.value)


def test_missing_view_file(tmp_path, views):
    write_views(tmp_path, views[:2])
    (tmp_path / "normal_001.pfm").unlink()
    with pytest.raises(FileNotFoundError):
        read_views(tmp_path)
