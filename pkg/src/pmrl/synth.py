"""Procedural piecewise-planar scenes with exact ground truth.

Scenes are a textured back wall, a handful of tilted rectangles in front of
it, and optionally small occluders close to the cameras. Cameras sit on a
horizontal arc looking at the origin. Texture is multi-octave value noise
evaluated at the 3-D hit point, so shading is view independent and two
views of the same surface point agree exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import GenerationError, ParseError
from .geometry import Camera, intrinsics, look_at, pixel_grid, project_unchecked
from .io import read_cameras, read_pfm, write_cameras, write_pfm


@dataclass
class SceneConfig:
    num_patches: int = 6
    num_cameras: int = 6
    texture_octaves: int = 3
    occluder_fraction: float = 0.2
    width: int = 64
    height: int = 64
    focal_factor: float = 0.9
    camera_distance: float = 4.0
    arc_degrees: float = 50.0
    base_frequency: float = 1.0
    depth_margin: float = 0.1
    # half extents of object patches, scene units
    patch_size: tuple[float, float] = (0.35, 0.8)
    # a large back wall behind the objects; without it views see background
    background: bool = True
    # minimum fraction of valid (surface-hitting) pixels per view
    min_coverage: float = 0.6
    max_retries: int = 50


@dataclass
class Patch:
    """Rectangle on the world plane ``nᵀX + δ = 0``."""

    normal: np.ndarray
    delta: float
    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float
    texture_seed: int
    occluder: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> Patch:
        kw = dict(d)
        for key in ("normal", "center", "axis_u", "axis_v"):
            kw[key] = np.asarray(kw[key], dtype=np.float64)
        return cls(**kw)


@dataclass
class SyntheticScene:
    patches: list[Patch]
    cameras: list[Camera]
    seed: int
    texture_octaves: int = 3
    base_frequency: float = 1.0
    _tables: tuple = field(default=None, init=False, repr=False, compare=False)

    def noise_tables(self) -> tuple[np.ndarray, np.ndarray]:
        if self._tables is None:
            rng = np.random.default_rng([self.seed, 0x7E47])
            perm = rng.permutation(256)
            self._tables = (np.concatenate([perm, perm]), rng.random(256))
        return self._tables

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "texture_octaves": self.texture_octaves,
            "base_frequency": self.base_frequency,
            "patches": [p.to_dict() for p in self.patches],
        }


@dataclass
class RenderedView:
    image: np.ndarray
    gt_depth: np.ndarray
    gt_normal: np.ndarray
    camera: Camera
    patch_id: np.ndarray | None = None

    @property
    def valid(self) -> np.ndarray:
        return self.gt_depth > 0


# -- texture --------------------------------------------------------------


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def value_noise(points: np.ndarray, perm: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Smooth 3-D lattice noise in ``[0, 1]`` (quintic-interpolated hashed lattice)."""
    base = np.floor(points)
    frac = points - base
    i = base.astype(np.int64) & 255
    w = _fade(frac)
    out = np.zeros(points.shape[:-1])
    for dx in (0, 1):
        wx = w[..., 0] if dx else 1.0 - w[..., 0]
        hx = perm[(i[..., 0] + dx) & 255]
        for dy in (0, 1):
            wy = w[..., 1] if dy else 1.0 - w[..., 1]
            hy = perm[(hx + ((i[..., 1] + dy) & 255)) & 511]
            for dz in (0, 1):
                wz = w[..., 2] if dz else 1.0 - w[..., 2]
                h = perm[(hy + ((i[..., 2] + dz) & 255)) & 511] & 255
                out += wx * wy * wz * values[h]
    return out


def shade(scene: SyntheticScene, points: np.ndarray, patch_ids: np.ndarray) -> np.ndarray:
    """Lambertian intensity in ``[0, 1]`` of world points on the given patches."""
    perm, values = scene.noise_tables()
    out = np.zeros(points.shape[:-1])
    for pid in np.unique(patch_ids):
        if pid < 0:
            continue
        mask = patch_ids == pid
        rng = np.random.default_rng([scene.seed, int(scene.patches[pid].texture_seed)])
        offset = rng.uniform(0, 200, size=3)
        brightness = rng.uniform(-0.1, 0.1)
        contrast = rng.uniform(0.9, 1.3)
        total = np.zeros(mask.sum())
        norm = 0.0
        amp, freq = 1.0, scene.base_frequency
        for _ in range(scene.texture_octaves):
            total += amp * (value_noise(points[mask] * freq + offset, perm, values) - 0.5)
            norm += amp
            amp *= 0.7
            freq *= 2.0
        out[mask] = np.clip(0.5 + brightness + contrast * total / norm, 0.0, 1.0)
    return out


# -- ray casting ----------------------------------------------------------


def trace(scene: SyntheticScene, origins: np.ndarray, dirs: np.ndarray):
    """Nearest patch hit along ``origins + s·dirs`` (s > 0).

    Returns ``(s, patch_id)`` with ``s = inf`` and ``patch_id = -1`` on a miss.
    """
    origins = np.broadcast_to(origins, dirs.shape)
    best = np.full(dirs.shape[:-1], np.inf)
    ids = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    for pid, patch in enumerate(scene.patches):
        denom = dirs @ patch.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = -(origins @ patch.normal + patch.delta) / denom
        ok = (np.abs(denom) > 1e-12) & (s > 1e-9)
        hit = origins + np.where(ok, s, 0.0)[..., None] * dirs
        rel = hit - patch.center
        ok &= np.abs(rel @ patch.axis_u) <= patch.half_u
        ok &= np.abs(rel @ patch.axis_v) <= patch.half_v
        closer = ok & (s < best)
        best = np.where(closer, s, best)
        ids = np.where(closer, pid, ids)
    return best, ids


def _camera_rays(camera: Camera, pix: np.ndarray) -> np.ndarray:
    """World-frame ray directions scaled so the ray parameter equals camera depth."""
    return camera.rays(pix) @ camera.R


def render_at(scene: SyntheticScene, camera: Camera, pix: np.ndarray):
    """Render arbitrary continuous pixel positions; returns ``(image, depth, normal, ids)``."""
    dirs = _camera_rays(camera, pix)
    depth, ids = trace(scene, camera.center, dirs)
    hit = ids >= 0
    points = camera.center + np.where(hit, depth, 0.0)[..., None] * dirs
    image = np.where(hit, shade(scene, points, ids), 0.0)
    normals = np.zeros(pix.shape[:-1] + (3,))
    for pid, patch in enumerate(scene.patches):
        mask = ids == pid
        if mask.any():
            n_cam = camera.R @ patch.normal
            facing = np.einsum("...i,i->...", camera.rays(pix[mask]), n_cam)
            normals[mask] = np.where(facing[:, None] > 0, -n_cam, n_cam)
    return image, np.where(hit, depth, 0.0), normals, ids


def render_view(scene: SyntheticScene, camera: Camera) -> RenderedView:
    pix = pixel_grid(camera.height, camera.width)
    image, depth, normal, ids = render_at(scene, camera, pix)
    return RenderedView(image, depth, normal, camera, ids)


def visible_from(scene: SyntheticScene, camera: Camera, points: np.ndarray, rel_tol: float = 1e-6):
    """True where a world point is in front of ``camera``, inside its frame, and unoccluded."""
    pix, depth = project_unchecked(camera, points)
    inside = (
        (depth > 0)
        & (pix[..., 0] >= 0)
        & (pix[..., 0] < camera.width)
        & (pix[..., 1] >= 0)
        & (pix[..., 1] < camera.height)
    )
    s, _ = trace(scene, camera.center, points - camera.center)
    return inside & (s >= 1.0 - rel_tol)


def covisibility(scene: SyntheticScene, view: RenderedView, other: Camera) -> np.ndarray:
    """Per-pixel mask of ``view``'s surface points that ``other`` also sees."""
    pix = pixel_grid(view.camera.height, view.camera.width)
    points = view.camera.center + view.gt_depth[..., None] * _camera_rays(view.camera, pix)
    return view.valid & visible_from(scene, other, points)


def occlusion_disagreement(scene: SyntheticScene, view: RenderedView, other: Camera) -> float:
    """Fraction of ``view``'s in-frame surface points hidden from ``other`` by geometry."""
    pix = pixel_grid(view.camera.height, view.camera.width)
    points = view.camera.center + view.gt_depth[..., None] * _camera_rays(view.camera, pix)
    proj, depth = project_unchecked(other, points)
    inside = view.valid & (depth > 0)
    inside &= (proj[..., 0] >= 0) & (proj[..., 0] < other.width)
    inside &= (proj[..., 1] >= 0) & (proj[..., 1] < other.height)
    if not inside.any():
        return 0.0
    seen = visible_from(scene, other, points)
    return float((inside & ~seen).sum() / inside.sum())


# -- generation -----------------------------------------------------------


def _rect(rng, center, normal, half_u, half_v, texture_seed, occluder=False) -> Patch:
    normal = normal / np.linalg.norm(normal)
    helper = np.array([0.0, 1.0, 0.0]) if abs(normal[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    axis_u = np.cross(helper, normal)
    axis_u /= np.linalg.norm(axis_u)
    axis_v = np.cross(normal, axis_u)
    spin = rng.uniform(0, np.pi)
    axis_u, axis_v = np.cos(spin) * axis_u + np.sin(spin) * axis_v, -np.sin(spin) * axis_u + np.cos(spin) * axis_v
    return Patch(normal, float(-normal @ center), np.asarray(center, float), axis_u, axis_v,
                 float(half_u), float(half_v), int(texture_seed), occluder)


def _tilted(rng, max_deg: float) -> np.ndarray:
    tilt = np.deg2rad(rng.uniform(0, max_deg))
    az = rng.uniform(0, 2 * np.pi)
    return np.array([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az), -np.cos(tilt)])


def _make_cameras(rng, cfg: SceneConfig) -> list[Camera]:
    K = intrinsics(cfg.focal_factor * cfg.width, cfg.width, cfg.height)
    angles = np.deg2rad(np.linspace(-cfg.arc_degrees / 2, cfg.arc_degrees / 2, cfg.num_cameras))
    cams = []
    for phi in angles:
        center = np.array(
            [cfg.camera_distance * np.sin(phi), rng.uniform(-0.3, 0.3), -cfg.camera_distance * np.cos(phi)]
        )
        target = rng.uniform(-0.2, 0.2, size=3)
        R, t = look_at(center, target)
        cams.append(Camera(K, R, t, cfg.width, cfg.height))
    return cams


def _try_scene(rng, seed: int, cfg: SceneConfig) -> SyntheticScene:
    patches = [_rect(rng, np.array([0.0, 0.0, 1.6]), _tilted(rng, 15.0), 8.0, 8.0, 0)] if cfg.background else []
    n_obj = cfg.num_patches - len(patches)
    n_occ = int(round(cfg.occluder_fraction * n_obj))
    for k in range(n_obj - n_occ):
        center = np.array([rng.uniform(-1.1, 1.1), rng.uniform(-1.0, 1.0), rng.uniform(-0.6, 0.9)])
        patches.append(_rect(rng, center, _tilted(rng, 40.0), rng.uniform(*cfg.patch_size),
                             rng.uniform(*cfg.patch_size), k + 1))
    for k in range(n_occ):
        center = np.array([rng.uniform(-0.7, 0.7), rng.uniform(-0.6, 0.6), rng.uniform(-2.0, -1.5)])
        patches.append(_rect(rng, center, _tilted(rng, 10.0), rng.uniform(0.2, 0.35),
                             rng.uniform(0.2, 0.35), 100 + k, occluder=True))
    return SyntheticScene(patches, _make_cameras(rng, cfg), seed, cfg.texture_octaves, cfg.base_frequency)


def _acceptable(scene: SyntheticScene, cfg: SceneConfig) -> bool:
    for cam in scene.cameras:
        view = render_view(scene, cam)
        if view.valid.mean() < cfg.min_coverage:
            return False
        if cfg.occluder_fraction == 0:
            seen = set(np.unique(view.patch_id[view.valid]).tolist())
            if seen != set(range(len(scene.patches))):
                return False
        depths = view.gt_depth[view.valid]
        cam.d_min = float(depths.min() * (1.0 - cfg.depth_margin))
        cam.d_max = float(depths.max() * (1.0 + cfg.depth_margin))
    return True


def generate_scene(seed: int, cfg: SceneConfig | None = None) -> SyntheticScene:
    """Deterministic scene for ``seed``; retries until every constraint holds.

    Raises:
        GenerationError: ``num_cameras < 2`` or constraints unmet after
            ``cfg.max_retries`` attempts.
    """
    cfg = cfg or SceneConfig()
    if cfg.num_cameras < 2:
        raise GenerationError("a scene needs at least two cameras")
    if cfg.num_patches < 1:
        raise GenerationError("a scene needs at least one patch")
    if not 0.0 <= cfg.depth_margin < 1.0:
        raise GenerationError("depth_margin must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_retries):
        scene = _try_scene(rng, seed, cfg)
        if _acceptable(scene, cfg):
            return scene
    raise GenerationError(f"seed {seed}: visibility constraints unmet after {cfg.max_retries} retries")


def render_scene(scene: SyntheticScene, scale: float = 1.0) -> list[RenderedView]:
    return [render_view(scene, cam.scaled(scale) if scale != 1.0 else cam) for cam in scene.cameras]


def select_sources(views: list[RenderedView], ref: int, scene: SyntheticScene | None = None,
                   n_total: int = 6, n_best: int = 3, rng=None) -> list[int]:
    """Source views for ``ref``: the ``n_best`` most covisible plus random others.

    Covisibility is measured against ground truth (ray casting when ``scene``
    is given, otherwise a depth test against the other views' GT maps).
    """
    others = [i for i in range(len(views)) if i != ref]
    if len(others) <= n_total:
        return others
    score = {i: float(_covisible_fraction(views, ref, i, scene)) for i in others}
    ranked = sorted(others, key=lambda i: (-score[i], i))
    chosen = ranked[:n_best]
    rest = ranked[n_best:]
    rng = rng or np.random.default_rng(0)
    chosen += sorted(rng.choice(rest, size=n_total - n_best, replace=False).tolist())
    return chosen


def _covisible_fraction(views, ref: int, src: int, scene=None) -> float:
    view = views[ref]
    if scene is not None:
        mask = covisibility(scene, view, views[src].camera)
    else:
        mask = depth_test_covisibility(view, views[src])
    return mask.sum() / max(view.valid.sum(), 1)


def depth_test_covisibility(view: RenderedView, other: RenderedView, rel_tol: float = 1e-3) -> np.ndarray:
    """Covisibility from GT depth maps alone (nearest-pixel depth test)."""
    cam, ocam = view.camera, other.camera
    pix = pixel_grid(cam.height, cam.width)
    points = cam.center + view.gt_depth[..., None] * _camera_rays(cam, pix)
    proj, depth = project_unchecked(ocam, points)
    col = np.floor(proj[..., 0]).astype(np.int64)
    row = np.floor(proj[..., 1]).astype(np.int64)
    inside = view.valid & (depth > 0) & (col >= 0) & (col < ocam.width) & (row >= 0) & (row < ocam.height)
    seen = np.zeros_like(inside)
    d_other = other.gt_depth[row[inside], col[inside]]
    seen[inside] = (d_other > 0) & (depth[inside] <= d_other * (1 + rel_tol) + 0.05 * d_other)
    return seen


# -- dataset I/O ----------------------------------------------------------


def write_views(directory, views: list[RenderedView], scene: SyntheticScene | None = None) -> None:
    """``image_###.pfm``, ``depth_###.pfm``, ``normal_###.pfm`` per view plus ``cameras.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(views):
        write_pfm(directory / f"image_{i:03d}.pfm", view.image)
        write_pfm(directory / f"depth_{i:03d}.pfm", view.gt_depth)
        write_pfm(directory / f"normal_{i:03d}.pfm", view.gt_normal)
    write_cameras(directory / "cameras.txt", [v.camera for v in views])
    if scene is not None:
        (directory / "scene.json").write_text(json.dumps(scene.to_dict(), indent=1))


def read_views(directory) -> list[RenderedView]:
    directory = Path(directory)
    cam_path = directory / "cameras.txt"
    if not cam_path.exists():
        raise ParseError(cam_path, 0, "missing camera file")
    cameras = read_cameras(cam_path)
    views = []
    missing = []
    for i, cam in enumerate(cameras):
        paths = [directory / f"{kind}_{i:03d}.pfm" for kind in ("image", "depth", "normal")]
        absent = [str(p) for p in paths if not p.exists()]
        if absent:
            missing += absent
            continue
        image, depth, normal = (read_pfm(p).astype(np.float64) for p in paths)
        if image.shape != (cam.height, cam.width) or depth.shape != image.shape:
            raise ParseError(paths[0], 0, f"raster extents {image.shape} disagree with camera {i}")
        views.append(RenderedView(image, depth, normal, cam))
    if missing:
        raise FileNotFoundError("missing view files: " + ", ".join(missing))
    return views


def read_scene(directory) -> SyntheticScene | None:
    path = Path(directory) / "scene.json"
    if not path.exists():
        return None
    d = json.loads(path.read_text())
    cameras = read_cameras(Path(directory) / "cameras.txt")
    return SyntheticScene([Patch.from_dict(p) for p in d["patches"]], cameras, d["seed"],
                          d["texture_octaves"], d["base_frequency"])
