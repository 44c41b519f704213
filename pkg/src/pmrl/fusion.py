"""Multi-view consistency filtering, point-cloud fusion and evaluation metrics.

Depth maps hold camera-frame z; normal maps hold camera-frame unit normals.
Pixel ``(x, y)`` has its centre at ``(x + 0.5, y + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError
from .geometry import Camera, angle_between, pixel_grid, project_unchecked, unproject


@dataclass
class ConsistencyThresholds:
    max_reproj_px: float = 1.0
    max_rel_depth: float = 0.01
    max_normal_angle: float = np.deg2rad(10.0)
    min_consistent_views: int = 2


@dataclass
class PointCloud:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    support: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class SourceCheck:
    """Per-source outcome of the consistency test for one reference map.

    ``passed`` is ``[S, H, W]``; ``depth`` holds each source's observation
    mapped to reference depth and ``normal`` its normal rotated into the
    reference frame (both meaningful where ``passed``).
    """

    passed: np.ndarray
    depth: np.ndarray
    normal: np.ndarray

    @property
    def count(self) -> np.ndarray:
        return self.passed.sum(axis=0)


def _sample_plane_depth(depth: np.ndarray, normal: np.ndarray, cam: Camera, q: np.ndarray):
    """Source depth at continuous pixel ``q`` from the pixel that contains it.

    That pixel's oriented point (depth plus normal) is intersected with the
    ray through ``q``, which is exact wherever the pixel's plane is the true
    surface. A landing pixel without a valid depth gives ``ok = False``.

    Returns:
        ``(depth at q, ok, row, col)`` with the landing pixel's indices.
    """
    h, w = depth.shape
    finite = np.isfinite(q).all(axis=-1)
    qs = np.where(finite[..., None], q, -1.0)
    col = np.floor(qs[..., 0]).astype(np.int64)
    row = np.floor(qs[..., 1]).astype(np.int64)
    ok = finite & (col >= 0) & (col < w) & (row >= 0) & (row < h)
    col = np.where(ok, col, 0)
    row = np.where(ok, row, 0)
    d_pix = depth[row, col]
    ok &= np.isfinite(d_pix) & (d_pix > 0)
    n = normal[row, col]
    X_pix = cam.rays(np.stack([col, row], axis=-1) + 0.5) * np.where(ok, d_pix, 1.0)[..., None]
    ray = cam.rays(np.where(ok[..., None], q, 0.5))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.einsum("...i,...i->...", n, X_pix) / np.einsum("...i,...i->...", n, ray)
    ok &= np.isfinite(out) & (out > 0)
    return np.where(ok, out, 0.0), ok, row, col


def check_sources(ref_depth, ref_normal, cam_ref: Camera, src_depths, src_normals, cams_src,
                  thresholds: ConsistencyThresholds) -> SourceCheck:
    """Reprojection, relative-depth and normal tests of one reference map against each source.

    Each reference point is projected into the source, the source depth is
    read there, the source point is lifted back and reprojected into the
    reference. A source without a usable depth at the landing position fails.
    """
    ref_depth = np.asarray(ref_depth, dtype=np.float64)
    h, w = ref_depth.shape
    if ref_normal.shape != (h, w, 3):
        raise DimensionError(f"reference normal map {ref_normal.shape} does not match depth {ref_depth.shape}")
    pix = pixel_grid(h, w)
    has = np.isfinite(ref_depth) & (ref_depth > 0)
    X = unproject(cam_ref, pix, np.where(has, ref_depth, 1.0))
    n_world = ref_normal @ cam_ref.R
    passed, depths, normals = [], [], []
    for d_s, n_s, cam_s in zip(src_depths, src_normals, cams_src):
        d_s = np.asarray(d_s, dtype=np.float64)
        q, z = project_unchecked(cam_s, X)
        n_s = np.asarray(n_s, dtype=np.float64)
        ds_at, ok, row, col = _sample_plane_depth(d_s, n_s, cam_s, q)
        ok &= has & (z > 0)
        X_s = unproject(cam_s, np.where(ok[..., None], q, 0.5), np.where(ok, ds_at, 1.0))
        back, d_back = project_unchecked(cam_ref, X_s)
        reproj = np.linalg.norm(back - pix, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.abs(d_back - ref_depth) / ref_depth
        n_src_world = n_s[row, col] @ cam_s.R
        angle = angle_between(n_world, n_src_world)
        good = ok & (d_back > 0) & (reproj <= thresholds.max_reproj_px) & (rel <= thresholds.max_rel_depth)
        good &= angle <= thresholds.max_normal_angle
        passed.append(good)
        depths.append(np.where(good, d_back, 0.0))
        normals.append(n_src_world @ cam_ref.R.T)
    if not passed:
        empty = np.zeros((0, h, w))
        return SourceCheck(empty.astype(bool), empty, np.zeros((0, h, w, 3)))
    return SourceCheck(np.stack(passed), np.stack(depths), np.stack(normals))


def consistency_mask(ref_depth, ref_normal, cam_ref, src_depths, src_normals, cams_src,
                     thresholds: ConsistencyThresholds | None = None) -> np.ndarray:
    """Number of sources that agree with each reference pixel."""
    thresholds = thresholds or ConsistencyThresholds()
    return check_sources(ref_depth, ref_normal, cam_ref, src_depths, src_normals, cams_src, thresholds).count


def fuse(depths, normals, cameras, thresholds: ConsistencyThresholds | None = None,
         consume: bool = False) -> PointCloud:
    """Consensus points from every view's consistent pixels.

    A pixel with at least ``min_consistent_views`` agreeing sources becomes
    one point: the mean of its own and the agreeing depths (all in the
    reference frame) lifted to world space, with the normalized mean of the
    agreeing normals. With ``consume=True`` an observation that already fed
    a point (its nearest source pixel) is skipped when that view later acts
    as the reference; the result then depends on view order.
    """
    thresholds = thresholds or ConsistencyThresholds()
    n = len(depths)
    if not (n == len(normals) == len(cameras)):
        raise DimensionError(f"got {len(depths)} depth maps, {len(normals)} normal maps, {len(cameras)} cameras")
    used = [np.zeros(np.shape(d), dtype=bool) for d in depths]
    pts, nrm, sup = [], [], []
    for r in range(n):
        others = [s for s in range(n) if s != r]
        check = check_sources(depths[r], normals[r], cameras[r], [depths[s] for s in others],
                              [normals[s] for s in others], [cameras[s] for s in others], thresholds)
        keep = (check.count >= thresholds.min_consistent_views) & ~used[r]
        if not keep.any():
            continue
        w = check.passed.astype(np.float64)
        total = 1.0 + w.sum(axis=0)
        depth = (np.asarray(depths[r]) + (w * check.depth).sum(axis=0)) / total
        normal = np.asarray(normals[r]) + (w[..., None] * check.normal).sum(axis=0)
        normal = normal / np.maximum(np.linalg.norm(normal, axis=-1, keepdims=True), 1e-12)
        ys, xs = np.nonzero(keep)
        pix = np.stack([xs, ys], axis=1) + 0.5
        pts.append(unproject(cameras[r], pix, depth[ys, xs]))
        nrm.append(normal[ys, xs] @ cameras[r].R)
        sup.append(check.count[ys, xs])
        if consume:
            _mark_used(used, keep, check.passed, depths[r], cameras, r, others)
    if not pts:
        return PointCloud()
    return PointCloud(np.concatenate(pts), np.concatenate(nrm), np.concatenate(sup).astype(np.int64))


def _mark_used(used, keep, passed, ref_depth, cameras, r, others) -> None:
    ys, xs = np.nonzero(keep)
    X = unproject(cameras[r], np.stack([xs, ys], axis=1) + 0.5, np.asarray(ref_depth)[ys, xs])
    for k, s in enumerate(others):
        sel = passed[k, ys, xs]
        q, _ = project_unchecked(cameras[s], X[sel])
        hs, ws = used[s].shape
        col = np.clip(np.floor(q[:, 0]), 0, ws - 1).astype(np.int64)
        row = np.clip(np.floor(q[:, 1]), 0, hs - 1).astype(np.int64)
        used[s][row, col] = True


# -- ground truth cloud ---------------------------------------------------------


def dedupe_grid(points: np.ndarray, cell: float) -> np.ndarray:
    """Indices of the first point in each occupied ``cell``-sized voxel, in input order."""
    keys = np.floor(np.asarray(points) / cell).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return np.sort(first)


def gt_cloud(depths, normals, cameras, tau: float) -> PointCloud:
    """One point per GT-valid pixel per view, deduplicated on a ``τ/2`` grid."""
    pts, nrm = [], []
    for d, nm, cam in zip(depths, normals, cameras):
        d = np.asarray(d)
        ys, xs = np.nonzero(d > 0)
        pts.append(unproject(cam, np.stack([xs, ys], axis=1) + 0.5, d[ys, xs]))
        nrm.append(np.asarray(nm)[ys, xs] @ cam.R)
    if not pts:
        return PointCloud()
    points, norms = np.concatenate(pts), np.concatenate(nrm)
    if len(points) == 0:
        return PointCloud()
    keep = dedupe_grid(points, tau / 2)
    return PointCloud(points[keep], norms[keep], np.ones(len(keep), dtype=np.int64))


# -- metrics ------------------------------------------------------------------


class GridIndex:
    """Uniform hash grid for fixed-radius nearest-neighbour queries."""

    def __init__(self, points: np.ndarray, cell: float):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.cell = float(cell)
        keys = self._keys(np.floor(self.points / self.cell).astype(np.int64))
        self.order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[self.order]

    @staticmethod
    def _keys(cells: np.ndarray) -> np.ndarray:
        # cells are shifted into a 21-bit window per axis; collisions only
        # merge buckets, distances are always checked exactly
        c = cells & 0x1FFFFF
        return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]

    def nearest_within(self, queries: np.ndarray, radius: float) -> np.ndarray:
        """Distance to the nearest indexed point if it is ``<= radius``, else ``inf``."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        best = np.full(len(queries), np.inf)
        if len(self.points) == 0 or len(queries) == 0:
            return best
        reach = int(np.ceil(radius / self.cell))
        base = np.floor(queries / self.cell).astype(np.int64)
        rng = range(-reach, reach + 1)
        for dx in rng:
            for dy in rng:
                for dz in rng:
                    keys = self._keys(base + np.array([dx, dy, dz]))
                    lo = np.searchsorted(self.sorted_keys, keys, side="left")
                    hi = np.searchsorted(self.sorted_keys, keys, side="right")
                    span = hi - lo
                    for k in range(int(span.max(initial=0))):
                        has = span > k
                        idx = self.order[lo[has] + k]
                        dist = np.linalg.norm(self.points[idx] - queries[has], axis=1)
                        best[has] = np.minimum(best[has], dist)
        return np.where(best <= radius, best, np.inf)


def within_fraction(queries: np.ndarray, reference: np.ndarray, tau: float) -> float:
    """Fraction of ``queries`` with a ``reference`` point at distance ``<= tau``."""
    if len(queries) == 0:
        return float("nan")
    dist = GridIndex(reference, tau).nearest_within(queries, tau)
    return float(np.isfinite(dist).mean())


@dataclass
class CloudMetrics:
    tau: float
    accuracy: float
    completeness: float
    f1: float
    n_pred: int
    n_gt: int
    accuracy_undefined: bool = False
    completeness_undefined: bool = False

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in self.__dict__.items()}


def f1_score(accuracy: float, completeness: float) -> float:
    if not (accuracy > 0 and completeness > 0):
        return 0.0
    return 2 * accuracy * completeness / (accuracy + completeness)


def cloud_metrics(pred: PointCloud, gt: PointCloud, tau: float) -> CloudMetrics:
    """Accuracy (pred near GT), completeness (GT near pred) and their F1 at distance ``tau``.

    An empty prediction leaves accuracy undefined (NaN, flagged) and an
    empty ground truth does the same for completeness; F1 is then 0.
    """
    pp = np.asarray(pred.points if isinstance(pred, PointCloud) else pred, dtype=np.float64).reshape(-1, 3)
    gp = np.asarray(gt.points if isinstance(gt, PointCloud) else gt, dtype=np.float64).reshape(-1, 3)
    acc = within_fraction(pp, gp, tau) if len(gp) else (float("nan") if len(pp) == 0 else 0.0)
    comp = within_fraction(gp, pp, tau) if len(pp) else (float("nan") if len(gp) == 0 else 0.0)
    return CloudMetrics(tau, acc, comp, f1_score(acc, comp), len(pp), len(gp), len(pp) == 0, len(gp) == 0)


def depth_metrics(pred, gt, mask=None) -> dict:
    """MAE, RMSE and the fractions within 2% and 5% relative error over ``mask ∧ gt > 0``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    m = gt > 0
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    if not m.any():
        return {"mae": float("nan"), "rmse": float("nan"), "within_2pct": float("nan"),
                "within_5pct": float("nan"), "n": 0, "undefined": True}
    err = pred[m] - gt[m]
    rel = np.abs(err) / gt[m]
    return {
        "mae": float(np.abs(err).mean()),
        "rmse": float(np.sqrt((err**2).mean())),
        "within_2pct": float((rel <= 0.02).mean()),
        "within_5pct": float((rel <= 0.05).mean()),
        "n": int(m.sum()),
        "undefined": False,
    }
