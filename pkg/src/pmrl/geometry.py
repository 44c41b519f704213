"""Cameras, oriented points and plane-induced homographies.

Conventions used throughout the package:

* Cameras map world points with ``X_cam = R X_world + t``; ``K`` holds focal
  lengths and principal point in pixels.
* Integer pixel ``(x, y)`` has its centre at continuous coordinate
  ``(x + 0.5, y + 0.5)``. Every function here takes continuous coordinates;
  :func:`pixel_grid` produces centres.
* An oriented point is a plane ``nᵀX + δ = 0`` in the reference camera frame,
  with ``n`` unit length and facing the camera (``n · ray < 0``), so ``δ > 0``
  for planes in front of the camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import BehindCameraError, DegeneratePlaneError, DimensionError

GRAZING_EPS = 1e-12


@dataclass
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    d_min: float = 0.1
    d_max: float = 100.0
    _K_inv: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        self.d_min = float(self.d_min)
        self.d_max = float(self.d_max)
        self._K_inv = np.linalg.inv(self.K)

    def validate(self, tol: float = 1e-9) -> None:
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=tol) or abs(np.linalg.det(self.R) - 1) > tol:
            raise ValueError("R must be a proper rotation")
        if np.any(np.abs(np.tril(self.K, -1)) > 0) or np.any(np.diag(self.K) <= 0):
            raise ValueError("K must be upper-triangular with positive diagonal")
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"invalid depth range [{self.d_min}, {self.d_max}]")

    @property
    def K_inv(self) -> np.ndarray:
        return self._K_inv

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    def scaled(self, factor: float) -> Camera:
        """Same pose with the image resampled by ``factor`` (pixel-centre exact)."""
        S = np.diag([factor, factor, 1.0])
        return Camera(
            S @ self.K,
            self.R,
            self.t,
            int(self.width * factor),
            int(self.height * factor),
            self.d_min,
            self.d_max,
        )

    def to_camera_frame(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.R.T + self.t

    def to_world_frame(self, Xc: np.ndarray) -> np.ndarray:
        return (np.asarray(Xc) - self.t) @ self.R

    def rays(self, pix: np.ndarray) -> np.ndarray:
        """Camera-frame ray directions ``K⁻¹ p̃`` (unit z-component)."""
        return homogenize(pix) @ self.K_inv.T


def look_at(center, target, up=(0.0, -1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation of a camera at ``center`` looking at ``target``.

    Camera axes: x right, y down, z forward. ``up`` is the world direction
    that should appear towards the top of the image.
    """
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ center


def intrinsics(focal: float, width: int, height: int) -> np.ndarray:
    return np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])


def homogenize(pix: np.ndarray) -> np.ndarray:
    pix = np.asarray(pix, dtype=np.float64)
    return np.concatenate([pix, np.ones(pix.shape[:-1] + (1,))], axis=-1)


def pixel_grid(height: int, width: int) -> np.ndarray:
    """``[H, W, 2]`` continuous centres ``(x + 0.5, y + 0.5)``."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([xs + 0.5, ys + 0.5], axis=-1)


def _ray_dot(n: np.ndarray, pix: np.ndarray, K: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", np.asarray(n, dtype=np.float64), homogenize(pix) @ np.linalg.inv(K).T)


def depth_from_plane_unchecked(n, delta, pix, K) -> np.ndarray:
    """Vectorised ``d = −δ / (n · K⁻¹p̃)``; non-finite where the ray grazes the plane."""
    denom = _ray_dot(n, pix, K)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = -np.asarray(delta, dtype=np.float64) / denom
    return np.where(np.abs(denom) < GRAZING_EPS, np.nan, depth)


def depth_from_plane(n, delta, pix, K) -> np.ndarray | float:
    """Depth along the ray of ``pix`` at which it meets the plane ``(n, δ)``.

    Raises:
        DegeneratePlaneError: the ray is (numerically) parallel to the plane.
    """
    denom = _ray_dot(n, pix, K)
    if np.any(np.abs(denom) < GRAZING_EPS):
        raise DegeneratePlaneError("viewing ray grazes the plane")
    depth = -np.asarray(delta, dtype=np.float64) / denom
    return float(depth) if np.ndim(depth) == 0 else depth


def plane_from_depth_normal(depth, n, pix, K) -> tuple[np.ndarray, np.ndarray | float]:
    """Oriented point ``(n, δ)`` through the point at ``depth`` on the ray of ``pix``.

    Raises:
        DegeneratePlaneError: non-positive depth, grazing ray, or a normal that
            does not face the camera.
    """
    n = np.asarray(n, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise DegeneratePlaneError("depth must be positive")
    denom = _ray_dot(n, pix, K)
    if np.any(np.abs(denom) < GRAZING_EPS):
        raise DegeneratePlaneError("viewing ray grazes the plane")
    if np.any(denom > 0):
        raise DegeneratePlaneError("normal faces away from the camera (n · ray > 0)")
    delta = -depth * denom
    return n, (float(delta) if np.ndim(delta) == 0 else delta)


def relative_pose(cam_ref: Camera, cam_src: Camera) -> tuple[np.ndarray, np.ndarray]:
    """``(R, t)`` with ``X_src = R X_ref + t`` for camera-frame points."""
    R = cam_src.R @ cam_ref.R.T
    t = cam_src.t - R @ cam_ref.t
    return R, t


def homography(n, delta, cam_ref: Camera, cam_src: Camera) -> np.ndarray:
    """Plane-induced homography ``K_s (R − t nᵀ/δ) K_r⁻¹`` (batched over leading axes).

    Raises:
        DegeneratePlaneError: ``|δ|`` below the grazing threshold.
    """
    n = np.asarray(n, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(np.abs(delta) < GRAZING_EPS):
        raise DegeneratePlaneError("plane passes through the reference camera centre")
    return homography_unchecked(n, delta, cam_ref, cam_src)


def homography_unchecked(n, delta, cam_ref: Camera, cam_src: Camera) -> np.ndarray:
    R, t = relative_pose(cam_ref, cam_src)
    with np.errstate(divide="ignore", invalid="ignore"):
        M = R - t[..., :, None] * (n / np.asarray(delta)[..., None])[..., None, :]
    return cam_src.K @ M @ cam_ref.K_inv


def apply_homography(H: np.ndarray, pix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map continuous coordinates through ``H``; returns ``(pixels, w)``.

    ``H`` may be ``[..., 3, 3]`` broadcasting against ``pix[..., 2]``.
    """
    q = np.einsum("...ij,...j->...i", H, homogenize(pix))
    w = q[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = q[..., :2] / w[..., None]
    return out, w


def project(cam: Camera, X) -> tuple[np.ndarray, np.ndarray | float]:
    """World point(s) to ``(pixel, depth)``.

    Raises:
        BehindCameraError: any point has depth <= 0.
    """
    Xc = cam.to_camera_frame(np.asarray(X, dtype=np.float64))
    depth = Xc[..., 2]
    if np.any(depth <= 0):
        raise BehindCameraError("point is behind the camera")
    q = Xc @ cam.K.T
    pix = q[..., :2] / q[..., 2:3]
    return pix, (float(depth) if np.ndim(depth) == 0 else depth)


def project_unchecked(cam: Camera, X) -> tuple[np.ndarray, np.ndarray]:
    Xc = cam.to_camera_frame(np.asarray(X, dtype=np.float64))
    q = Xc @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = q[..., :2] / q[..., 2:3]
    return pix, Xc[..., 2]


def unproject(cam: Camera, pix, depth) -> np.ndarray:
    """World point at ``depth`` along the ray through ``pix``."""
    Xc = cam.rays(pix) * np.asarray(depth, dtype=np.float64)[..., None]
    return cam.to_world_frame(Xc)


def ray_plane_camera_point(n, delta, pix, K) -> np.ndarray:
    """Camera-frame intersection of the ray through ``pix`` with plane ``(n, δ)``."""
    depth = depth_from_plane_unchecked(n, delta, pix, K)
    return (homogenize(pix) @ np.linalg.inv(K).T) * depth[..., None]


def unit(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def angle_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle in radians between vectors along the last axis (robust near 0 and π)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.einsum("...i,...i->...", a, b)
    return np.arctan2(cross, dot)


def check_pixels(pix: np.ndarray) -> np.ndarray:
    pix = np.asarray(pix, dtype=np.float64)
    if pix.shape[-1] != 2:
        raise DimensionError(f"pixel arrays need a trailing axis of 2, got {pix.shape}")
    return pix
