"""Per-pixel source-view visibility: geometric priors, MLP, sampling, weighting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tensor, add_linear, as_tensor, concat, leaky_relu, linear, log, sigmoid
from .geometry import Camera, angle_between, homogenize, relative_pose


@dataclass
class GeometricPriors:
    """Priors for ``P`` oriented points against one source (arrays of shape ``[P]``)."""

    scale_ratio: np.ndarray
    incident_angle: np.ndarray
    tri_angle: np.ndarray
    tri_angle_diff: np.ndarray
    visible: np.ndarray

    def features(self) -> np.ndarray:
        """``[P, 3]`` network inputs: log scale ratio, incident angle, triangulation offset."""
        out = np.stack([np.log(self.scale_ratio), self.incident_angle, self.tri_angle_diff], axis=-1)
        return np.where(self.visible[:, None], out, 0.0)


def compute_priors(
    normal: np.ndarray,
    delta: np.ndarray,
    pix: np.ndarray,
    cam_ref: Camera,
    cam_src: Camera,
    tri_target: float = np.deg2rad(15.0),
    clamp: float = 8.0,
) -> GeometricPriors:
    """Scale, incident-angle and triangulation priors at the point where each
    pixel ray meets its plane.

    ``scale_ratio`` is the area magnification ``|det ∂(Hq)/∂q|`` of the
    plane-induced homography at the pixel, i.e. how many source pixels one
    reference pixel covers. Points behind either camera are flagged
    ``visible = False`` with neutral prior values.
    """
    normal = np.asarray(normal, dtype=np.float64).reshape(-1, 3)
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    ray = homogenize(np.asarray(pix, dtype=np.float64).reshape(-1, 2)) @ cam_ref.K_inv.T
    denom = np.einsum("pi,pi->p", normal, ray)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = -delta / denom
    X = ray * depth[:, None]
    R, t = relative_pose(cam_ref, cam_src)
    X_src = X @ R.T + t
    visible = np.isfinite(depth) & (depth > 0) & (np.abs(denom) > 1e-12) & (X_src[:, 2] > 0)
    visible &= np.abs(delta) > 1e-12

    c_src = -R.T @ t
    safe_delta = np.where(visible, delta, 1.0)
    H = cam_src.K @ (R[None] - t[None, :, None] * (normal / safe_delta[:, None])[:, None, :]) @ cam_ref.K_inv
    q = np.einsum("pij,pj->pi", H, homogenize(pix.reshape(-1, 2)))
    w = np.where(visible, q[:, 2], 1.0)
    det_j = np.linalg.det(H) / w**3
    scale = np.clip(np.abs(np.where(visible, det_j, 1.0)), 1.0 / clamp, clamp)
    scale = np.where(np.isfinite(scale), scale, 1.0)

    incident = angle_between(normal, c_src - X)
    tri = angle_between(-X, c_src - X)
    incident = np.where(visible, incident, 0.0)
    tri = np.where(visible, tri, 0.0)
    return GeometricPriors(scale, incident, tri, np.abs(tri - tri_target), visible)


def init_visibility_mlp(store: ParamStore, rng: np.random.Generator, groups: int, hidden=(16, 16)) -> None:
    d_in = 3 + groups
    for i, width in enumerate(hidden):
        add_linear(store, f"vis.l{i}", d_in, width, rng)
        d_in = width
    add_linear(store, "vis.out", d_in, 1, rng)


def visibility_mlp(priors: np.ndarray, corr, store: ParamStore, n_hidden: int = 2) -> Tensor:
    """Sigmoid-terminated MLP over ``[..., 3]`` priors and ``[..., G]`` correlations."""
    x = concat([Tensor(priors), as_tensor(corr)], axis=-1)
    for i in range(n_hidden):
        x = leaky_relu(linear(x, store[f"vis.l{i}.w"], store[f"vis.l{i}.b"]))
    out = sigmoid(linear(x, store["vis.out.w"], store["vis.out.b"]))
    return out.reshape(out.shape[:-1])


def sample_views(vhat: np.ndarray, n: int, mode: str = "greedy", rng=None) -> np.ndarray:
    """Pick ``n`` source indices per row of ``vhat [P, S]``.

    Greedy takes the top ``n`` (ties to the lower index). Stochastic draws
    without replacement with probability proportional to ``vhat`` (Gumbel
    top-k). Zero-visibility sources fill remaining slots by index.
    """
    vhat = np.asarray(vhat, dtype=np.float64)
    n = min(n, vhat.shape[1])
    if mode == "greedy":
        keys = vhat
    elif mode == "stochastic":
        gumbel = -np.log(-np.log(rng.uniform(1e-300, 1.0, size=vhat.shape)))
        with np.errstate(divide="ignore"):
            keys = np.where(vhat > 0, np.log(vhat) + gumbel, -np.inf)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    order = np.lexsort((np.arange(vhat.shape[1])[None].repeat(len(vhat), 0), -keys), axis=-1)
    return order[:, :n]


def worst_views(vhat: np.ndarray, chosen: np.ndarray, m: int) -> np.ndarray:
    """The ``m`` lowest-visibility sources per row outside ``chosen`` (ties to lower index)."""
    keys = np.asarray(vhat, dtype=np.float64).copy()
    np.put_along_axis(keys, chosen, np.inf, axis=1)
    m = min(m, vhat.shape[1] - chosen.shape[1])
    order = np.lexsort((np.arange(keys.shape[1])[None].repeat(len(keys), 0), keys), axis=-1)
    return order[:, :m]


def view_log_ratio(vhat, chosen: np.ndarray, worst: np.ndarray, eps: float = 1e-8) -> Tensor:
    """``log Σ_{v∈N} v̂ − log Σ_{m∈N∪M} v̂`` per row of ``vhat [P, S]``.

    ``chosen`` (N) and ``worst`` (M) are disjoint ``[P, ·]`` index arrays.
    ``eps`` keeps rows whose visibility mass is all zero finite (ratio 0).
    """
    vhat = as_tensor(vhat)
    num = np.zeros(vhat.shape)
    np.put_along_axis(num, chosen, 1.0, axis=1)
    den = num.copy()
    np.put_along_axis(den, worst, 1.0, axis=1)
    return log((vhat * num).sum(axis=-1) + eps) - log((vhat * den).sum(axis=-1) + eps)


def weighted_correlation(corr, weights: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Convex combination over the view axis.

    Args:
        corr: ``[..., V, G]`` correlations of the selected views.
        weights: ``[..., V]`` non-negative visibility weights, already zero
            for invalid or unselected views.

    Returns:
        ``([..., G] combination, [...] valid)``; rows with no weight are
        invalid and return zeros.
    """
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum(axis=-1, keepdims=True)
    valid = total[..., 0] > 0
    norm = np.where(total > 0, weights / np.where(total > 0, total, 1.0), 0.0)
    out = (as_tensor(corr) * norm[..., None]).sum(axis=-2)
    return out, valid
