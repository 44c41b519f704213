"""Feature pyramid, bilinear sampling and attention-weighted group correlation.

Pixel coordinates follow :mod:`pmrl.geometry` (centres at ``x + 0.5``).
:func:`bilinear_sample` itself works in *index* coordinates, where integer
positions are grid samples; callers subtract 0.5 before sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tensor, as_tensor, conv2d, glorot, leaky_relu, repeat2d, softmax, take_rows
from .autodiff.tensor import _node
from .exceptions import DimensionError
from .geometry import apply_homography, depth_from_plane_unchecked, homography_unchecked


@dataclass(frozen=True)
class SupportWindow:
    size: int = 3
    dilation: int = 3

    def __post_init__(self):
        if self.size % 2 != 1 or self.size < 1:
            raise DimensionError(f"window size must be odd, got {self.size}")

    @property
    def offsets(self) -> np.ndarray:
        """``[size², 2]`` integer ``(dx, dy)`` offsets, row-major, centre included."""
        r = (self.size - 1) // 2
        ys, xs = np.mgrid[-r : r + 1, -r : r + 1]
        return np.stack([xs.ravel(), ys.ravel()], axis=1) * self.dilation


# -- feature pyramid ------------------------------------------------------


def init_fpn(store: ParamStore, rng: np.random.Generator, channels=(32, 16, 8)) -> None:
    """Register FPN weights; ``channels`` lists output widths coarsest first."""
    c8, c4, c2 = channels
    widths = [(1, c2), (c2, c4), (c4, c8)]
    for i, (cin, cout) in enumerate(widths, start=1):
        store.add(f"fpn.down{i}.w", glorot(rng, cin * 9, cout * 9, (cout, cin, 3, 3)))
        store.add(f"fpn.down{i}.b", np.zeros(cout))
        store.add(f"fpn.conv{i}.w", glorot(rng, cout * 9, cout * 9, (cout, cout, 3, 3)))
        store.add(f"fpn.conv{i}.b", np.zeros(cout))
    store.add("fpn.top4.w", glorot(rng, c8, c4, (c4, c8, 1, 1)))
    store.add("fpn.top2.w", glorot(rng, c4, c2, (c2, c4, 1, 1)))
    store.add("fpn.lat4.w", glorot(rng, c4, c4, (c4, c4, 1, 1)))
    store.add("fpn.lat2.w", glorot(rng, c2, c2, (c2, c2, 1, 1)))


def normalize_groups(featmap, groups: int) -> Tensor:
    """Rescale each pixel's channel groups to norm ``sqrt(C/G)``.

    Group correlation of two normalized maps is then a per-group cosine
    similarity in ``[-1, 1]``, whatever the scale of the raw features.
    """
    featmap = as_tensor(featmap)
    c, h, w = featmap.shape
    if c % groups:
        raise DimensionError(f"{c} channels cannot be split into {groups} groups")
    x = featmap.reshape(groups, c // groups, h, w)
    norm = ((x * x).sum(axis=1, keepdims=True) + 1e-12) ** 0.5
    return (x * (np.sqrt(c / groups)) / norm).reshape(c, h, w)


def extract_pyramid(image, store: ParamStore, groups: int | None = None) -> list[Tensor]:
    """Feature maps at 1/8, 1/4 and 1/2 resolution, coarsest first.

    Three stride-2 stages (each a strided 3x3 conv and a 3x3 conv) build the
    bottom-up path; the top-down path adds upsampled coarser outputs through
    1x1 convolutions. With ``groups`` set, every level is passed through
    :func:`normalize_groups`.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] % 8 or img.shape[1] % 8:
        raise DimensionError(f"expected an [H, W] image with extents divisible by 8, got {img.shape}")
    x = Tensor((img - 0.5)[None] * 2.0)
    stages = []
    for i in (1, 2, 3):
        x = leaky_relu(conv2d(x, store[f"fpn.down{i}.w"], store[f"fpn.down{i}.b"], stride=2, padding=1))
        x = leaky_relu(conv2d(x, store[f"fpn.conv{i}.w"], store[f"fpn.conv{i}.b"], padding=1))
        stages.append(x)
    c2, c4, c8 = stages
    out8 = c8
    out4 = conv2d(c4, store["fpn.lat4.w"]) + conv2d(repeat2d(out8, 2), store["fpn.top4.w"])
    out2 = conv2d(c2, store["fpn.lat2.w"]) + conv2d(repeat2d(out4, 2), store["fpn.top2.w"])
    levels = [out8, out4, out2]
    if groups is not None:
        levels = [normalize_groups(f, groups) for f in levels]
    return levels


def box_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    h, w = image.shape
    return image.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def patch_descriptors(image: np.ndarray) -> np.ndarray:
    """Zero-mean, norm-3 descriptors of each pixel's 3x3 neighbourhood, ``[9, H, W]``.

    Dot products of two descriptors divided by 9 are the normalized cross
    correlation of the two patches. Flat patches get a zero descriptor.
    """
    padded = np.pad(image, 1, mode="edge")
    h, w = image.shape
    stack = np.stack([padded[dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)])
    stack = stack - stack.mean(axis=0, keepdims=True)
    norm = np.linalg.norm(stack, axis=0, keepdims=True)
    return np.where(norm > 1e-6, 3.0 * stack / np.maximum(norm, 1e-12), 0.0)


def descriptor_pyramid(image: np.ndarray, scales=(0.125, 0.25, 0.5)) -> list[Tensor]:
    return [Tensor(patch_descriptors(box_downsample(image, round(1 / s)))) for s in scales]


def to_rows(featmap) -> Tensor:
    """``[C, H, W]`` → ``[H·W, C]`` so pixels can be gathered by flat index."""
    featmap = as_tensor(featmap)
    c = featmap.shape[0]
    return featmap.reshape(c, -1).T


# -- sampling -------------------------------------------------------------


def _weighted_gather(rows: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """``out[...] = Σ_j weights[..., j] · rows[idx[..., j]]``."""
    c = rows.shape[1]
    out = np.einsum("...j,...jc->...c", weights, rows.data[idx])

    def backward(g):
        grad = np.zeros_like(rows.data)
        contrib = weights[..., None] * g[..., None, :]
        np.add.at(grad, idx.reshape(-1), contrib.reshape(-1, c))
        return (grad,)

    return _node(out, (rows,), "bilinear", backward)


def bilinear_rows(rows, height: int, width: int, q: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Sample a row-major feature map at index coordinates ``q[..., (x, y)]``.

    Positions within half a cell of the grid are sampled with clamped
    coordinates; anything further out returns zeros and ``valid = False``.
    """
    rows = as_tensor(rows)
    q = np.asarray(q, dtype=np.float64)
    x, y = q[..., 0], q[..., 1]
    valid = np.isfinite(x) & np.isfinite(y)
    valid &= (x >= -0.5) & (x <= width - 0.5) & (y >= -0.5) & (y <= height - 0.5)
    x = np.clip(np.where(valid, x, 0.0), 0.0, width - 1.0)
    y = np.clip(np.where(valid, y, 0.0), 0.0, height - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), width - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx, fy = x - x0, y - y0
    idx = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    w = w * valid[..., None]
    return _weighted_gather(rows, idx, w), valid


def bilinear_sample(featmap, q) -> tuple[Tensor, np.ndarray]:
    """Bilinear sample of a ``[C, H, W]`` map at index coordinates ``q[..., 2]``."""
    featmap = as_tensor(featmap)
    _, h, w = featmap.shape
    return bilinear_rows(to_rows(featmap), h, w, q)


# -- correlation ----------------------------------------------------------


def group_correlation(f_ref, f_src, groups: int) -> Tensor:
    """``(G/C)·⟨f_ref_g, f_src_g⟩`` for each of ``G`` contiguous channel groups."""
    f_ref, f_src = as_tensor(f_ref), as_tensor(f_src)
    c = f_ref.shape[-1]
    if c % groups:
        raise DimensionError(f"{c} channels cannot be split into {groups} groups")
    prod = (f_ref * f_src).reshape(f_ref.shape[:-1] + (groups, c // groups))
    return prod.sum(axis=-1) * (groups / c)


def support_indices(centers: np.ndarray, window: SupportWindow, height: int, width: int) -> np.ndarray:
    """Flat indices ``[P, α²]`` of the window around integer ``centers[:, (x, y)]``, clamped."""
    off = window.offsets
    xs = np.clip(centers[:, None, 0] + off[None, :, 0], 0, width - 1)
    ys = np.clip(centers[:, None, 1] + off[None, :, 1], 0, height - 1)
    return ys * width + xs


def attention_weights(ref_rows, support_idx: np.ndarray, h) -> Tensor:
    """Softmax over the window of ``(ℱ_q · h)/√C``; returns ``[P, α²]``."""
    ref_rows = as_tensor(ref_rows)
    c = ref_rows.shape[1]
    logits = take_rows(ref_rows, support_idx) @ as_tensor(h).reshape(c, 1)
    return softmax(logits.reshape(support_idx.shape) * (1.0 / np.sqrt(c)), axis=-1)


@dataclass
class LevelFeatures:
    """One pyramid level of one image, flattened for gathering."""

    rows: Tensor
    height: int
    width: int

    @classmethod
    def from_map(cls, featmap) -> LevelFeatures:
        featmap = as_tensor(featmap)
        return cls(to_rows(featmap), featmap.shape[1], featmap.shape[2])

    @property
    def channels(self) -> int:
        return self.rows.shape[1]


def patch_correlation(
    normal: np.ndarray,
    delta: np.ndarray,
    ref: LevelFeatures,
    src: LevelFeatures,
    attn,
    support_idx: np.ndarray,
    cam_ref,
    cam_src,
    groups: int,
) -> tuple[Tensor, np.ndarray]:
    """Attention-weighted group correlation of oriented points against one source.

    Args:
        normal, delta: ``[P, 3]`` and ``[P]`` planes in the reference frame.
        attn: ``[P, α²]`` attention weights for each row's window.
        support_idx: ``[P, α²]`` flat reference indices of the window samples.

    Returns:
        ``([P, G] correlation, [P] validity)``. A row is invalid when more
        than half of its warped supports are unusable (outside the source,
        behind either camera, or on a degenerate plane).
    """
    n_rows, n_sup = support_idx.shape
    q = np.stack([support_idx % ref.width, support_idx // ref.width], axis=-1) + 0.5
    H = homography_unchecked(normal, delta, cam_ref, cam_src)
    warped, w = apply_homography(H[:, None], q)
    d_ref = depth_from_plane_unchecked(normal[:, None], delta[:, None], q, cam_ref.K)
    usable = np.isfinite(w) & (w > 0) & np.isfinite(d_ref) & (d_ref > 0)
    warped = np.where(usable[..., None], warped, np.nan)
    f_src, inside = bilinear_rows(src.rows, src.height, src.width, warped - 0.5)
    usable &= inside
    f_ref = take_rows(ref.rows, support_idx)
    corr = group_correlation(f_ref, f_src, groups)
    weights = as_tensor(attn) * usable.astype(np.float64)
    mass = weights.data.sum(axis=-1, keepdims=True)
    denom = weights.sum(axis=-1, keepdims=True) + Tensor((mass <= 0).astype(np.float64))
    weights = weights / denom
    out = (weights.reshape(n_rows, n_sup, 1) * corr).sum(axis=1)
    valid = (n_sup - usable.sum(axis=-1)) <= n_sup // 2
    return out, valid & np.isfinite(delta)
