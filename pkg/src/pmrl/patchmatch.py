"""Coarse-to-fine red-black PatchMatch over oriented-point maps.

One *half sweep* updates every pixel of one checkerboard parity:

1. score each source view at the pixel's current plane and estimate its
   visibility;
2. pick the views used for matching (greedy top-N at inference, sampled
   during training);
3. build candidates (kernel neighbours' planes, a perturbation of the
   current plane, the current plane itself), correlate them against the
   picked views and combine by visibility;
4. regularize the candidate scores with the recurrent scorer and select.

Both scorers (learned and handcrafted) plug into the same driver through the
small interface documented on :class:`BaselineScorer`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ParamStore,
    Tensor,
    add_gru,
    add_linear,
    as_tensor,
    concat,
    conv2d,
    gru_cell,
    gru_weights,
    linear,
    log_softmax,
    no_grad,
    put_rows,
    stack,
    take_rows,
)
from .features import (
    LevelFeatures,
    SupportWindow,
    attention_weights,
    descriptor_pyramid,
    extract_pyramid,
    init_fpn,
    patch_correlation,
    support_indices,
)
from .geometry import Camera, angle_between, homogenize, pixel_grid
from .views import (
    compute_priors,
    init_visibility_mlp,
    sample_views,
    view_log_ratio,
    visibility_mlp,
    weighted_correlation,
    worst_views,
)

KERNEL_A = [(0, -1), (0, 1), (-1, 0), (1, 0)]
KERNEL_B = KERNEL_A + [(1, 2), (-2, 1), (-1, -2), (2, -1)]
KERNEL_C = KERNEL_B + [(0, -3), (0, 3), (-3, 0), (3, 0), (0, -5), (0, 5), (-5, 0), (5, 0)]
KERNELS = {"A": KERNEL_A, "B": KERNEL_B, "C": KERNEL_C}
NEIGHBOURS_4 = KERNEL_A


# -- plane maps -----------------------------------------------------------


@dataclass
class PlaneMap:
    """Per-pixel oriented points ``nᵀX + δ = 0`` in the reference camera frame."""

    normal: np.ndarray  # [H, W, 3]
    delta: np.ndarray  # [H, W]

    @property
    def shape(self) -> tuple[int, int]:
        return self.delta.shape

    def depth(self, cam: Camera) -> np.ndarray:
        rays = homogenize(pixel_grid(*self.shape)) @ cam.K_inv.T
        with np.errstate(divide="ignore", invalid="ignore"):
            return -self.delta / np.einsum("hwi,hwi->hw", self.normal, rays)

    def stacked(self) -> np.ndarray:
        """``[4, H, W]`` channels ``(n_x, n_y, n_z, δ)``."""
        return np.concatenate([self.normal.transpose(2, 0, 1), self.delta[None]], axis=0)

    @classmethod
    def from_depth_normal(cls, depth: np.ndarray, normal: np.ndarray, cam: Camera) -> PlaneMap:
        rays = homogenize(pixel_grid(*depth.shape)) @ cam.K_inv.T
        return cls(normal.copy(), -depth * np.einsum("hwi,hwi->hw", normal, rays))


def random_normals(rng: np.random.Generator, rays: np.ndarray) -> np.ndarray:
    """Isotropic unit normals, flipped so that ``n · ray < 0``."""
    n = rng.normal(size=rays.shape)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    facing = np.einsum("...i,...i->...", n, rays)
    return np.where(facing[..., None] > 0, -n, n)


def inverse_depth_sample(u: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    """Map uniform ``u ∈ [0,1]`` to depths whose inverse is uniform on ``[1/d_max, 1/d_min]``."""
    return 1.0 / (1.0 / d_max + u * (1.0 / d_min - 1.0 / d_max))


def init_map(rng: np.random.Generator, height: int, width: int, cam: Camera) -> PlaneMap:
    """Random planes: inverse-uniform depth in the camera range, isotropic facing normals."""
    rays = homogenize(pixel_grid(height, width)) @ cam.K_inv.T
    depth = inverse_depth_sample(rng.uniform(size=(height, width)), cam.d_min, cam.d_max)
    normal = random_normals(rng, rays)
    return PlaneMap(normal, -depth * np.einsum("hwi,hwi->hw", normal, rays))


# -- propagation ----------------------------------------------------------


def onehot_kernels(offsets) -> tuple[np.ndarray, int]:
    """One-hot ``[K, 1, k, k]`` filters whose correlation reads ``field[p + offset]``."""
    radius = max(max(abs(dx), abs(dy)) for dx, dy in offsets)
    size = 2 * radius + 1
    kernels = np.zeros((len(offsets), 1, size, size))
    for i, (dx, dy) in enumerate(offsets):
        kernels[i, 0, radius + dy, radius + dx] = 1.0
    return kernels, radius


def propagate_onehot(field: np.ndarray, offsets) -> np.ndarray:
    """Gather ``field[:, p + offset]`` (border-clamped) for every offset by one-hot convolution.

    Returns ``[K, C, H, W]``.
    """
    kernels, radius = onehot_kernels(offsets)
    padded = np.pad(field, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    with no_grad():
        # channels become the batch axis so one filter bank serves all of them
        out = conv2d(Tensor(padded[:, None]), Tensor(kernels)).data
    return out.transpose(1, 0, 2, 3)


def propagate_direct(field: np.ndarray, offsets) -> np.ndarray:
    _, h, w = field.shape
    ys, xs = np.mgrid[0:h, 0:w]
    out = [field[:, np.clip(ys + dy, 0, h - 1), np.clip(xs + dx, 0, w - 1)] for dx, dy in offsets]
    return np.stack(out)


def parity_pixels(height: int, width: int, parity: int) -> np.ndarray:
    """Flat indices of pixels with ``(x + y) % 2 == parity`` in row-major order."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.flatnonzero(((xs + ys) % 2 == parity).ravel())


# -- candidate geometry ---------------------------------------------------


def plane_depth(normal: np.ndarray, delta: np.ndarray, rays: np.ndarray) -> np.ndarray:
    denom = np.einsum("...i,...i->...", normal, rays)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = -delta / denom
    return np.where(np.abs(denom) < 1e-12, np.nan, depth)


def candidate_valid(normal, delta, rays, d_min: float, d_max: float) -> np.ndarray:
    facing = np.einsum("...i,...i->...", normal, rays)
    depth = plane_depth(normal, delta, rays)
    ok = np.isfinite(depth) & (facing < -1e-12)
    return ok & (depth >= d_min) & (depth <= d_max)


def perturb(normal, depth, rays, rho: float, eta: float, rng: np.random.Generator):
    """Depth scaled by ``U[1−ρ, 1+ρ]``; normal tilted by ``U[0, η]`` about a random axis."""
    depth = depth * rng.uniform(1.0 - rho, 1.0 + rho, size=depth.shape)
    tangent = rng.normal(size=normal.shape)
    tangent -= np.einsum("...i,...i->...", tangent, normal)[..., None] * normal
    tangent /= np.maximum(np.linalg.norm(tangent, axis=-1, keepdims=True), 1e-12)
    theta = rng.uniform(0.0, eta, size=depth.shape)[..., None]
    new_normal = np.cos(theta) * normal + np.sin(theta) * tangent
    delta = -depth * np.einsum("...i,...i->...", new_normal, rays)
    return new_normal, delta


def point_distance(normal, delta, X) -> np.ndarray:
    return np.abs(np.einsum("...i,...i->...", normal, X) + delta)


def smoothness(n_a, delta_a, ray_a, n_b, delta_b, ray_b) -> np.ndarray:
    """``dist(ω_a, X_b) + dist(ω_b, X_a)`` with each pixel's point on its own plane.

    Non-finite results (grazing planes) are returned as ``inf``.
    """
    X_a = ray_a * plane_depth(n_a, delta_a, ray_a)[..., None]
    X_b = ray_b * plane_depth(n_b, delta_b, ray_b)[..., None]
    m = point_distance(n_a, delta_a, X_b) + point_distance(n_b, delta_b, X_a)
    return np.where(np.isfinite(m), m, np.inf)


def geometric_schedule(start: float, end: float, i: int, n: int) -> float:
    if n <= 1:
        return start
    return start * (end / start) ** (i / (n - 1))


def upsample(plane: PlaneMap, zeta: np.ndarray, cam_fine: Camera, cam_coarse: Camera):
    """Nearest-neighbour ×2 upsampling that keeps each parent's depth and normal.

    The parent's plane is re-anchored at the child's ray. A child ray that
    would see the parent normal edge-on or from behind gets a fronto-facing
    normal instead.
    """
    depth = plane.depth(cam_coarse).repeat(2, 0).repeat(2, 1)
    normal = plane.normal.repeat(2, 0).repeat(2, 1)
    h, w = depth.shape
    rays = homogenize(pixel_grid(h, w)) @ cam_fine.K_inv.T
    facing = np.einsum("hwi,hwi->hw", normal, rays)
    fronto = -rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    normal = np.where((facing < -1e-6)[..., None], normal, fronto)
    hc, wc = plane.shape
    z = zeta.reshape(hc, wc, *zeta.shape[1:]).repeat(2, 0).repeat(2, 1)
    return PlaneMap.from_depth_normal(depth, normal, cam_fine), z.reshape(h * w, *zeta.shape[1:])


# -- reward ---------------------------------------------------------------


def reward_kernel(depth, normal, gt_depth, gt_normal, depth_range: float, sigma_d: float, sigma_n: float):
    """Unnormalized Gaussian agreement ``exp(−θ²/2σ_n²)·exp(−Δ²/2σ_d²)``, in ``[0, 1]``.

    ``Δ`` is the depth error as a fraction of ``depth_range``; ``sigma_d``
    is likewise a fraction of the range.
    """
    theta = angle_between(normal, gt_normal)
    dd = (np.asarray(depth) - gt_depth) / depth_range
    r = np.exp(-(theta**2) / (2 * sigma_n**2)) * np.exp(-(dd**2) / (2 * sigma_d**2))
    return np.where(np.isfinite(r), r, 0.0)


# -- scorers --------------------------------------------------------------


class BaselineScorer:
    """Handcrafted scoring: NCC patch descriptors, uniform attention, one group.

    The candidate score is the visibility-weighted mean correlation; the
    visibility of a source is its correlation at the current plane, clipped
    to ``[0.01, 1]``. The hidden state is carried but never changed.

    Interface used by :class:`PatchMatch`: ``groups``, ``hidden_shape``,
    ``levels(image)``, ``attention(level, ref, support_idx)``,
    ``visibility(priors, corr)``, ``regularize(x, zeta)``.
    """

    groups = 1
    hidden_shape = (1, 1)

    def __init__(self, scales=(0.125, 0.25, 0.5)):
        self.scales = tuple(scales)

    def levels(self, image) -> list[LevelFeatures]:
        return [LevelFeatures.from_map(f) for f in descriptor_pyramid(np.asarray(image), self.scales)]

    def attention(self, level: int, ref: LevelFeatures, support_idx: np.ndarray) -> Tensor:
        return Tensor(np.full(support_idx.shape, 1.0 / support_idx.shape[1]))

    def visibility(self, priors: np.ndarray, corr) -> Tensor:
        return Tensor(np.clip(as_tensor(corr).data[..., 0], 0.01, 1.0))

    def regularize(self, x, zeta: np.ndarray):
        x = as_tensor(x)
        return x[:, : self.groups].mean(axis=-1), zeta


class LearnedScorer:
    """FPN features, learned attention, visibility MLP and stacked-GRU scoring."""

    def __init__(self, store: ParamStore, groups: int = 4, hidden_layers: int = 3, hidden_dim: int = 8,
                 vis_layers: int = 2, scales=(0.125, 0.25, 0.5)):
        self.store = store
        self.groups = groups
        self.hidden_shape = (hidden_layers, hidden_dim)
        self.vis_layers = vis_layers
        self.scales = tuple(scales)

    @classmethod
    def initialize(cls, rng: np.random.Generator, channels=(32, 16, 8), groups: int = 4,
                   hidden_layers: int = 3, hidden_dim: int = 8, vis_hidden=(16, 16), scales=(0.125, 0.25, 0.5)):
        store = ParamStore()
        init_fpn(store, rng, channels)
        for level, c in enumerate(channels):
            store.add(f"attn.h.{level}", np.zeros(c))
        init_visibility_mlp(store, rng, groups, vis_hidden)
        d_in = groups + len(NEIGHBOURS_4)
        for layer in range(hidden_layers):
            add_gru(store, f"gru.{layer}", d_in if layer == 0 else hidden_dim, hidden_dim, rng)
        add_linear(store, "head", hidden_dim, 1, rng)
        return cls(store, groups, hidden_layers, hidden_dim, len(vis_hidden), scales)

    def levels(self, image) -> list[LevelFeatures]:
        return [LevelFeatures.from_map(f) for f in extract_pyramid(image, self.store, self.groups)]

    def attention(self, level: int, ref: LevelFeatures, support_idx: np.ndarray) -> Tensor:
        return attention_weights(ref.rows, support_idx, self.store[f"attn.h.{level}"])

    def visibility(self, priors: np.ndarray, corr) -> Tensor:
        return visibility_mlp(priors, corr, self.store, self.vis_layers)

    def regularize(self, x, zeta: np.ndarray):
        h = as_tensor(x)
        new = []
        for layer in range(self.hidden_shape[0]):
            h = gru_cell(h, Tensor(zeta[:, layer]), gru_weights(self.store, f"gru.{layer}"))
            new.append(h.data)
        z = linear(h, self.store["head.w"], self.store["head.b"])
        return z.reshape(z.shape[0]), np.stack(new, axis=1)


# -- driver ---------------------------------------------------------------


@dataclass
class HalfSweepRecord:
    """Training-time quantities of one half sweep (kept for the loss)."""

    level: int
    iteration: int  # global iteration index across the schedule
    pixels: np.ndarray
    log_policy: Tensor | None  # [P, K]
    candidate_reward: np.ndarray  # [P, K]
    view_log_ratio: Tensor | None  # [P]
    gt_valid: np.ndarray  # [P]
    candidate_valid: np.ndarray | None = None  # [P, K]


@dataclass
class PatchMatchResult:
    depth: np.ndarray
    normal: np.ndarray
    visibility: np.ndarray | None
    camera: Camera
    level_depths: list[np.ndarray] = field(default_factory=list)
    level_normals: list[np.ndarray] = field(default_factory=list)
    level_cameras: list[Camera] = field(default_factory=list)
    rewards: list[tuple[int, np.ndarray]] = field(default_factory=list)
    records: list[HalfSweepRecord] = field(default_factory=list)


@dataclass
class PatchMatchSettings:
    scales: tuple = (0.125, 0.25, 0.5)
    iterations: tuple = (8, 2, 2)
    kernels: tuple = ("C", "B", "B")
    rho: tuple = (0.2, 0.02)
    eta_deg: tuple = (30.0, 5.0)
    n_views: int = 3
    n_invisible: int = 0
    window: SupportWindow = field(default_factory=SupportWindow)
    tri_angle_target_deg: float = 15.0
    scale_clamp: float = 8.0
    smooth_scale: float = 0.01
    perturb_schedule: str = "per_scale"


class PatchMatch:
    """Runs the coarse-to-fine schedule for one reference view.

    ``training=True`` records the quantities needed by the policy losses,
    samples views stochastically and selects candidates ε-greedily; it
    requires ground truth per level (``gt``: list of ``(depth, normal)``
    coarsest first). With ``epsilon = 0`` a training run makes the same
    choices as inference.
    """

    def __init__(self, scorer, settings: PatchMatchSettings):
        self.scorer = scorer
        self.s = settings

    def run(self, images, cameras: list[Camera], ref: int, sources: list[int], seed: int = 0,
            training: bool = False, epsilon: float = 0.0, gt=None, reward_sigmas=(0.05, np.deg2rad(15.0)),
            ) -> PatchMatchResult:
        s = self.s
        ids = [ref, *sources]
        feats = [self.scorer.levels(images[i]) for i in ids]
        plane = zeta = None
        result = None
        global_it = 0
        prev_cam = None
        out = PatchMatchResult(None, None, None, None)
        for level, scale in enumerate(s.scales):
            cam_r = cameras[ref].scaled(scale)
            cams_s = [cameras[i].scaled(scale) for i in sources]
            ref_f = feats[0][level]
            src_f = [f[level] for f in feats[1:]]
            h, w = ref_f.height, ref_f.width
            if level == 0:
                plane = init_map(np.random.default_rng([seed, 7919]), h, w, cam_r)
                zeta = np.zeros((h * w, *self.scorer.hidden_shape))
            else:
                plane, zeta = upsample(plane, zeta, cam_r, prev_cam)
            ctx = _LevelContext(level, cam_r, cams_s, ref_f, src_f, s, gt[level] if gt is not None else None)
            n_it = s.iterations[level]
            for it in range(n_it):
                if s.perturb_schedule == "per_scale":
                    step, n_steps = it, n_it
                else:
                    step, n_steps = global_it, sum(s.iterations)
                rho = geometric_schedule(s.rho[0], s.rho[1], step, n_steps)
                eta = np.deg2rad(geometric_schedule(s.eta_deg[0], s.eta_deg[1], step, n_steps))
                for parity in (0, 1):
                    rng = np.random.default_rng([seed, level, it, parity])
                    record = self._half_sweep(ctx, plane, zeta, parity, rho, eta, rng, training, epsilon,
                                              reward_sigmas)
                    if record is not None:
                        record.iteration = global_it
                        out.records.append(record)
                if training:
                    gd, gn = ctx.gt
                    r = reward_kernel(plane.depth(cam_r), plane.normal, gd, gn, cam_r.d_max - cam_r.d_min,
                                      *reward_sigmas)
                    out.rewards.append((level, np.where(gd > 0, r, 0.0)))
                global_it += 1
            out.level_depths.append(plane.depth(cam_r))
            out.level_normals.append(plane.normal.copy())
            out.level_cameras.append(cam_r)
            prev_cam = cam_r
            result = ctx
        with no_grad():
            vis = self._visibility_map(result, plane)
        out.depth, out.normal, out.visibility, out.camera = out.level_depths[-1], out.level_normals[-1], vis, prev_cam
        return out

    def visibility_at(self, images, cameras: list[Camera], ref: int, sources: list[int], depth: np.ndarray,
                      normal: np.ndarray, level: int = -1) -> np.ndarray:
        """``[H, W, S]`` visibility of each source for a given depth/normal map at one level.

        ``depth`` and ``normal`` must have that level's extents; pixels
        without depth get zero visibility.
        """
        level = level % len(self.s.scales)
        cam_r = cameras[ref].scaled(self.s.scales[level])
        feats = [self.scorer.levels(images[i])[level] for i in (ref, *sources)]
        ctx = _LevelContext(level, cam_r, [cameras[i].scaled(self.s.scales[level]) for i in sources],
                            feats[0], feats[1:], self.s, None)
        valid = depth > 0
        fill = np.where(valid[..., None], normal, [0.0, 0.0, -1.0])
        plane = PlaneMap.from_depth_normal(np.where(valid, depth, 1.0), fill, cam_r)
        with no_grad():
            return self._visibility_map(ctx, plane) * valid[..., None]

    # -- internals ------------------------------------------------------

    def _view_scores(self, ctx, pix_idx, normal, delta, attn, support_idx):
        """Correlation and visibility of every source at the given planes."""
        corrs, valids, priors, visible = [], [], [], []
        pix = ctx.pix[pix_idx]
        for cam_s, src in zip(ctx.cams_s, ctx.src_f):
            c, v = patch_correlation(normal, delta, ctx.ref_f, src, attn, support_idx, ctx.cam_r, cam_s,
                                     self.scorer.groups)
            pr = compute_priors(normal, delta, pix, ctx.cam_r, cam_s, np.deg2rad(self.s.tri_angle_target_deg),
                                self.s.scale_clamp)
            corrs.append(c)
            valids.append(v)
            priors.append(pr.features())
            visible.append(pr.visible & v)
        corr = stack(corrs, axis=1)
        mask = np.stack(visible, axis=1).astype(np.float64)
        vhat = self.scorer.visibility(np.stack(priors, axis=1), corr) * mask
        return vhat, np.stack(valids, axis=1)

    def _visibility_map(self, ctx, plane: PlaneMap) -> np.ndarray:
        h, w = plane.shape
        idx = np.arange(h * w)
        centers = np.stack([idx % w, idx // w], axis=1)
        support_idx = support_indices(centers, self.s.window, h, w)
        attn = self.scorer.attention(ctx.level, ctx.ref_f, support_idx)
        normal = plane.normal.reshape(-1, 3)
        delta = plane.delta.reshape(-1)
        vhat, _ = self._view_scores(ctx, idx, normal, delta, attn, support_idx)
        return vhat.data.reshape(h, w, -1)

    def _half_sweep(self, ctx, plane, zeta, parity, rho, eta, rng, training, epsilon, reward_sigmas):
        s = self.s
        h, w = plane.shape
        idx = parity_pixels(h, w, parity)
        P = len(idx)
        centers = np.stack([idx % w, idx // w], axis=1)
        rays = ctx.rays[idx]
        support_idx = support_indices(centers, s.window, h, w)
        attn = self.scorer.attention(ctx.level, ctx.ref_f, support_idx)

        flat_n = plane.normal.reshape(-1, 3)
        flat_d = plane.delta.reshape(-1)
        cur_n, cur_d = flat_n[idx], flat_d[idx]

        # 1-2. visibility at the current plane and view picking
        vhat, _ = self._view_scores(ctx, idx, cur_n, cur_d, attn, support_idx)
        vh = vhat.data
        # a current plane that no source can score says nothing about
        # visibility; such pixels weight all sources equally
        vh = np.where((vh > 0).any(axis=1, keepdims=True), vh, 1.0)
        n_src = vh.shape[1]
        log_ratio = None
        if training:
            # ε = 0 switches off all exploration, view sampling included
            chosen = sample_views(vh, s.n_views, "stochastic" if epsilon > 0 else "greedy", rng)
            worst = worst_views(vh, chosen, s.n_invisible)
            log_ratio = view_log_ratio(vhat, chosen, worst)
        else:
            chosen = sample_views(vh, s.n_views, "greedy")
        n_sel = chosen.shape[1]

        # 3. candidates: kernel neighbours, perturbation, current
        offsets = KERNELS[s.kernels[ctx.level]]
        prop = propagate_onehot(plane.stacked(), offsets).reshape(len(offsets), 4, -1)[:, :, idx]
        cand_n = [prop[k, :3].T for k in range(len(offsets))]
        cand_d = [prop[k, 3] for k in range(len(offsets))]
        cur_depth = plane_depth(cur_n, cur_d, rays)
        pn, pd = perturb(cur_n, cur_depth, rays, rho, eta, rng)
        cand_n += [pn, cur_n]
        cand_d += [pd, cur_d]
        cand_n = np.stack(cand_n, axis=1)  # [P, K, 3]
        cand_d = np.stack(cand_d, axis=1)  # [P, K]
        K = cand_d.shape[1]
        rays_k = np.broadcast_to(rays[:, None], cand_n.shape)
        geo_valid = candidate_valid(cand_n, cand_d, rays_k, ctx.cam_r.d_min, ctx.cam_r.d_max)
        safe_n = np.where(geo_valid[..., None], cand_n, cur_n[:, None])
        safe_d = np.where(geo_valid, cand_d, cur_d[:, None])

        # correlation of every candidate against each picked view
        rows_n = safe_n.reshape(-1, 3)
        rows_d = safe_d.reshape(-1)
        pixel_of_row = np.repeat(np.arange(P), K)
        attn_rows = take_rows(attn, pixel_of_row)
        sup_rows = support_idx[pixel_of_row]
        slot_corr, slot_w = [], []
        for j in range(n_sel):
            view_of_row = chosen[pixel_of_row, j]
            parts = []
            weight = np.zeros(P * K)
            for sidx in range(n_src):
                rows = np.flatnonzero(view_of_row == sidx)
                if rows.size == 0:
                    continue
                c, v = patch_correlation(rows_n[rows], rows_d[rows], ctx.ref_f, ctx.src_f[sidx],
                                         take_rows(attn_rows, rows), sup_rows[rows], ctx.cam_r, ctx.cams_s[sidx],
                                         self.scorer.groups)
                parts.append(put_rows(c, rows, P * K))
                weight[rows] = vh[pixel_of_row[rows], sidx] * v
            total = parts[0]
            for part in parts[1:]:
                total = total + part
            slot_corr.append(total)
            slot_w.append(weight)
        corr_v, corr_ok = weighted_correlation(stack(slot_corr, axis=1), np.stack(slot_w, axis=1))
        valid = geo_valid & corr_ok.reshape(P, K)

        # smoothness against the 4-connected current planes
        nb = propagate_direct(plane.stacked(), NEIGHBOURS_4).reshape(4, 4, -1)[:, :, idx]
        nb_rays = np.stack(
            [ctx.rays.reshape(h, w, 3)[np.clip(centers[:, 1] + dy, 0, h - 1), np.clip(centers[:, 0] + dx, 0, w - 1)]
             for dx, dy in NEIGHBOURS_4], axis=1)  # [P, 4, 3]
        m = smoothness(safe_n[:, :, None], safe_d[:, :, None], rays[:, None, None],
                       nb[:, :3].transpose(2, 0, 1)[:, None], nb[:, 3].T[:, None], nb_rays[:, None])
        depth_k = plane_depth(safe_n, safe_d, rays_k)
        smooth = np.log1p(np.minimum(m / (s.smooth_scale * depth_k[..., None]), 1e6))
        smooth = np.where(valid[..., None], smooth, 0.0).reshape(P * K, -1)

        # 4. recurrent scoring and selection
        x = concat([corr_v * valid.reshape(-1, 1).astype(np.float64), Tensor(smooth)], axis=-1)
        zeta_rows = zeta[idx][pixel_of_row]
        z, zeta_new = self.scorer.regularize(x, zeta_rows)
        scores = np.where(valid, z.data.reshape(P, K), -np.inf)
        choice = select(scores, rng, epsilon if training else 0.0)
        keep = np.isfinite(scores[np.arange(P), choice])
        choice = np.where(keep, choice, K - 1)
        flat_n[idx] = cand_n[np.arange(P), choice]
        flat_d[idx] = cand_d[np.arange(P), choice]
        new_z = zeta_new.reshape(P, K, *zeta.shape[1:])[np.arange(P), choice]
        zeta[idx] = np.where(keep[:, None, None], new_z, zeta[idx])

        if not training:
            return None
        gd, gn = ctx.gt
        gt_d = gd.reshape(-1)[idx]
        gt_n = gn.reshape(-1, 3)[idx]
        cand_reward = reward_kernel(depth_k, safe_n, gt_d[:, None], gt_n[:, None],
                                    ctx.cam_r.d_max - ctx.cam_r.d_min, *reward_sigmas)
        cand_reward = np.where(valid & (gt_d[:, None] > 0), cand_reward, 0.0)
        penalty = np.where(valid, 0.0, -1e9)
        log_policy = log_softmax(z.reshape(P, K) + Tensor(penalty), axis=-1)
        return HalfSweepRecord(ctx.level, 0, idx, log_policy, cand_reward, log_ratio, gt_d > 0, valid)


def select(scores: np.ndarray, rng: np.random.Generator, epsilon: float = 0.0) -> np.ndarray:
    """Per-row candidate choice.

    Greedy: argmax, ties resolved to the last column (the current plane)
    and then to the lowest index. With probability ``epsilon`` a row instead
    samples from the softmax over its finite scores.
    """
    P, K = scores.shape
    best = scores.max(axis=1, keepdims=True)
    is_best = scores == best
    choice = np.where(is_best[:, -1], K - 1, np.argmax(is_best, axis=1))
    if epsilon > 0:
        explore = rng.uniform(size=P) < epsilon
        finite = np.isfinite(scores)
        shifted = np.where(finite, scores - np.where(np.isfinite(best), best, 0.0), -np.inf)
        prob = np.exp(shifted)
        total = prob.sum(axis=1, keepdims=True)
        prob = np.where(total > 0, prob / np.where(total > 0, total, 1.0), 1.0 / K)
        u = rng.uniform(size=(P, 1))
        sampled = np.minimum((np.cumsum(prob, axis=1) < u).sum(axis=1), K - 1)
        choice = np.where(explore & finite.any(axis=1), sampled, choice)
    return choice


class _LevelContext:
    def __init__(self, level, cam_r, cams_s, ref_f, src_f, settings, gt):
        self.level = level
        self.cam_r = cam_r
        self.cams_s = cams_s
        self.ref_f = ref_f
        self.src_f = src_f
        self.gt = gt
        self.pix = pixel_grid(ref_f.height, ref_f.width).reshape(-1, 2)
        self.rays = homogenize(self.pix) @ cam_r.K_inv.T
