"""Finite-difference oracle and small builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from pmrl.autodiff import Tensor, backward


def numeric_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at array ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        hi = f()
        x[i] = old - step
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_grads(build, tensors: list[Tensor], step: float = 1e-5) -> float:
    """Largest relative error between autodiff and central differences.

    ``build()`` must return a scalar tensor computed from ``tensors``.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    backward(build())
    worst = 0.0
    for t in tensors:
        num = numeric_grad(lambda: float(build().data), t.data, step)
        worst = max(worst, rel_err(t.grad, num))
    return worst


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng: np.random.Generator, width: int = 64, height: int = 48):
    from pmrl.geometry import Camera, intrinsics

    K = intrinsics(rng.uniform(40, 90), width, height)
    K[0, 2] += rng.uniform(-3, 3)
    K[1, 2] += rng.uniform(-3, 3)
    return Camera(K, random_rotation(rng), rng.normal(size=3), width, height, 0.5, 50.0)


def random_pair(rng: np.random.Generator):
    """Reference camera at the origin and a nearby source camera."""
    from pmrl.geometry import Camera, intrinsics

    K = intrinsics(rng.uniform(40, 90), 64, 48)
    ref = Camera(K, np.eye(3), np.zeros(3), 64, 48, 0.5, 50.0)
    angle = rng.uniform(-0.3, 0.3, size=3)
    R = random_rotation(rng) if rng.uniform() < 0.2 else _small_rotation(angle)
    src = Camera(K, R, rng.uniform(-1, 1, size=3), 64, 48, 0.5, 50.0)
    return ref, src


def _small_rotation(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = w / theta
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * Kx + (1 - np.cos(theta)) * Kx @ Kx


def random_facing_plane(rng: np.random.Generator, pix: np.ndarray, K: np.ndarray, depth: float):
    """Unit normal facing the ray of ``pix`` (at least ~15° from grazing) and its δ."""
    ray = np.linalg.inv(K) @ np.array([pix[0], pix[1], 1.0])
    ray /= np.linalg.norm(ray)
    while True:
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        if n @ ray > 0:
            n = -n
        if n @ ray < -0.25:
            break
    return n, -depth * (n @ (np.linalg.inv(K) @ np.array([pix[0], pix[1], 1.0])))


# -- PatchMatch oracles ---------------------------------------------------


def half_sweep_setup(scorer, seed: int = 0, n_sources: int = 2, level: int = 0):
    """An 8x8 (coarsest level of 64x64) context, a random plane map and hidden state."""
    from pmrl.patchmatch import PatchMatchSettings, _LevelContext, init_map
    from pmrl.synth import SceneConfig, generate_scene, render_scene

    scene = generate_scene(seed, SceneConfig(num_cameras=n_sources + 1, occluder_fraction=0.0))
    views = render_scene(scene)
    settings = PatchMatchSettings()
    scale = settings.scales[level]
    feats = [scorer.levels(v.image)[level] for v in views]
    cam_r = views[0].camera.scaled(scale)
    cams_s = [v.camera.scaled(scale) for v in views[1:]]
    ctx = _LevelContext(level, cam_r, cams_s, feats[0], feats[1:], settings, None)
    h, w = feats[0].height, feats[0].width
    plane = init_map(np.random.default_rng([seed, 1]), h, w, cam_r)
    zeta = np.random.default_rng([seed, 2]).normal(size=(h * w, *scorer.hidden_shape)) * 0.1
    if scorer.hidden_shape == (1, 1):
        zeta[:] = 0.0
    return ctx, settings, plane, zeta


def brute_force_half_sweep(scorer, ctx, settings, plane, zeta, parity, rho, eta, rng_seed):
    """Per-pixel, unbatched re-evaluation of one greedy half sweep.

    Candidates are read from a frozen copy of the map (double buffering);
    every candidate of every pixel is scored on its own and the winner is the
    exhaustive argmax (ties to the current plane, then the lowest index).
    Returns the updated ``(normal, delta, zeta)`` arrays and the score table.
    """
    from pmrl.autodiff import Tensor, concat, no_grad
    from pmrl.features import attention_weights, patch_correlation, support_indices
    from pmrl.patchmatch import KERNELS, NEIGHBOURS_4, candidate_valid, parity_pixels, perturb, plane_depth, smoothness
    from pmrl.views import compute_priors, sample_views, weighted_correlation

    h, w = plane.shape
    frozen_n = plane.normal.copy()
    frozen_d = plane.delta.copy()
    new_n, new_d, new_z = frozen_n.copy(), frozen_d.copy(), zeta.copy()
    idx = parity_pixels(h, w, parity)
    rays = ctx.rays
    # the perturbation draws are the only randomness of a greedy sweep
    cur_n_all = frozen_n.reshape(-1, 3)[idx]
    cur_d_all = frozen_d.reshape(-1)[idx]
    pert_n, pert_d = perturb(cur_n_all, plane_depth(cur_n_all, cur_d_all, rays[idx]), rays[idx], rho, eta,
                             np.random.default_rng(rng_seed))
    offsets = KERNELS[settings.kernels[ctx.level]]
    tables = []
    with no_grad():
        for j, p in enumerate(idx):
            x, y = p % w, p // w
            sup = support_indices(np.array([[x, y]]), settings.window, h, w)
            attn = scorer.attention(ctx.level, ctx.ref_f, sup)
            ray = rays[p]
            cur_n, cur_d = frozen_n[y, x], frozen_d[y, x]
            vh = []
            for cam_s, src in zip(ctx.cams_s, ctx.src_f):
                c, v = patch_correlation(cur_n[None], np.array([cur_d]), ctx.ref_f, src, attn, sup, ctx.cam_r,
                                         cam_s, scorer.groups)
                pr = compute_priors(cur_n[None], np.array([cur_d]), ctx.pix[p][None], ctx.cam_r, cam_s,
                                    np.deg2rad(settings.tri_angle_target_deg), settings.scale_clamp)
                vis = scorer.visibility(pr.features()[None], c.reshape(1, 1, -1)).data.reshape(-1)[0]
                vh.append(vis * float(pr.visible[0] and v[0]))
            vh = np.array(vh)
            if not (vh > 0).any():
                vh = np.ones_like(vh)
            chosen = sample_views(vh[None], settings.n_views, "greedy")[0]
            cands = [(frozen_n[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)],
                      frozen_d[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)]) for dx, dy in offsets]
            cands += [(pert_n[j], pert_d[j]), (cur_n, cur_d)]
            scores, states = [], []
            for n_k, d_k in cands:
                if not candidate_valid(n_k, d_k, ray, ctx.cam_r.d_min, ctx.cam_r.d_max):
                    scores.append(-np.inf)
                    states.append(None)
                    continue
                corr, wts = [], []
                for s in chosen:
                    c, v = patch_correlation(n_k[None], np.array([d_k]), ctx.ref_f, ctx.src_f[s], attn, sup,
                                             ctx.cam_r, ctx.cams_s[s], scorer.groups)
                    corr.append(c.data[0])
                    wts.append(vh[s] * float(v[0]))
                cv, ok = weighted_correlation(np.array(corr)[None], np.array(wts)[None])
                if not ok[0]:
                    scores.append(-np.inf)
                    states.append(None)
                    continue
                m = []
                for dx, dy in NEIGHBOURS_4:
                    qy, qx = min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)
                    m.append(smoothness(n_k, d_k, ray, frozen_n[qy, qx], frozen_d[qy, qx], rays[qy * w + qx]))
                depth = plane_depth(n_k, d_k, ray)
                sm = np.log1p(np.minimum(np.array(m) / (settings.smooth_scale * depth), 1e6))
                z, zn = scorer.regularize(concat([cv, Tensor(sm[None])], axis=-1), zeta[p][None])
                scores.append(float(z.data[0]))
                states.append(zn[0])
            scores = np.array(scores)
            tables.append(scores)
            best = scores.max()
            if not np.isfinite(best):
                continue
            k = len(cands) - 1 if scores[-1] == best else int(np.flatnonzero(scores == best)[0])
            new_n[y, x], new_d[y, x] = cands[k]
            new_z[p] = states[k]
    return new_n, new_d, new_z, np.array(tables)


def ks_uniform(samples: np.ndarray, lo: float, hi: float) -> float:
    """Kolmogorov–Smirnov statistic of samples against U[lo, hi]."""
    x = np.sort((np.asarray(samples) - lo) / (hi - lo))
    n = len(x)
    cdf = np.clip(x, 0.0, 1.0)
    return float(max(np.max(np.arange(1, n + 1) / n - cdf), np.max(cdf - np.arange(n) / n)))
