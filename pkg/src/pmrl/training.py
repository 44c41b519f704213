"""REINFORCE training of the candidate-selection and view-selection agents.

Each scene contributes one episode: the training schedule of
:class:`~pmrl.patchmatch.PatchMatch` run on one reference view with
stochastic view sampling and ε-greedy candidate selection. Rewards compare
the plane map after every iteration with ground truth; returns are
accumulated on the finest grid (coarser rewards are upsampled by nearest
neighbour) and pooled back to each iteration's resolution.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, adam_step, as_tensor, backward, load_checkpoint, save_checkpoint
from .config import PipelineConfig
from .exceptions import ContractError, NumericAbort
from .patchmatch import HalfSweepRecord, LearnedScorer, PatchMatch, PatchMatchSettings, reward_kernel
from .features import SupportWindow
from .synth import RenderedView, SyntheticScene, render_view, select_sources

log = logging.getLogger(__name__)


# -- rewards and returns ------------------------------------------------------


def reward(depth, normal, gt_depth, gt_normal, depth_range: float, sigma_d: float, sigma_n: float) -> np.ndarray:
    """Per-pixel agreement with ground truth in ``[0, 1]``; zero where GT is missing."""
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    r = reward_kernel(depth, normal, gt_depth, gt_normal, depth_range, sigma_d, sigma_n)
    return np.where(gt_depth > 0, r, 0.0)


def returns(rewards, gamma: float) -> list:
    """Discounted reward-to-go ``G^t = r^t + γ G^{t+1}`` (scalars or equal-shape arrays)."""
    out = [None] * len(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = np.asarray(rewards[t], dtype=np.float64) + gamma * acc
        out[t] = acc
    return out


def epsilon_at(step: int, epsilon0: float = 0.9, decay: float = 0.999) -> float:
    if step < 0:
        raise ContractError(f"step must be non-negative, got {step}")
    return epsilon0 * decay**step


def trace_returns(rewards: list[tuple[int, np.ndarray]], gamma: float) -> list[np.ndarray]:
    """Returns per iteration at that iteration's resolution.

    Args:
        rewards: ``(level, [h, w] reward map)`` per iteration, in schedule
            order; each level doubles the previous extents.
    """
    if not rewards:
        return []
    finest = max(level for level, _ in rewards)
    up = []
    for level, r in rewards:
        f = 2 ** (finest - level)
        up.append(r.repeat(f, 0).repeat(f, 1))
    out = []
    for (level, r), g in zip(rewards, returns(up, gamma)):
        f = 2 ** (finest - level)
        h, w = r.shape
        out.append(g.reshape(h, f, w, f).mean(axis=(1, 3)))
    return out


def _pooled_like(g: np.ndarray, shape) -> np.ndarray:
    """Average-pool a finer return map down to ``shape`` (identity when equal)."""
    f = g.shape[0] // shape[0]
    if f == 1:
        return g
    return g.reshape(shape[0], f, shape[1], f).mean(axis=(1, 3))


# -- policy losses ------------------------------------------------------------


def candidate_policy_loss(log_policy, cand_return: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """``−Σ_p Σ_k Q_pk log π_pk`` for one half sweep.

    Args:
        log_policy: ``[P, K]`` log-softmax over candidates (invalid ones
            pushed to a large negative logit before normalization).
        cand_return: ``[P, K]`` return of picking each candidate: its reward
            kernel plus the discounted reward-to-go of the next iteration.
            Zero for invalid candidates.
        mask: ``[P]`` pixels that contribute (default all).
    """
    q = np.asarray(cand_return, dtype=np.float64)
    if mask is not None:
        q = q * np.asarray(mask, dtype=np.float64)[:, None]
    return -(as_tensor(log_policy) * q).sum()


def view_policy_loss(log_ratio, weight: np.ndarray) -> Tensor:
    """``−Σ_p G_p · [log Σ_N v̂ − log Σ_{N∪M} v̂]``; see :func:`pmrl.views.view_log_ratio`."""
    return -(as_tensor(log_ratio) * np.asarray(weight, dtype=np.float64)).sum()


@dataclass
class EpisodeLoss:
    candidate: Tensor
    view: Tensor
    pixels: int

    @property
    def total(self) -> Tensor:
        return self.candidate + self.view


def episode_loss(records: list[HalfSweepRecord], rewards: list[tuple[int, np.ndarray]],
                 gamma_s: float, gamma_v: float) -> EpisodeLoss:
    """Pixel-mean candidate and view losses over a recorded episode.

    A candidate's return is its own reward kernel plus ``γ_S`` times the
    pixel's reward-to-go from the following iteration; the view agent is
    weighted by the reward-to-go ``G^t`` under ``γ_V``.
    """
    g_s = trace_returns(rewards, gamma_s)
    g_v = trace_returns(rewards, gamma_v)
    loss_c = Tensor(0.0)
    loss_v = Tensor(0.0)
    count = 0
    for rec in records:
        mask = rec.gt_valid.astype(np.float64)
        q = rec.candidate_reward
        if gamma_s > 0 and rec.iteration + 1 < len(g_s):
            nxt = _pooled_like(g_s[rec.iteration + 1], g_s[rec.iteration].shape)
            ok = rec.candidate_valid if rec.candidate_valid is not None else q > 0
            q = q + gamma_s * nxt.reshape(-1)[rec.pixels][:, None] * ok
        wv = g_v[rec.iteration].reshape(-1)[rec.pixels] * mask
        loss_c = loss_c + candidate_policy_loss(rec.log_policy, q, mask)
        if rec.view_log_ratio is not None:
            loss_v = loss_v + view_policy_loss(rec.view_log_ratio, wv)
        count += int(mask.sum())
    scale = 1.0 / max(count, 1)
    return EpisodeLoss(loss_c * scale, loss_v * scale, count)


# -- data ---------------------------------------------------------------------


@dataclass
class TrainingScene:
    """Rendered views of one scene; ``scene`` enables exact per-level GT."""

    views: list[RenderedView]
    scene: SyntheticScene | None = None


def level_ground_truth(item: TrainingScene, ref: int, scales) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(depth, normal)`` of the reference view at each scale, coarsest first.

    With the scene at hand GT is rendered at each scale directly; otherwise
    the full-resolution maps are subsampled by nearest neighbour.
    """
    view = item.views[ref]
    out = []
    for s in scales:
        cam = view.camera.scaled(s)
        if item.scene is not None:
            g = render_view(item.scene, cam)
            out.append((g.gt_depth, g.gt_normal))
        else:
            f = round(1 / s)
            off = f // 2
            out.append((view.gt_depth[off::f, off::f][: cam.height, : cam.width],
                        view.gt_normal[off::f, off::f][: cam.height, : cam.width]))
    return out


def training_settings(cfg: PipelineConfig) -> PatchMatchSettings:
    m, p = cfg.model, cfg.patchmatch
    return PatchMatchSettings(
        scales=p.scales, iterations=p.train_iterations, kernels=p.train_kernels, rho=p.rho, eta_deg=p.eta_deg,
        n_views=p.train_views, n_invisible=p.train_invisible,
        window=SupportWindow(m.window_size, m.window_dilation), tri_angle_target_deg=m.tri_angle_target_deg,
        scale_clamp=m.scale_clamp, smooth_scale=m.smooth_scale,
    )


def inference_settings(cfg: PipelineConfig) -> PatchMatchSettings:
    m, p = cfg.model, cfg.patchmatch
    return PatchMatchSettings(
        scales=p.scales, iterations=p.eval_iterations, kernels=p.eval_kernels, rho=p.rho, eta_deg=p.eta_deg,
        n_views=p.eval_views, n_invisible=0,
        window=SupportWindow(m.window_size, m.window_dilation), tri_angle_target_deg=m.tri_angle_target_deg,
        scale_clamp=m.scale_clamp, smooth_scale=m.smooth_scale,
    )


def new_scorer(cfg: PipelineConfig) -> LearnedScorer:
    m = cfg.model
    return LearnedScorer.initialize(np.random.default_rng([m.init_seed, cfg.seed]), m.channels, m.groups, m.hidden_layers,
                                    m.hidden_dim, m.vis_hidden, cfg.patchmatch.scales)


# -- loop ---------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    epsilon: float
    mean_reward: float
    depth_mae: float
    loss_candidate: float
    loss_view: float
    seconds: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _diagnose(records: list[HalfSweepRecord], rewards) -> dict:
    """First offending pixel of a non-finite episode, for the abort dump."""
    for rec in records:
        lp = rec.log_policy.data
        bad = ~np.isfinite(lp).all(axis=1)
        if rec.view_log_ratio is not None:
            bad |= ~np.isfinite(rec.view_log_ratio.data)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            return {
                "level": rec.level,
                "iteration": rec.iteration,
                "pixel": int(rec.pixels[i]),
                "log_policy": lp[i].tolist(),
                "candidate_reward": rec.candidate_reward[i].tolist(),
                "view_log_ratio": None if rec.view_log_ratio is None else float(rec.view_log_ratio.data[i]),
            }
    return {"rewards_finite": all(bool(np.isfinite(r).all()) for _, r in rewards)}


def train_step(scorer: LearnedScorer, item: TrainingScene, ref: int, sources: list[int], cfg: PipelineConfig,
               lr: float, seed: int) -> dict:
    """One episode on one scene followed by one Adam step."""
    t = cfg.train
    settings = training_settings(cfg)
    gt = level_ground_truth(item, ref, settings.scales)
    eps = epsilon_at(scorer.store.step, t.epsilon0, t.epsilon_decay)
    pm = PatchMatch(scorer, settings)
    images = [v.image for v in item.views]
    cams = [v.camera for v in item.views]
    res = pm.run(images, cams, ref, sources, seed=seed, training=True, epsilon=eps, gt=gt,
                 reward_sigmas=(t.sigma_d, np.deg2rad(t.sigma_n_deg)))
    loss = episode_loss(res.records, res.rewards, t.gamma_s, t.gamma_v)
    total = loss.total
    if not np.isfinite(total.data).all():
        raise NumericAbort(f"non-finite loss on reference view {ref}", _diagnose(res.records, res.rewards))
    scorer.store.zero_grad()
    backward(total)
    for name, p in scorer.store.items():
        if not np.isfinite(p.grad).all():
            raise NumericAbort(f"non-finite gradient for {name}", _diagnose(res.records, res.rewards))
    adam_step(scorer.store, lr)

    gd, gn = gt[-1]
    valid = gd > 0
    final_r = res.rewards[-1][1]
    return {
        "reward": float(final_r[valid].mean()) if valid.any() else 0.0,
        "mae": float(np.abs(res.depth - gd)[valid].mean()) if valid.any() else 0.0,
        "loss_c": float(loss.candidate.data),
        "loss_v": float(loss.view.data),
        "epsilon": eps,
    }


def train_epoch(scorer: LearnedScorer, dataset: list[TrainingScene], cfg: PipelineConfig, epoch: int) -> EpochMetrics:
    """One pass over ``dataset``: one episode and optimizer step per scene.

    Reference views rotate with the epoch; sources and episode seeds come
    from a generator seeded by ``(seed, epoch)``.
    """
    if not dataset:
        raise ContractError("training needs at least one scene")
    t, p = cfg.train, cfg.patchmatch
    lr = t.lr * t.lr_decay**epoch
    rng = np.random.default_rng([cfg.seed, epoch])
    start = time.perf_counter()
    eps0 = epsilon_at(scorer.store.step, t.epsilon0, t.epsilon_decay)
    stats = []
    for i, item in enumerate(dataset):
        n = len(item.views)
        ref = (epoch + i) % n
        n_total = min(p.train_sources, n - 1)
        sources = select_sources(item.views, ref, item.scene, n_total, min(p.train_best_sources, n_total), rng)
        seed = int(rng.integers(2**31))
        stats.append(train_step(scorer, item, ref, sources, cfg, lr, seed))
    return EpochMetrics(
        epoch=epoch,
        lr=lr,
        epsilon=eps0,
        mean_reward=float(np.mean([s["reward"] for s in stats])),
        depth_mae=float(np.mean([s["mae"] for s in stats])),
        loss_candidate=float(np.mean([s["loss_c"] for s in stats])),
        loss_view=float(np.mean([s["loss_v"] for s in stats])),
        seconds=time.perf_counter() - start,
    )


def save_training_state(path, scorer: LearnedScorer, epoch: int) -> None:
    """Checkpoint after ``epoch`` completed epochs."""
    save_checkpoint(path, scorer.store, {"__epoch__": np.array(float(epoch))})


def load_training_state(path, scorer: LearnedScorer) -> int:
    """Restore weights and optimizer state; returns the number of completed epochs."""
    extra = load_checkpoint(path, scorer.store)
    return int(np.asarray(extra.get("__epoch__", 0.0)).reshape(-1)[0])


def train(cfg: PipelineConfig, dataset: list[TrainingScene], out_dir=None, scorer: LearnedScorer | None = None,
          resume=None, epochs: int | None = None, callback=None) -> tuple[LearnedScorer, list[EpochMetrics]]:
    """Epoch loop with a JSON-lines log and one checkpoint per epoch.

    Args:
        out_dir: receives ``train.log.jsonl``, ``checkpoint_epoch###.pmrl``
            and ``checkpoint.pmrl`` (latest). ``None`` keeps everything in
            memory.
        resume: checkpoint to continue from; its epoch counter decides
            where the schedule picks up.
        epochs: total epochs to reach (defaults to ``cfg.train.epochs``).
    """
    scorer = scorer or new_scorer(cfg)
    first = load_training_state(resume, scorer) if resume is not None else 0
    total = cfg.train.epochs if epochs is None else epochs
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if first == 0:
            save_training_state(out / "checkpoint_epoch000.pmrl", scorer, 0)
            save_training_state(out / "checkpoint.pmrl", scorer, 0)
    history = []
    cfg_hash = cfg.hash()
    for epoch in range(first, total):
        metrics = train_epoch(scorer, dataset, cfg, epoch)
        history.append(metrics)
        log.info("epoch %d reward %.4f mae %.4f", epoch, metrics.mean_reward, metrics.depth_mae)
        if out is not None:
            save_training_state(out / f"checkpoint_epoch{epoch + 1:03d}.pmrl", scorer, epoch + 1)
            save_training_state(out / "checkpoint.pmrl", scorer, epoch + 1)
            with open(out / "train.log.jsonl", "a") as fh:
                fh.write(json.dumps({**metrics.to_dict(), "config_hash": cfg_hash}) + "\n")
        if callback is not None:
            callback(metrics)
    return scorer, history

