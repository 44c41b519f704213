"""Glue shared by the CLI and the estimator: scorers, per-view inference, evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad
from .config import PipelineConfig
from .fusion import ConsistencyThresholds, PointCloud, cloud_metrics, depth_metrics, fuse, gt_cloud
from .geometry import Camera
from .patchmatch import BaselineScorer, PatchMatch, PatchMatchResult
from .synth import RenderedView, SyntheticScene, select_sources
from .training import inference_settings, load_training_state, new_scorer


def make_scorer(cfg: PipelineConfig, checkpoint=None, baseline: bool = False):
    """The handcrafted-equivalent scorer, or a learned one (optionally restored)."""
    if baseline:
        return BaselineScorer(cfg.patchmatch.scales)
    scorer = new_scorer(cfg)
    if checkpoint is not None:
        load_training_state(checkpoint, scorer)
    return scorer


def eval_sources(views: list[RenderedView], ref: int, cfg: PipelineConfig, scene: SyntheticScene | None = None):
    n = min(cfg.patchmatch.eval_sources, len(views) - 1)
    rng = np.random.default_rng([cfg.seed, ref])
    return select_sources(views, ref, scene, n, min(cfg.patchmatch.eval_views, n), rng)


def infer_view(scorer, views: list[RenderedView], ref: int, cfg: PipelineConfig,
               scene: SyntheticScene | None = None) -> PatchMatchResult:
    """Greedy inference for one reference view; deterministic given ``cfg.seed``."""
    sources = eval_sources(views, ref, cfg, scene)
    with no_grad():
        return PatchMatch(scorer, inference_settings(cfg)).run(
            [v.image for v in views], [v.camera for v in views], ref, sources, seed=cfg.seed * 1009 + ref)


def downsample_nearest(array: np.ndarray, shape) -> np.ndarray:
    """Nearest-neighbour resampling of pixel centres to ``shape`` (``[h, w]``)."""
    h, w = array.shape[:2]
    rows = np.minimum(((np.arange(shape[0]) + 0.5) * h / shape[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(shape[1]) + 0.5) * w / shape[1]).astype(int), w - 1)
    return array[rows][:, cols]


def thresholds(cfg: PipelineConfig) -> ConsistencyThresholds:
    f = cfg.fusion
    return ConsistencyThresholds(f.max_reproj_px, f.max_rel_depth, np.deg2rad(f.max_normal_deg),
                                 f.min_consistent_views)


@dataclass
class SceneEvaluation:
    cloud: PointCloud
    metrics: dict
    depth: list[dict]


def evaluate_maps(depths, normals, cameras: list[Camera], views: list[RenderedView], cfg: PipelineConfig,
                  tau: float | None = None) -> SceneEvaluation:
    """Fuse predicted maps and score them against the views' ground truth.

    GT rasters are brought to the prediction's extents by nearest neighbour.
    """
    tau = cfg.fusion.tau if tau is None else tau
    cloud = fuse(depths, normals, cameras, thresholds(cfg))
    gt_d = [downsample_nearest(v.gt_depth, d.shape) for v, d in zip(views, depths)]
    gt_n = [downsample_nearest(v.gt_normal, d.shape) for v, d in zip(views, depths)]
    gt = gt_cloud(gt_d, gt_n, cameras, tau)
    per_view = [depth_metrics(d, g) for d, g in zip(depths, gt_d)]
    return SceneEvaluation(cloud, cloud_metrics(cloud, gt, tau).to_dict(), per_view)
