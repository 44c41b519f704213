"""scikit-learn style estimator around the PatchMatch pipeline.

A sample is one scene: a list of :class:`~pmrl.synth.RenderedView` (or a
:class:`~pmrl.training.TrainingScene`). ``fit`` trains the learned scorer
on the scenes' ground truth; ``predict`` returns each scene's depth maps at
the finest PatchMatch scale; ``score`` is the mean fused-cloud F1.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import PipelineConfig
from .exceptions import ConfigError
from .pipeline import evaluate_maps, infer_view, make_scorer
from .training import TrainingScene, train


def _as_scene(sample) -> TrainingScene:
    if isinstance(sample, TrainingScene):
        return sample
    views = list(sample)
    if len(views) < 2 or not all(hasattr(v, "image") and hasattr(v, "camera") for v in views):
        raise ConfigError("each sample must be a scene: two or more rendered views")
    return TrainingScene(views)


class PatchMatchMVS(BaseEstimator):
    """Multi-view depth and normal estimation with a learned or handcrafted scorer.

    Args:
        scorer: ``"learned"`` (trained by ``fit``) or ``"baseline"`` (the
            handcrafted-equivalent path; ``fit`` only validates).
        epochs: training epochs; ``None`` keeps the config default.
        lr: initial Adam learning rate; ``None`` keeps the config default.
        seed: seeds initialization, training and inference.
        tau: distance threshold of :meth:`score`.
        config: optional :class:`PipelineConfig` supplying everything else.
    """

    def __init__(self, scorer: str = "learned", epochs: int | None = None, lr: float | None = None,
                 seed: int = 0, tau: float | None = None, config: PipelineConfig | None = None):
        self.scorer = scorer
        self.epochs = epochs
        self.lr = lr
        self.seed = seed
        self.tau = tau
        self.config = config

    def _config(self) -> PipelineConfig:
        if self.scorer not in ("learned", "baseline"):
            raise ConfigError(f"scorer must be 'learned' or 'baseline', got {self.scorer!r}")
        cfg = PipelineConfig.from_dict(self.config.to_dict()) if self.config is not None else PipelineConfig()
        cfg.seed = int(self.seed)
        if self.epochs is not None:
            cfg.train.epochs = int(self.epochs)
        if self.lr is not None:
            cfg.train.lr = float(self.lr)
        if self.tau is not None:
            cfg.fusion.tau = float(self.tau)
        return cfg.validate()

    def fit(self, X, y=None):
        cfg = self._config()
        scenes = [_as_scene(s) for s in X]
        if not scenes:
            raise ConfigError("fit needs at least one scene")
        if self.scorer == "baseline":
            self.scorer_ = make_scorer(cfg, baseline=True)
            self.history_ = []
        else:
            self.scorer_, self.history_ = train(cfg, scenes)
        self.config_ = cfg
        return self

    def predict_maps(self, X) -> list[list]:
        """Per scene, the :class:`~pmrl.patchmatch.PatchMatchResult` of every view."""
        check_is_fitted(self, "scorer_")
        out = []
        for sample in X:
            scene = _as_scene(sample)
            out.append([infer_view(self.scorer_, scene.views, r, self.config_, scene.scene)
                        for r in range(len(scene.views))])
        return out

    def predict(self, X) -> list[np.ndarray]:
        """Per scene, ``[V, h, w]`` depth maps at the finest scale."""
        return [np.stack([r.depth for r in results]) for results in self.predict_maps(X)]

    def score(self, X, y=None) -> float:
        """Mean F1 of the fused clouds against ground truth at ``tau``."""
        scores = []
        for sample, results in zip(X, self.predict_maps(X)):
            scene = _as_scene(sample)
            ev = evaluate_maps([r.depth for r in results], [r.normal.reshape(*r.depth.shape, 3) for r in results],
                               [r.camera for r in results], scene.views, self.config_)
            scores.append(ev.metrics["f1"])
        return float(np.mean(scores))
