import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pmrl.config import PipelineConfig
from pmrl.estimator import PatchMatchMVS
from pmrl.exceptions import ConfigError
from pmrl.synth import SceneConfig, generate_scene, render_scene


@pytest.fixture(scope="module")
def small():
    cfg = PipelineConfig(synth=SceneConfig(width=48, height=48, num_cameras=3, num_patches=2))
    cfg.patchmatch.eval_iterations = (2, 1, 1)
    scenes = [render_scene(generate_scene(s, cfg.synth)) for s in (11, 12)]
    return cfg, scenes


def test_params_and_clone(small):
    cfg, _ = small
    est = PatchMatchMVS(epochs=3, lr=1e-4, seed=2, config=cfg)
    params = est.get_params()
    assert params["epochs"] == 3 and params["seed"] == 2 and params["config"] is cfg
    c = clone(est)
    assert c.get_params()["lr"] == 1e-4 and not hasattr(c, "scorer_")
    est.set_params(scorer="baseline")
    assert est.scorer == "baseline"


def test_unfitted_and_bad_inputs(small):
    _, scenes = small
    with pytest.raises(NotFittedError):
        PatchMatchMVS().predict(scenes)
    with pytest.raises(ConfigError):
        PatchMatchMVS(scorer="magic").fit(scenes)
    with pytest.raises(ConfigError):
        PatchMatchMVS(scorer="baseline").fit([scenes[0][:1]])
    with pytest.raises(ConfigError):
        PatchMatchMVS(scorer="baseline").fit([])


def test_fit_predict_score(small):
    cfg, scenes = small
    est = PatchMatchMVS(epochs=1, seed=0, config=cfg).fit(scenes[:1])
    assert len(est.history_) == 1
    assert est.config_.train.epochs == 1 and cfg.train.epochs == PipelineConfig().train.epochs
    depths = est.predict(scenes[1:])
    assert depths[0].shape == (3, 24, 24)
    again = clone(est).fit(scenes[:1]).predict(scenes[1:])
    assert np.array_equal(depths[0], again[0])
    assert 0.0 <= est.score(scenes[1:]) <= 1.0


def test_baseline_estimator(small):
    cfg, scenes = small
    est = PatchMatchMVS(scorer="baseline", config=cfg).fit(scenes)
    assert est.history_ == []
    s = est.score(scenes[:1])
    assert 0.0 <= s <= 1.0
    assert s == PatchMatchMVS(scorer="baseline", config=cfg).fit(scenes).score(scenes[:1])
