"""Pipeline configuration: nested dataclasses with JSON round-tripping.

Defaults follow the published training/evaluation settings where those exist
(window 3/dilation 3, scales 1/8-1/4-1/2, iteration schedules, ε schedule,
Adam learning rate and its per-epoch halving, discount factors, view counts).
Everything else is a desk-scale choice documented next to the field.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError
from .synth import SceneConfig


@dataclass
class ModelConfig:
    # channels per pyramid level, coarsest (1/8) first
    channels: tuple[int, int, int] = (32, 16, 8)
    groups: int = 4
    window_size: int = 3
    window_dilation: int = 3
    hidden_layers: int = 3
    hidden_dim: int = 8
    vis_hidden: tuple[int, int] = (16, 16)
    tri_angle_target_deg: float = 15.0
    scale_clamp: float = 8.0
    smooth_scale: float = 0.01
    init_seed: int = 0


@dataclass
class PatchMatchConfig:
    scales: tuple[float, float, float] = (0.125, 0.25, 0.5)
    train_iterations: tuple[int, int, int] = (2, 1, 1)
    eval_iterations: tuple[int, int, int] = (8, 2, 2)
    train_kernels: tuple[str, str, str] = ("B", "B", "B")
    eval_kernels: tuple[str, str, str] = ("C", "B", "B")
    rho: tuple[float, float] = (0.2, 0.02)
    eta_deg: tuple[float, float] = (30.0, 5.0)
    eval_views: int = 3
    eval_sources: int = 10
    train_views: int = 1
    train_invisible: int = 2
    train_sources: int = 6
    train_best_sources: int = 3


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    lr_decay: float = 0.5
    epsilon0: float = 0.9
    epsilon_decay: float = 0.999
    sigma_d: float = 0.05
    sigma_n_deg: float = 15.0
    gamma_s: float = 0.0
    gamma_v: float = 1.0


@dataclass
class FusionConfig:
    max_reproj_px: float = 1.0
    max_rel_depth: float = 0.01
    max_normal_deg: float = 10.0
    min_consistent_views: int = 2
    tau: float = 0.02


@dataclass
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    num_scenes: int = 8
    synth: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    patchmatch: PatchMatchConfig = field(default_factory=PatchMatchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def validate(self) -> PipelineConfig:
        s, m, p, t, f = self.synth, self.model, self.patchmatch, self.train, self.fusion
        checks = [
            (s.num_cameras >= 2, "synth.num_cameras must be >= 2"),
            (s.num_patches >= 1, "synth.num_patches must be >= 1"),
            (0.0 <= s.occluder_fraction <= 1.0, "synth.occluder_fraction must lie in [0, 1]"),
            (s.width % 8 == 0 and s.height % 8 == 0, "synth.width/height must be multiples of 8"),
            (s.texture_octaves >= 1, "synth.texture_octaves must be >= 1"),
            (0.0 <= s.depth_margin < 1.0, "synth.depth_margin must lie in [0, 1)"),
            (self.num_scenes >= 1, "num_scenes must be >= 1"),
            (self.threads >= 1, "threads must be >= 1"),
            (all(c % m.groups == 0 for c in m.channels), "model.channels must be divisible by model.groups"),
            (m.window_size % 2 == 1 and m.window_size >= 1, "model.window_size must be odd"),
            (m.window_dilation >= 1, "model.window_dilation must be >= 1"),
            (m.hidden_layers >= 1 and m.hidden_dim >= 1, "model hidden sizes must be positive"),
            (m.scale_clamp >= 1.0, "model.scale_clamp must be >= 1"),
            (len(p.scales) == 3 and all(x > 0 for x in p.scales), "patchmatch.scales needs 3 positive entries"),
            (all(k in ("A", "B", "C") for k in (*p.train_kernels, *p.eval_kernels)), "kernels must be A, B or C"),
            (all(i >= 1 for i in (*p.train_iterations, *p.eval_iterations)), "iteration counts must be >= 1"),
            (p.rho[0] > 0 and p.rho[1] > 0, "patchmatch.rho must be positive"),
            (p.eval_views >= 1 and p.train_views >= 1, "view counts must be >= 1"),
            (p.train_invisible >= 0, "patchmatch.train_invisible must be >= 0"),
            (t.epochs >= 0, "train.epochs must be >= 0"),
            (t.lr >= 0 and 0 < t.lr_decay <= 1, "train.lr must be >= 0 and lr_decay in (0, 1]"),
            (0 < t.epsilon0 <= 1 and 0 < t.epsilon_decay <= 1, "epsilon schedule out of range"),
            (t.sigma_d > 0 and t.sigma_n_deg > 0, "reward sigmas must be positive"),
            (0 <= t.gamma_s <= 1 and 0 <= t.gamma_v <= 1, "discounts must lie in [0, 1]"),
            (f.max_reproj_px > 0 and f.max_rel_depth > 0 and f.max_normal_deg > 0, "fusion thresholds must be positive"),
            (f.min_consistent_views >= 1, "fusion.min_consistent_views must be >= 1"),
            (f.tau > 0, "fusion.tau must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> PipelineConfig:
        return _build(cls, data, "").validate()

    @classmethod
    def load(cls, path) -> PipelineConfig:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{prefix}{name}.")
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(current):
                raise ConfigError(f"{prefix}{name}: expected a list of {len(current)} values")
            kwargs[name] = tuple(type(c)(v) for c, v in zip(current, value))
        elif isinstance(current, bool) or isinstance(value, bool):
            kwargs[name] = value
        elif isinstance(current, (int, float)):
            if not isinstance(value, (int, float)):
                raise ConfigError(f"{prefix}{name}: expected a number, got {value!r}")
            if isinstance(current, int) and float(value) != int(value):
                raise ConfigError(f"{prefix}{name}: expected an integer, got {value!r}")
            kwargs[name] = type(current)(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)
