"""Run configuration: typed sections, TOML loading, dotted overrides, hashing.

A config file is TOML with one table per section::

    seed = 0
    name = "desk"

    [data]
    n_classes = 8
    views = 4

    [trainer]
    epochs = 12

Unknown sections or keys are rejected so typos never silently fall back to
defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigurationError

MODES = (
    "cross_modal",
    "unimodal_image",
    "unimodal_point",
    "pseudo_random",
    "pseudo_image_only",
    "pseudo_point_only",
)


@dataclass
class DataConfig:
    n_classes: int = 8
    n_points: int = 1024
    views: int = 4
    pixels: int = 32
    # half-width in pixels of each rendered point's square footprint
    render_splat: int = 1
    train_per_class: int = 200
    test_per_class: int = 50
    pretrain_per_class: int = 100
    exemplars_per_class: int = 4
    # pretraining corpus and exemplars keep their own view count so that a
    # views sweep on the downstream split reuses the same initialization
    pretrain_views: int = 4
    disjoint_classes: bool = False
    noise_std: float = 0.01
    random_yaw: bool = True
    # downstream (train/test) domain shift relative to pretraining and exemplars
    shift_occlusion: float = 0.4
    shift_noise_std: float = 0.02


@dataclass
class AugConfig:
    weak_rot_deg: float = 15.0
    weak_scale: tuple[float, float] = (0.9, 1.1)
    strong_crop_min: float = 0.6
    strong_dropout_max: float = 0.2
    strong_rot_deg: float = 180.0
    strong_translate: float = 0.2
    strong_scale: tuple[float, float] = (0.5, 2.0)
    img_weak_min_area: float = 0.85
    img_strong_area: tuple[float, float] = (0.5, 1.0)
    img_flip_p: float = 0.5
    img_n_ops: int = 2

    @classmethod
    def identity(cls) -> "AugConfig":
        """All magnitudes zero: every augmentation returns its input."""
        return cls(
            weak_rot_deg=0.0,
            weak_scale=(1.0, 1.0),
            strong_crop_min=1.0,
            strong_dropout_max=0.0,
            strong_rot_deg=0.0,
            strong_translate=0.0,
            strong_scale=(1.0, 1.0),
            img_weak_min_area=1.0,
            img_strong_area=(1.0, 1.0),
            img_flip_p=0.0,
            img_n_ops=0,
        )


@dataclass
class TokenizerConfig:
    n_groups: int = 16
    group_size: int = 32
    patch_size: int = 8
    img_mask_ratio: float = 0.30
    pcl_mask_ratio: tuple[float, float] = (0.30, 0.40)


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_embed: int = 32
    mlp_ratio: int = 2
    logit_scale: float = 20.0


@dataclass
class ObjectiveConfig:
    threshold: float = 0.7
    tau: float = 0.07
    lambda_cls: float = 1.0
    lambda_align: float = 1.0
    lambda_fair: float = 1.0
    lambda_mim: float = 1.0
    lambda_mpm: float = 1.0
    lambda_lg: float = 1.0
    mode: str = "cross_modal"


@dataclass
class TrainerConfig:
    ema_momentum: float = 0.999
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    layer_decay: float = 0.65
    batch_size: int = 64
    epochs: int = 10
    warmup_frac: float = 0.1
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 64
    # freeze the image encoder after this many pretraining epochs (-1: never)
    pretrain_freeze_image_after: int = -1
    # fraction of pretraining pairs that get the strong policy instead of the weak one
    pretrain_strong_frac: float = 0.5
    # fraction of pretraining pairs that get the student's [MSK] masking
    pretrain_mask_frac: float = 0.5
    eval_model: str = "teacher"


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def validate(self) -> "RunConfig":
        validate(self)
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def replace(self, **overrides: Any) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"trainer.epochs": 2})``."""
        data = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(data, key, value)
        return from_dict(data)


SECTIONS = {
    "data": DataConfig,
    "aug": AugConfig,
    "tokenizer": TokenizerConfig,
    "model": ModelConfig,
    "objective": ObjectiveConfig,
    "trainer": TrainerConfig,
}


def config_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(cls, key: str, value: Any) -> Any:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigurationError(f"unknown key {key!r} in section {cls.__name__}")
    default = getattr(cls(), key)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigurationError(f"{cls.__name__}.{key} expects a pair, got {value!r}")
        return tuple(float(v) for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{cls.__name__}.{key} expects a bool, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{cls.__name__}.{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{cls.__name__}.{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigurationError(f"{cls.__name__}.{key} expects a string, got {value!r}")
    return value


def from_dict(data: dict[str, Any]) -> RunConfig:
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"section [{key}] must be a table")
            cls = SECTIONS[key]
            kwargs[key] = cls(**{k: _coerce(cls, k, v) for k, v in value.items()})
        elif key in ("name", "seed"):
            kwargs[key] = _coerce(RunConfig, key, value)
        else:
            raise ConfigurationError(f"unknown top-level key {key!r}")
    return RunConfig(**kwargs).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    try:
        # run directories hold a JSON copy of their config; accept it directly
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return from_dict(data)


def _set_dotted(data: dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigurationError(f"unknown config section in override {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigurationError(f"unknown config key in override {key!r}")
    node[parts[-1]] = value


def validate(cfg: RunConfig) -> None:
    d, m, t, o, tr = cfg.data, cfg.model, cfg.tokenizer, cfg.objective, cfg.trainer
    checks = [
        (d.n_classes >= 2, "data.n_classes must be >= 2"),
        (d.n_points >= 128, "data.n_points must be >= 128"),
        (d.views >= 1 and d.pretrain_views >= 1, "view counts must be >= 1"),
        (d.pixels >= 16, "data.pixels must be >= 16"),
        (d.render_splat >= 0, "data.render_splat must be >= 0"),
        (d.exemplars_per_class >= 1, "need at least one exemplar per class"),
        (0.0 <= d.shift_occlusion < 1.0, "data.shift_occlusion must be in [0,1)"),
        (d.shift_noise_std >= 0.0 and d.noise_std >= 0.0, "noise levels must be non-negative"),
        (d.pixels % t.patch_size == 0, "tokenizer.patch_size must divide data.pixels"),
        (t.n_groups >= 4, "tokenizer.n_groups must be >= 4"),
        (t.n_groups <= d.n_points and t.group_size <= d.n_points, "groups exceed point count"),
        (0.0 < t.img_mask_ratio < 1.0, "tokenizer.img_mask_ratio must be in (0,1)"),
        (0.0 < t.pcl_mask_ratio[0] <= t.pcl_mask_ratio[1] < 1.0, "bad tokenizer.pcl_mask_ratio"),
        (m.d_model % m.n_heads == 0, "model.d_model must be divisible by model.n_heads"),
        (m.d_embed <= m.d_model, "model.d_embed must be <= model.d_model"),
        (m.logit_scale > 0, "model.logit_scale must be positive"),
        (0.0 < o.threshold < 1.0, "objective.threshold must be in (0,1)"),
        (o.tau > 0, "objective.tau must be positive"),
        (o.mode in MODES, f"objective.mode must be one of {MODES}"),
        (
            all(getattr(o, f"lambda_{k}") >= 0 for k in ("cls", "align", "fair", "mim", "mpm", "lg")),
            "loss weights must be non-negative",
        ),
        (0.0 <= tr.ema_momentum <= 1.0, "trainer.ema_momentum must be in [0,1]"),
        (tr.batch_size >= 1 and tr.pretrain_batch_size >= 1, "batch sizes must be positive"),
        (tr.epochs >= 0 and tr.pretrain_epochs >= 0, "epoch counts must be >= 0"),
        (0.0 <= tr.warmup_frac < 1.0, "trainer.warmup_frac must be in [0,1)"),
        (0.0 <= tr.pretrain_mask_frac <= 1.0, "trainer.pretrain_mask_frac must be in [0,1]"),
        (0.0 <= tr.pretrain_strong_frac <= 1.0, "trainer.pretrain_strong_frac must be in [0,1]"),
        (tr.eval_model in ("teacher", "student"), "trainer.eval_model must be teacher|student"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigurationError(msg)
    weights = [getattr(o, f"lambda_{k}") for k in ("cls", "align", "fair", "mim", "mpm", "lg")]
    if tr.epochs > 0 and not any(w > 0 for w in weights):
        raise ConfigurationError("at least one loss weight must be positive")
