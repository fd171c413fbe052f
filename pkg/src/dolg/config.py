"""Flat dotted-key run configuration: defaults < config file < flag overrides.

Config files are JSON objects with dotted keys, e.g. ``{"train.base_lr": 0.01}``.
A bare preset name (``toy``, ``paper_r50``) resolves to a bundled file.
"""

import hashlib
import json
import os
from importlib import resources

from .backbone import BackboneSpec
from .errors import ConfigError
from .global_branch import GemConfig
from .model import ModelConfig
from .training import TrainConfig

DEFAULTS = {
    "seed": 0,
    "device": "cpu",
    "model.variant": "toy-cnn",
    "model.stage3_channels": 64,
    "model.stage4_channels": 128,
    "model.stage3_stride": 16,
    "model.stage4_stride": 32,
    "model.dim": 64,
    "model.gem_p": 3.0,
    "model.gem_eps": 1e-6,
    "model.dilation_rates": [3, 6, 9],
    "model.mid_channels": None,
    "model.kernel_size": 3,
    "model.fusion_location": "f3_only",
    "model.global_pool": "gem",
    "model.fusion_pool": "average",
    "model.fusion_mode": "orthogonal",
    "model.multi_atrous": True,
    "model.self_attention": True,
    "model.freeze_bn": False,
    "model.pretrained": None,
    "train.batch_size": 32,
    "train.epochs": 50,
    "train.warmup_epochs": 5,
    "train.base_lr": 0.05,
    "train.momentum": 0.9,
    "train.weight_decay": 1e-4,
    "train.split_fraction": 0.8,
    "train.margin": 0.15,
    "train.scale": 30.0,
    "train.image_size": 64,
    "train.aug_scale": [0.6, 1.0],
    "train.aug_ratio": [0.75, 4 / 3],
    "train.checkpoint_every": 0,
    "extract.scales": [0.7071, 1.0, 1.4142],
    "extract.strict": True,
    "extract.crop_queries": True,
    "data.train_manifest": None,
    "data.db_manifest": None,
    "data.query_manifest": None,
    "data.gt": None,
}

PRESETS = ("toy", "paper_r50")


def _check_type(key, value):
    default = DEFAULTS[key]
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} expects a boolean, got {value!r}")
    elif isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) and value != int(value):
            raise ConfigError(f"config key {key!r} expects an integer, got {value!r}")
        value = type(default)(value)
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key {key!r} expects a list, got {value!r}")
    elif not isinstance(value, type(default)):
        raise ConfigError(f"config key {key!r} expects {type(default).__name__}, got {value!r}")
    return value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_file(path_or_preset):
    if path_or_preset in PRESETS:
        text = resources.files("dolg.configs").joinpath(f"{path_or_preset}.json").read_text()
        source = f"preset {path_or_preset!r}"
    else:
        if not os.path.exists(path_or_preset):
            raise ConfigError(f"config file not found: {path_or_preset}")
        with open(path_or_preset, encoding="utf-8") as fh:
            text = fh.read()
        source = path_or_preset
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a JSON object of dotted keys")
    return data


def resolve(config=None, overrides=(), **flags):
    """Merge defaults, an optional file/preset, ``key=value`` overrides and explicit flags."""
    cfg = dict(DEFAULTS)
    layers = [load_file(config)] if config else []
    parsed = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parsed[key.strip()] = _parse_value(value)
    layers.append(parsed)
    layers.append({k: v for k, v in flags.items() if v is not None})
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _check_type(key, value)
    model_config(cfg)
    train_config(cfg)
    return cfg


def digest(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def model_config(cfg) -> ModelConfig:
    return ModelConfig(
        backbone=BackboneSpec(cfg["model.variant"], cfg["model.stage3_channels"], cfg["model.stage4_channels"],
                              cfg["model.stage3_stride"], cfg["model.stage4_stride"]),
        dim=cfg["model.dim"],
        gem=GemConfig(cfg["model.gem_p"], cfg["model.gem_eps"]),
        dilation_rates=tuple(cfg["model.dilation_rates"]),
        mid_channels=cfg["model.mid_channels"],
        kernel_size=cfg["model.kernel_size"],
        fusion_location=cfg["model.fusion_location"],
        global_pool=cfg["model.global_pool"],
        fusion_pool=cfg["model.fusion_pool"],
        fusion_mode=cfg["model.fusion_mode"],
        multi_atrous=cfg["model.multi_atrous"],
        self_attention=cfg["model.self_attention"],
        freeze_bn=cfg["model.freeze_bn"],
    )


def train_config(cfg) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg["train.batch_size"],
        epochs=cfg["train.epochs"],
        warmup_epochs=cfg["train.warmup_epochs"],
        base_lr=cfg["train.base_lr"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        split_fraction=cfg["train.split_fraction"],
        seed=cfg["seed"],
        margin=cfg["train.margin"],
        scale=cfg["train.scale"],
        image_size=cfg["train.image_size"],
        aug_scale=tuple(cfg["train.aug_scale"]),
        aug_ratio=tuple(cfg["train.aug_ratio"]),
        checkpoint_every=cfg["train.checkpoint_every"],
    )
