"""Layered configuration: defaults < preset < file < command-line overrides.

Keys are dotted paths into a nested tree (``model.d``, ``memory.K``...).
Unknown keys are rejected at every layer so typos fail loudly.
"""
import copy
import json

import yaml

DEFAULTS = {
    "world": {"n_rooms": 5, "grid_size": [12.0, 12.0], "objects_per_room": 3, "n_object_classes": 8},
    "data": {"train_envs": 16, "val_envs": 4, "walkthroughs_per_env": 64, "T": 128, "env_seed": 0,
             "walkthrough_seed": 0, "n_rays": 24},
    "model": {"d": 64, "heads": 4, "layers_enc": 2, "layers_dec": 2, "pose_dim": 16},
    "memory": {"K": 16},
    "noise": {"enabled": True, "pos": 0.0125, "heading": 0.157, "downstream": False},
    "pretrain": {"objective": "env_state", "pose": "relative", "epochs": 40, "lr": 1e-3, "weight_decay": 2e-5,
                 "batch_size": 64, "queries_per_walkthrough": 2, "seed": 0},
    "room": {"window": 8, "hidden": 128, "fused_dim": 64, "lr": 1e-3, "epochs": 10, "batch_size": 32,
             "freeze": False, "fusion": "fuse_then_pool", "hard_fraction": 0.3, "queries_per_walkthrough": 4,
             "seed": 0},
    "epm": {"clips": 32, "clip_len": 4, "d_q": 32, "hidden": 128, "fused_dim": 64, "lr": 1e-3, "epochs": 8,
            "batch_size": 16, "then_gap": 16, "freeze": True, "walkthroughs_per_env": 16, "seed": 0},
    "run": {"workers": 1},
}

PRESETS = {
    "desk": {},
    "paper": {
        "model": {"d": 128, "heads": 8},
        "memory": {"K": 32},
        "data": {"T": 512},
        "pretrain": {"epochs": 200, "lr": 1e-4, "batch_size": 1024},
        "room": {"hidden": 512, "lr": 1e-4, "epochs": 30},
        "epm": {"lr": 1e-3, "epochs": 30, "freeze": False, "walkthroughs_per_env": 0},
    },
}


class ConfigError(ValueError):
    pass


def _merge(base, layer, where):
    for key, val in layer.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where}{key} must be a table")
            _merge(base[key], val, f"{where}{key}.")
        else:
            base[key] = val


def _parse_value(text):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def parse_override(item):
    """``"a.b=3"`` -> ``{"a": {"b": 3}}``."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, text = item.split("=", 1)
    out = node = {}
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node[p] = {}
        node = node[p]
    node[parts[-1]] = _parse_value(text)
    return out


def resolve(preset="desk", file=None, overrides=()):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    cfg = copy.deepcopy(DEFAULTS)
    _merge(cfg, PRESETS[preset], "")
    if file is not None:
        with open(file) as fh:
            layer = yaml.safe_load(fh) or {}
        if not isinstance(layer, dict):
            raise ConfigError(f"{file}: top level must be a mapping")
        _merge(cfg, layer, "")
    for item in overrides:
        _merge(cfg, parse_override(item) if isinstance(item, str) else item, "")
    return cfg


def get(cfg, dotted):
    node = cfg
    for p in dotted.split("."):
        node = node[p]
    return node


def dumps(cfg):
    return json.dumps(cfg, sort_keys=True)
