"""Experiment and generator configuration: YAML files with a fixed key
schema. Unknown keys are hard errors so a typo cannot silently change an
ablation."""

from __future__ import annotations

import os

import yaml

from .errors import ConfigError

MODES = ("baseline", "netwarp", "netwarp-noflowcnn")

# nested schema: dict -> allowed keys; leaves give (type, default)
_EXPERIMENT_SCHEMA = {
    "seed": (int, 0),
    "dataset": {
        "path": (str, None),
        "train_sequences": (list, None),
        "eval_sequences": (list, None),
    },
    "model": {
        "num_classes": (int, None),
        "channels": (list, [16, 32, 64]),
    },
    "netwarp": {
        "insertion_layers": (list, []),
        "use_flowcnn": (bool, True),
        "epsilon": (float, 1e-4),
        "recurrent_inference": (bool, True),
    },
    "flow": {
        "method": (str, "ground_truth"),
        "patch": (int, 8),
        "radius": (int, 8),
        "subpixel": (bool, True),
    },
    "train": {
        "steps": (int, 200),
        "lr": (float, 1e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "freeze_base": (bool, False),
        "init_from": (str, None),
        "mode": (str, "netwarp"),
    },
    "eval": {
        "band_px": (int, 2),
        "modes": (list, None),
    },
}

_GEN_SCHEMA = {
    "height": (int, 64),
    "width": (int, 64),
    "num_classes": (int, 3),
    "num_shapes": (int, 2),
    "shape_kinds": (list, ["rectangle", "disc", "thin_bar"]),
    "seq_len": (int, 10),
    "num_sequences": (int, 1),
    "seed": (int, 0),
    "velocity_max": (float, 2.0),
    "noise_std": (float, 0.0),
    "label_every": (int, 1),
}


def _apply_schema(raw, schema, path=""):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {path or '<root>'} must be a mapping")
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} under {path or '<root>'}")
    out = {}
    for key, rule in schema.items():
        here = f"{path}.{key}" if path else key
        if isinstance(rule, dict):
            out[key] = _apply_schema(raw.get(key), rule, here)
        else:
            typ, default = rule
            val = raw.get(key, default)
            if val is not None and typ in (int, float, bool):
                if typ is bool and not isinstance(val, bool):
                    raise ConfigError(f"{here}: expected bool, got {val!r}")
                if typ in (int, float) and isinstance(val, bool):
                    raise ConfigError(f"{here}: expected {typ.__name__}, got bool")
                try:
                    val = typ(val)
                except (TypeError, ValueError):
                    raise ConfigError(f"{here}: expected {typ.__name__}, got {val!r}")
            if val is not None and typ in (str, list) and not isinstance(val, typ):
                raise ConfigError(f"{here}: expected {typ.__name__}, got {val!r}")
            out[key] = val
    return out


def _load_yaml(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        try:
            return yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}")


def load_experiment_config(path):
    cfg = _apply_schema(_load_yaml(path), _EXPERIMENT_SCHEMA)
    if cfg["train"]["mode"] not in MODES:
        raise ConfigError(f"train.mode must be one of {MODES}")
    if cfg["eval"]["modes"]:
        for m in cfg["eval"]["modes"]:
            if m not in MODES:
                raise ConfigError(f"eval.modes entries must be in {MODES}, got {m!r}")
    if cfg["flow"]["method"] not in ("ground_truth", "block_match"):
        raise ConfigError("flow.method must be ground_truth or block_match")
    return cfg


def load_gen_config(path):
    return _apply_schema(_load_yaml(path), _GEN_SCHEMA)
