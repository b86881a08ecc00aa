"""Run-configuration file: plain UTF-8 key=value sections, schema-checked.

The format is INI-style (configparser, no interpolation). Unknown
sections or keys are rejected so a typo cannot silently fall back to a
default. Every ablation arm (rope allocation, coordinate mode, decoder
mode, patch size, augmentation, distillation) is reachable from here
without code edits.

Example:

    [run]
    model = volt-tiny
    voxel_size = 0.05
    patch_size = 5
    seed = 0
    out_dir = runs/demo

    [dataset.main]
    classes = 6
    scenes = data/*.volt
"""

from __future__ import annotations

import configparser
import glob
import os
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig
from .model import ModelConfig, preset
from .train import DistillSettings, TrainSettings


class ConfigError(ValueError):
    pass


def _parse_bool(s):
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected boolean, got {s!r}")


def _parse_floats(s):
    return tuple(float(v) for v in s.split(","))


def _parse_ints(s):
    return tuple(int(v) for v in s.split(","))


def _parse_pairs(s):
    """\"0.2:0.4,0.8:1.6\" -> ((0.2, 0.4), (0.8, 1.6)); empty -> ()."""
    s = s.strip()
    if not s:
        return ()
    out = []
    for part in s.split(","):
        a, b = part.split(":")
        out.append((float(a), float(b)))
    return tuple(out)


_SCHEMA = {
    "run": {
        "model": str,
        "voxel_size": float,
        "patch_size": int,
        "seed": int,
        "out_dir": str,
    },
    "model": {
        "width": int,
        "depth": int,
        "heads": int,
        "mlp_ratio": int,
        "droppath_max": float,
        "qk_norm": _parse_bool,
        "decoder_width": int,
    },
    "rope": {
        "pairs": _parse_ints,
        "theta_base": float,
        "coordinate_mode": str,
    },
    "decoder": {
        "mode": str,
    },
    "train": {
        "steps": int,
        "batch_scenes": int,
        "max_lr": float,
        "pct_start": float,
        "div_factor": float,
        "final_div_factor": float,
        "weight_decay": float,
        "label_smoothing": float,
        "ema_decay": float,
        "eval_every": int,
        "voxel_mode": str,
    },
    "augment": {
        "enabled": _parse_bool,
        "mix_prob": float,
        "crop_ratio": _parse_floats,
        "rotate_z": _parse_floats,
        "tilt": float,
        "scale": _parse_floats,
        "translation": float,
        "flip_prob": float,
        "elastic": _parse_pairs,
        "instance_rotate_z": float,
        "instance_scale": _parse_floats,
        "instance_shift": float,
        "dropout": _parse_floats,
        "grid_shift": _parse_bool,
    },
    "distill": {
        "enabled": _parse_bool,
        "teacher": str,
        "hidden": int,
        "steps": int,
        "max_lr": float,
    },
    "dataset": {  # applies to every [dataset.<name>] section
        "classes": int,
        "scenes": str,
    },
}

_REQUIRED_RUN_KEYS = ("model", "voxel_size")


@dataclass
class DatasetConfig:
    classes: int
    scenes: str  # glob pattern, resolved against the config file directory

    def scene_paths(self, base_dir):
        pattern = self.scenes
        if not os.path.isabs(pattern):
            pattern = os.path.join(base_dir, pattern)
        return sorted(glob.glob(pattern))


@dataclass
class RunConfig:
    model_preset: str
    voxel_size: float
    patch_size: int = 5
    seed: int = 0
    out_dir: str = "runs/out"
    base_dir: str = "."
    model_overrides: dict = field(default_factory=dict)
    rope_pairs: tuple | None = None
    rope_theta: float = 10000.0
    rope_coordinate_mode: str = "metric_index"
    decoder_mode: str = "light"
    train: TrainSettings = field(default_factory=TrainSettings)
    augment_enabled: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    grid_shift: bool = False
    distill: DistillSettings = field(default_factory=DistillSettings)
    datasets: dict = field(default_factory=dict)

    def model_config(self, in_channels=3):
        distill_classes = None
        if self.distill.enabled:
            if len(self.datasets) != 1:
                raise ConfigError("distillation requires exactly one dataset")
            distill_classes = next(iter(self.datasets.values())).classes
        overrides = dict(self.model_overrides)
        overrides.update(
            patch_size=self.patch_size,
            in_channels=in_channels,
            rope_pairs=self.rope_pairs,
            rope_theta=self.rope_theta,
            rope_coordinate_mode=self.rope_coordinate_mode,
            decoder_mode=self.decoder_mode,
            dataset_classes={name: d.classes for name, d in self.datasets.items()},
            distill_classes=distill_classes,
        )
        return preset(self.model_preset, **overrides)


def _convert_section(parser_section, schema, section_name):
    out = {}
    for key, raw in parser_section.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in section [{section_name}]")
        try:
            out[key] = schema[key](raw)
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"bad value for {section_name}.{key}: {exc}") from exc
    return out


def parse_run_config(path):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")

    sections = {}
    for name in parser.sections():
        base = "dataset" if name.startswith("dataset.") else name
        if base not in _SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        sections[name] = _convert_section(parser[name], _SCHEMA[base], name)

    if "run" not in sections:
        raise ConfigError("missing required section [run]")
    run = sections.pop("run")
    for key in _REQUIRED_RUN_KEYS:
        if key not in run:
            raise ConfigError(f"missing required key run.{key}")

    cfg = RunConfig(
        model_preset=run["model"],
        voxel_size=run["voxel_size"],
        patch_size=run.get("patch_size", 5),
        seed=run.get("seed", 0),
        out_dir=run.get("out_dir", "runs/out"),
        base_dir=os.path.dirname(os.path.abspath(path)),
    )
    cfg.model_overrides = sections.pop("model", {})
    if cfg.model_overrides.get("decoder_width") is None:
        cfg.model_overrides.pop("decoder_width", None)

    rope = sections.pop("rope", {})
    cfg.rope_pairs = rope.get("pairs")
    cfg.rope_theta = rope.get("theta_base", 10000.0)
    cfg.rope_coordinate_mode = rope.get("coordinate_mode", "metric_index")
    cfg.decoder_mode = sections.pop("decoder", {}).get("mode", "light")

    train = sections.pop("train", {})
    cfg.train = TrainSettings(seed=cfg.seed, **train)

    aug = sections.pop("augment", {})
    cfg.augment_enabled = aug.pop("enabled", True)
    cfg.grid_shift = aug.pop("grid_shift", False)
    cfg.augment = AugmentConfig(master_seed=cfg.seed, **aug)

    distill = sections.pop("distill", {})
    cfg.distill = DistillSettings(**distill)

    for name in list(sections):
        if name.startswith("dataset."):
            body = sections.pop(name)
            if "classes" not in body:
                raise ConfigError(f"[{name}] needs a classes key")
            cfg.datasets[name.split(".", 1)[1]] = DatasetConfig(
                classes=body["classes"], scenes=body.get("scenes", "")
            )
    if sections:
        raise ConfigError(f"unhandled sections: {sorted(sections)}")
    return cfg
