"""Run configuration: JSON documents with embedded toy/paper presets.

A config file only has to name a preset and the fields it overrides; the
normalized document (preset fully applied) is what gets embedded in
checkpoints and compared on resume.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import ModelConfig
from .quanv import QuanvConfig
from .train import TrainConfig
from .vit import ViTConfig

SEED_ENV_VAR = "QVITON_SEED"

_BASE = {
    "mode": "hybrid",
    "seed": 1234,
    "precision": "float32",
    "out_dir": "runs/default",
    "data": {
        "root": "",
        "split_granularity": "region",
        "ratios": [0.7, 0.15, 0.15],
        "band": 0,
        "median_filter": False,
        "percentile_stretch": False,
        "augment": True,
        "workers": 1,
    },
    "model": {
        "d_model": 64,
        "n_layers": 2,
        "n_heads": 2,
        "d_mlp": 256,
        "patch_size": 14,
        "image_size": 56,
        "dropout_p": 0.0,
        "n_var_layers": 2,
        "observable_qubit": 0,
        "classifier_hidden": [512, 256],
        "classifier_dropout": [0.5, 0.4],
    },
    "train": {
        "lr_max": 1e-4,
        "weight_decay": 0.05,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "warmup_epochs": 5,
        "total_epochs": 50,
        "batch_size": 16,
        "grad_clip": 1.0,
        "checkpoint_every": 1,
        "keep_epoch_checkpoints": False,
    },
}

_PAPER_MODEL = {
    "d_model": 1024,
    "n_layers": 24,
    "n_heads": 16,
    "d_mlp": 4096,
    "patch_size": 14,
    "image_size": 224,
}


def preset_doc(preset: str) -> dict:
    doc = copy.deepcopy(_BASE)
    if preset == "paper":
        doc["model"].update(_PAPER_MODEL)
    elif preset not in ("toy", "custom"):
        raise ConfigError(f"unknown preset {preset!r} (toy, paper, custom)")
    return doc


def _merge(base: dict, override: dict, path: str = "") -> dict:
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config field {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config field {where} must be an object")
            _merge(base[key], value, where)
        else:
            base[key] = value
    return base


@dataclass
class RunConfig:
    doc: dict

    @classmethod
    def from_dict(cls, user_doc: dict) -> "RunConfig":
        user_doc = dict(user_doc)
        preset = user_doc.pop("preset", "toy")
        doc = _merge(preset_doc(preset), user_doc)
        doc["preset"] = preset
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed is not None:
            try:
                doc["seed"] = int(env_seed)
            except ValueError:
                raise ConfigError(f"{SEED_ENV_VAR} must be an integer, "
                                  f"got {env_seed!r}") from None
        cfg = cls(doc)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            user_doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
        if not isinstance(user_doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(user_doc)

    def validate(self) -> None:
        if self.doc["precision"] not in ("float32", "float64"):
            raise ConfigError(
                f"config field precision: expected float32 or float64, "
                f"got {self.doc['precision']!r}")
        if not isinstance(self.doc["seed"], int):
            raise ConfigError("config field seed: expected an integer")
        self.model_config()  # surfaces model/mode field errors
        self.train_config()

    # typed views ---------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def mode(self) -> str:
        return self.doc["mode"]

    @property
    def out_dir(self) -> Path:
        return Path(self.doc["out_dir"])

    @property
    def data(self) -> dict:
        return self.doc["data"]

    @property
    def image_size(self) -> int:
        return int(self.doc["model"]["image_size"])

    def dtype(self):
        return np.float32 if self.doc["precision"] == "float32" else np.float64

    def model_config(self) -> ModelConfig:
        m = self.doc["model"]
        try:
            vit = ViTConfig(
                d_model=int(m["d_model"]), n_layers=int(m["n_layers"]),
                n_heads=int(m["n_heads"]), d_mlp=int(m["d_mlp"]),
                patch_size=int(m["patch_size"]),
                image_size=int(m["image_size"]),
                dropout_p=float(m["dropout_p"]))
            quanv = QuanvConfig(
                n_var_layers=int(m["n_var_layers"]),
                observable_qubit=int(m["observable_qubit"]))
            return ModelConfig(
                vit=vit, quanv=quanv, mode=self.doc["mode"],
                classifier_hidden=tuple(int(h) for h in m["classifier_hidden"]),
                classifier_dropout=tuple(float(p) for p in m["classifier_dropout"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config field model: {exc}") from None

    def train_config(self) -> TrainConfig:
        t = self.doc["train"]
        try:
            return TrainConfig(
                lr_max=float(t["lr_max"]),
                weight_decay=float(t["weight_decay"]),
                betas=(float(t["betas"][0]), float(t["betas"][1])),
                eps=float(t["eps"]),
                warmup_epochs=int(t["warmup_epochs"]),
                total_epochs=int(t["total_epochs"]),
                batch_size=int(t["batch_size"]),
                seed=self.seed,
                grad_clip=float(t["grad_clip"]))
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"config field train: {exc}") from None

    def to_dict(self) -> dict:
        return copy.deepcopy(self.doc)

    def signature(self) -> dict:
        """Structural fields a checkpoint must agree on to be loadable."""
        return {
            "mode": self.doc["mode"],
            "precision": self.doc["precision"],
            "model": copy.deepcopy(self.doc["model"]),
        }
