"""Fusion of the quantum feature vector with the ViT context vector, plus the
MLP classifier and the classical-only baseline used for A/B comparison.

Baseline mode never constructs the quantum branch, so the two variants differ
only in the quantum pathway and the classifier's extra input columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, DimensionError
from .quanv import QuanvConfig, QuanvPathway
from .tensor import ParamStore, Tensor
from .vit import ViTBackbone, ViTConfig

CLASS_NAMES = ("non-flooded", "flooded")


@dataclass
class ModelConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    quanv: QuanvConfig = field(default_factory=QuanvConfig)
    mode: str = "hybrid"  # hybrid | baseline
    classifier_hidden: tuple[int, int] = (512, 256)
    classifier_dropout: tuple[float, float] = (0.5, 0.4)
    n_classes: int = 2

    def __post_init__(self):
        if self.mode not in ("hybrid", "baseline"):
            raise ConfigError(f"mode must be hybrid or baseline, got {self.mode!r}")

    @classmethod
    def paper(cls, mode: str = "hybrid") -> "ModelConfig":
        return cls(vit=ViTConfig.paper(), mode=mode)

    @classmethod
    def toy(cls, mode: str = "hybrid") -> "ModelConfig":
        return cls(vit=ViTConfig.toy(), mode=mode)

    @property
    def fused_width(self) -> int:
        if self.mode == "baseline":
            return self.vit.d_model
        return self.vit.d_model + self.quanv.out_features


def fuse(q: Tensor, v: Tensor) -> Tensor:
    """Concatenate quantum features before the ViT context vector."""
    if q.ndim != v.ndim or q.shape[:-1] != v.shape[:-1]:
        raise DimensionError(
            f"cannot fuse branches of shapes {q.shape} and {v.shape}"
        )
    return T.concat([q, v], axis=-1)


class Classifier:
    """fused -> 512 -> 256 -> logits, with LN + GELU + dropout between."""

    def __init__(self, store: ParamStore, name: str, d_in: int,
                 hidden: tuple[int, int], dropout: tuple[float, float],
                 n_classes: int, rng: np.random.Generator, dtype=np.float32):
        h1, h2 = hidden
        self.fc1 = nn.Linear(store, f"{name}.fc1", d_in, h1, rng, dtype)
        self.ln1 = nn.LayerNorm(store, f"{name}.ln1", h1, dtype=dtype)
        self.drop1 = nn.Dropout(dropout[0])
        self.fc2 = nn.Linear(store, f"{name}.fc2", h1, h2, rng, dtype)
        self.ln2 = nn.LayerNorm(store, f"{name}.ln2", h2, dtype=dtype)
        self.drop2 = nn.Dropout(dropout[1])
        self.out = nn.Linear(store, f"{name}.out", h2, n_classes, rng, dtype)

    def __call__(self, x: Tensor, train: bool,
                 rng: np.random.Generator | None = None) -> Tensor:
        x = self.drop1(T.gelu(self.ln1(self.fc1(x))), train, rng)
        x = self.drop2(T.gelu(self.ln2(self.fc2(x))), train, rng)
        return self.out(x)


class HybridModel:
    """Two-branch classifier over preprocessed (3, S, S) tiles.

    All parameters live in one flat ParamStore; the dropout rng is part of
    the model state so checkpoints can reproduce training exactly.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.store = ParamStore()
        vit_seq, quanv_seq, clf_seq, drop_seq = np.random.SeedSequence(seed).spawn(4)
        self.vit = ViTBackbone(self.store, "vit", config.vit,
                               np.random.default_rng(vit_seq), dtype)
        self.quanv = None
        if config.mode == "hybrid":
            self.quanv = QuanvPathway(self.store, "quanv", config.quanv,
                                      np.random.default_rng(quanv_seq), dtype)
        self.classifier = Classifier(
            self.store, "clf", config.fused_width, config.classifier_hidden,
            config.classifier_dropout, config.n_classes,
            np.random.default_rng(clf_seq), dtype)
        self.dropout_rng = np.random.default_rng(drop_seq)
        self.training = True

    def train(self) -> "HybridModel":
        self.training = True
        return self

    def eval(self) -> "HybridModel":
        self.training = False
        return self

    def param_count(self) -> int:
        return self.store.total_parameters()

    def fuse(self, q: Tensor, v: Tensor) -> Tensor:
        if q.shape[-1] != self.config.quanv.out_features:
            raise DimensionError(
                f"quantum branch width {q.shape[-1]} != "
                f"{self.config.quanv.out_features}"
            )
        if v.shape[-1] != self.config.vit.d_model:
            raise DimensionError(
                f"context width {v.shape[-1]} != {self.config.vit.d_model}"
            )
        return fuse(q, v)

    def classify(self, fused: Tensor) -> Tensor:
        if fused.shape[-1] != self.config.fused_width:
            raise DimensionError(
                f"classifier expects width {self.config.fused_width}, "
                f"got {fused.shape[-1]}"
            )
        return self.classifier(fused, self.training, self.dropout_rng)

    def forward(self, images: Tensor) -> Tensor:
        """Logits of shape (B, 2); accepts (3,S,S) or (B,3,S,S) input."""
        images = T._as_tensor(images)
        single = images.ndim == 3
        if single:
            images = images.reshape((1,) + images.shape)
        v = self.vit(images, self.training, self.dropout_rng)
        if self.quanv is not None:
            q = self.quanv.forward(images, self.training)
            logits = self.classify(self.fuse(q, v))
        else:
            logits = self.classify(v)
        return logits[0] if single else logits

    __call__ = forward
