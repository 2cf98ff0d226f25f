"""Vision Transformer backbone producing a pooled context vector.

Pre-norm residual blocks; learned positional embeddings; a CLS token whose
final representation feeds a dense + tanh pooler. The paper-scale preset is
1024 wide, 24 blocks, 16 heads; the toy preset is small enough to gradcheck.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import ParamStore, Tensor


@dataclass
class ViTConfig:
    d_model: int = 1024
    n_layers: int = 24
    n_heads: int = 16
    d_mlp: int = 4096
    patch_size: int = 14
    image_size: int = 224
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch "
                f"{self.patch_size}"
            )

    @classmethod
    def paper(cls) -> "ViTConfig":
        return cls()

    @classmethod
    def toy(cls) -> "ViTConfig":
        return cls(d_model=64, n_layers=2, n_heads=2, d_mlp=256,
                   patch_size=14, image_size=56)

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def parameter_count(self) -> int:
        """Trainable parameter total, computed from the config alone."""
        d, m = self.d_model, self.d_mlp
        patch_proj = 3 * self.patch_size**2 * d + d
        embeddings = d + (self.n_patches + 1) * d  # CLS + positions
        block = 2 * d + 4 * (d * d + d) + 2 * d + (d * m + m) + (m * d + d)
        pooler = d * d + d
        return patch_proj + embeddings + self.n_layers * block + 2 * d + pooler


class EncoderBlock:
    """x + MHSA(LN(x)) then x + MLP(LN(x)); output projections start at zero
    so each block is the identity at initialization."""

    def __init__(self, store: ParamStore, name: str, config: ViTConfig,
                 rng: np.random.Generator, dtype=np.float32):
        d = config.d_model
        self.n_heads = config.n_heads
        self.d_head = d // config.n_heads
        self.scale = 1.0 / math.sqrt(self.d_head)
        self.ln1 = nn.LayerNorm(store, f"{name}.ln1", d, dtype=dtype)
        self.wq = nn.Linear(store, f"{name}.attn.wq", d, d, rng, dtype)
        self.wk = nn.Linear(store, f"{name}.attn.wk", d, d, rng, dtype)
        self.wv = nn.Linear(store, f"{name}.attn.wv", d, d, rng, dtype)
        self.wo = nn.Linear(store, f"{name}.attn.wo", d, d, rng, dtype,
                            zero_init=True)
        self.ln2 = nn.LayerNorm(store, f"{name}.ln2", d, dtype=dtype)
        self.fc1 = nn.Linear(store, f"{name}.mlp.fc1", d, config.d_mlp, rng, dtype)
        self.fc2 = nn.Linear(store, f"{name}.mlp.fc2", config.d_mlp, d, rng, dtype,
                             zero_init=True)
        self.drop = nn.Dropout(config.dropout_p)

    def attention(self, x: Tensor) -> Tensor:
        """Per-head scaled dot-product attention over the token axis."""
        b, t, d = x.shape
        h, dh = self.n_heads, self.d_head

        def split(proj):
            return proj.reshape((b, t, h, dh)).transpose((0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = T.matmul(q, k.transpose((0, 1, 3, 2))) * self.scale
        weights = T.softmax(scores, axis=-1)
        mixed = T.matmul(weights, v)
        merged = mixed.transpose((0, 2, 1, 3)).reshape((b, t, d))
        return self.wo(merged)

    def __call__(self, x: Tensor, train: bool,
                 rng: np.random.Generator | None = None) -> Tensor:
        x = x + self.drop(self.attention(self.ln1(x)), train, rng)
        x = x + self.drop(self.fc2(T.gelu(self.fc1(self.ln2(x)))), train, rng)
        return x


class ViTBackbone:
    def __init__(self, store: ParamStore, name: str, config: ViTConfig,
                 rng: np.random.Generator, dtype=np.float32):
        self.config = config
        d, p = config.d_model, config.patch_size
        self.proj = nn.Linear(store, f"{name}.patch_proj", 3 * p * p, d, rng, dtype)
        self.cls = store.register(
            f"{name}.cls", nn.trunc_normal(rng, (1, 1, d), dtype=dtype))
        self.pos = store.register(
            f"{name}.pos",
            nn.trunc_normal(rng, (config.n_patches + 1, d), dtype=dtype))
        self.blocks = [
            EncoderBlock(store, f"{name}.block{i}", config, rng, dtype)
            for i in range(config.n_layers)
        ]
        self.ln_f = nn.LayerNorm(store, f"{name}.ln_f", d, dtype=dtype)
        self.pool_dense = nn.Linear(store, f"{name}.pool.dense", d, d, rng, dtype)
        self.drop = nn.Dropout(config.dropout_p)

    def embed(self, x: Tensor) -> Tensor:
        """Project non-overlapping patches to tokens, prepend CLS, add
        positional embeddings. Token order is row-major over the patch grid."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected (B,3,S,S), got {x.shape}")
        b, _, s, s2 = x.shape
        p = self.config.patch_size
        if s != s2 or s % p:
            raise DimensionError(f"image {s}x{s2} not divisible by patch {p}")
        g = s // p
        patches = (
            x.reshape((b, 3, g, p, g, p))
            .transpose((0, 2, 4, 1, 3, 5))
            .reshape((b, g * g, 3 * p * p))
        )
        tokens = self.proj(patches)
        cls = T.concat([self.cls] * b, axis=0)
        tokens = T.concat([cls, tokens], axis=1)
        return tokens + self.pos

    def encode(self, tokens: Tensor, train: bool,
               rng: np.random.Generator | None = None) -> Tensor:
        tokens = self.drop(tokens, train, rng)
        for block in self.blocks:
            tokens = block(tokens, train, rng)
        return self.ln_f(tokens)

    def pool(self, tokens: Tensor) -> Tensor:
        """CLS token -> dense -> tanh; each component lands in (-1, 1)."""
        return T.tanh(self.pool_dense(tokens[:, 0, :]))

    def forward(self, x: Tensor, train: bool,
                rng: np.random.Generator | None = None) -> Tensor:
        return self.pool(self.encode(self.embed(x), train, rng))

    __call__ = forward
