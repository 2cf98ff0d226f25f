"""Quantum feature pathway: classical stem -> 8x8 grid -> per-patch circuit
expectations -> 64-d feature vector.

The stem layers are ordinary convolutions (conv + batch norm + GELU); the
quantum computation is the per-patch circuit evaluation. Gradients cross the
circuit boundary via the parameter-shift rule and chain into the classical
tape on both sides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn, quantum
from . import tensor as T
from .errors import DimensionError
from .quantum import CircuitSpec
from .tensor import ParamStore, Tensor


@dataclass
class QuanvConfig:
    stem_channels: tuple[int, int] = (32, 64)
    pool_target: int = 8
    patch: int = 2
    n_qubits: int = 4
    n_var_layers: int = 2
    observable_qubit: int = 0
    restore_channels: int = 64
    use_circuit: bool = True  # False swaps in the constant 1 (gradient isolation aid)

    def __post_init__(self):
        if self.pool_target % self.patch:
            raise DimensionError(
                f"pool target {self.pool_target} not divisible by patch {self.patch}"
            )
        if self.patch * self.patch != self.n_qubits:
            raise DimensionError(
                f"a {self.patch}x{self.patch} patch needs {self.patch**2} qubits, "
                f"got {self.n_qubits}"
            )

    @property
    def out_features(self) -> int:
        return self.restore_channels

    @property
    def map_extent(self) -> int:
        return self.pool_target // self.patch


def patch_encode(grid: Tensor, patch: int = 2) -> Tensor:
    """Flatten non-overlapping patch windows into rotation angles.

    (B, 1, E, E) -> (B, (E/patch)^2, patch^2); patch (r, c) reads pixels
    rows [patch*r, patch*r+patch) x cols [patch*c, patch*c+patch) in
    row-major order, and each value maps to pi * sigmoid(value) in (0, pi).
    """
    if grid.ndim != 4 or grid.shape[1] != 1:
        raise DimensionError(f"expected (B,1,E,E), got {grid.shape}")
    b, _, e, e2 = grid.shape
    if e != e2 or e % patch:
        raise DimensionError(f"spatial extent {e}x{e2} not divisible by {patch}")
    p = e // patch
    windows = grid.reshape((b, p, patch, p, patch)).transpose((0, 1, 3, 2, 4))
    flat = windows.reshape((b, p * p, patch * patch))
    return T.sigmoid(flat) * math.pi


def _circuit_expectations(angles: Tensor, theta: Tensor, spec: CircuitSpec) -> Tensor:
    """Per-patch <Z> as a tape node; backward runs the shift rule.

    angles is (B, P, n_qubits) in radians, theta the shared trainable
    circuit angles. The simulator always works in float64; results and
    gradients are cast back to the classical dtype.
    """
    b, p, nq = angles.shape
    flat = angles.data.reshape(-1, nq).astype(np.float64)
    live = spec.with_theta(theta.data.astype(np.float64))
    e = quantum.batch_expectations(live, flat)
    out = e.reshape(b, p).astype(angles.dtype)

    def backward(g):
        d_in, d_th = quantum.parameter_shift_grad_batch(live, flat)
        gflat = g.reshape(-1, 1)
        g_angles = (gflat * d_in).reshape(angles.shape).astype(angles.dtype)
        g_theta = (gflat * d_th).sum(axis=0).astype(theta.dtype)
        return g_angles, g_theta

    return T._make(out, (angles, theta), backward)


def _constant_expectations(angles: Tensor) -> Tensor:
    """Stand-in for the circuit: the constant function 1, zero gradient."""
    b, p, _ = angles.shape
    out = np.ones((b, p), dtype=angles.dtype)
    return T._make(out, (angles,), lambda g: (np.zeros_like(angles.data),))


class QuanvPathway:
    """stem -> channel mixer -> patch encoding -> circuit -> restore -> pool."""

    def __init__(self, store: ParamStore, name: str, config: QuanvConfig,
                 rng: np.random.Generator, dtype=np.float32):
        self.config = config
        c1, c2 = config.stem_channels
        self.conv1 = nn.Conv2d(store, f"{name}.stem1", 3, c1, 7,
                               stride=2, padding=3, rng=rng, dtype=dtype)
        self.bn1 = nn.BatchNorm2d(store, f"{name}.bn1", c1, dtype=dtype)
        self.conv2 = nn.Conv2d(store, f"{name}.stem2", c1, c2, 3,
                               stride=2, padding=1, rng=rng, dtype=dtype)
        self.bn2 = nn.BatchNorm2d(store, f"{name}.bn2", c2, dtype=dtype)
        self.mixer = nn.Conv2d(store, f"{name}.mixer", c2, 1, 1, rng=rng, dtype=dtype)
        self.theta = store.register(
            f"{name}.circuit.theta",
            quantum.init_theta(rng, config.n_qubits, config.n_var_layers).astype(dtype),
        )
        self.spec = CircuitSpec(
            n_qubits=config.n_qubits,
            n_var_layers=config.n_var_layers,
            theta=np.zeros(config.n_qubits * config.n_var_layers),
            observable_qubit=config.observable_qubit,
        )
        self.restore = nn.Conv2d(store, f"{name}.restore", 1,
                                 config.restore_channels, 1, rng=rng, dtype=dtype)

    def stem(self, x: Tensor, train: bool) -> Tensor:
        """Two conv+BN+GELU stages, then adaptive pooling to the fixed grid."""
        if x.ndim != 4 or x.shape[-2] < 16 or x.shape[-1] < 16:
            raise DimensionError(
                f"stem needs (B,3,H,W) with H,W >= 16, got {x.shape}"
            )
        x = T.gelu(self.bn1(self.conv1(x), train))
        x = T.gelu(self.bn2(self.conv2(x), train))
        t = self.config.pool_target
        return nn.adaptive_avg_pool2d(x, (t, t))

    def channel_mix(self, grid: Tensor) -> Tensor:
        if grid.shape[1] != self.config.stem_channels[1]:
            raise DimensionError(
                f"mixer expects {self.config.stem_channels[1]} channels, "
                f"got {grid.shape[1]}"
            )
        return self.mixer(grid)

    def quantum_map(self, mixed: Tensor) -> Tensor:
        """(B, 1, E, E) mixed grid -> (B, 1, E/2, E/2) of circuit expectations."""
        angles = patch_encode(mixed, self.config.patch)
        if self.config.use_circuit:
            e = _circuit_expectations(angles, self.theta, self.spec)
        else:
            e = _constant_expectations(angles)
        m = self.config.map_extent
        return e.reshape((e.shape[0], 1, m, m))

    def forward(self, x: Tensor, train: bool) -> Tensor:
        qmap = self.quantum_map(self.channel_mix(self.stem(x, train)))
        restored = self.restore(qmap)
        return nn.global_avg_pool(restored).flatten(start_axis=1)

    __call__ = forward
