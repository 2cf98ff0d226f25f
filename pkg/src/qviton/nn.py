"""Layer-level building blocks on top of the autodiff tensor core.

Convolution uses the cross-correlation convention (no kernel flip), matching
standard deep-learning usage. Batch norm keeps running statistics with
momentum 0.1 and uses them in eval mode.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import ParamStore, Tensor


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over (B, C, H, W) input.

    Output spatial extent is floor((H + 2*padding - k) / stride) + 1.
    """
    x = T._as_tensor(x)
    w = T._as_tensor(weight)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv2d expects (B,C,H,W) x (F,C,k,k), got {x.shape} and {w.shape}"
        )
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    b_, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"input has {c} channels but kernel expects {cw}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{wd + 2 * padding}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (B, C, H', W', kh, kw) patches, strided view only
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    # force one memory layout: reshape may yield an F-ordered view at B=1,
    # and BLAS accumulation order (hence bits) depends on the layout
    cols = np.ascontiguousarray(
        windows.transpose(0, 2, 3, 1, 4, 5).reshape(b_ * oh * ow, c * kh * kw))
    wmat = w.data.reshape(f, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b_, oh, ow, f).transpose(0, 3, 1, 2)

    def backward(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(b_ * oh * ow, f)
        gw = (gcols.T @ cols).reshape(w.data.shape)
        gb = gcols.sum(axis=0) if bias is not None else None
        dcols = (gcols @ wmat).reshape(b_, oh, ow, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        if bias is not None:
            return dx, gw, gb
        return dx, gw

    parents = (x, w) if bias is None else (x, w, bias)
    return T._make(out, parents, backward)


def adaptive_avg_pool2d(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Average over computed bins so any input maps to the target extent."""
    x = T._as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"expected (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    th, tw = target
    hs = [(i * h // th, -(-((i + 1) * h) // th)) for i in range(th)]
    ws = [(j * w // tw, -(-((j + 1) * w) // tw)) for j in range(tw)]
    out = np.empty((b, c, th, tw), dtype=x.dtype)
    for i, (h0, h1) in enumerate(hs):
        for j, (w0, w1) in enumerate(ws):
            out[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def backward(g):
        dx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hs):
            for j, (w0, w1) in enumerate(ws):
                area = (h1 - h0) * (w1 - w0)
                dx[:, :, h0:h1, w0:w1] += g[:, :, i:i + 1, j:j + 1] / area
        return (dx,)

    return T._make(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    return adaptive_avg_pool2d(x, (1, 1))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis to zero mean / unit variance,
    then apply the affine parameters."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / T.sqrt(var + eps)
    return normed * gamma + beta


# -- layer objects -------------------------------------------------------------
#
# Layers register their parameters into a shared ParamStore under a dotted
# name prefix, so the optimizer and checkpoint code see one flat registry.


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) redrawn until inside +/- 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def he_normal(rng: np.random.Generator, shape, fan_in: int,
              dtype=np.float32) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, dtype=np.float32,
                 std: float = 0.02, zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            w = trunc_normal(rng, (d_in, d_out), std=std, dtype=dtype)
        self.w = store.register(f"{name}.w", w)
        self.b = store.register(f"{name}.b", np.zeros(d_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class Conv2d:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 kernel: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.stride = stride
        self.padding = padding
        fan_in = c_in * kernel * kernel
        w = he_normal(rng, (c_out, c_in, kernel, kernel), fan_in, dtype=dtype)
        self.w = store.register(f"{name}.w", w)
        self.b = store.register(f"{name}.b", np.zeros(c_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int,
                 dtype=np.float32, eps: float = 1e-5):
        self.eps = eps
        self.gamma = store.register(f"{name}.gamma", np.ones(d, dtype=dtype))
        self.beta = store.register(f"{name}.beta", np.zeros(d, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, eps=self.eps)


class BatchNorm2d:
    """Per-channel batch norm; train mode uses batch statistics and updates
    the running buffers, eval mode normalizes with the running statistics."""

    def __init__(self, store: ParamStore, name: str, channels: int,
                 dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1):
        self.eps = eps
        self.momentum = momentum
        self.gamma = store.register(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = store.register(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = store.register_buffer(
            f"{name}.running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = store.register_buffer(
            f"{name}.running_var", np.ones(channels, dtype=dtype))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if x.ndim != 4:
            raise DimensionError(f"expected (B,C,H,W), got {x.shape}")
        gamma = self.gamma.reshape((1, -1, 1, 1))
        beta = self.beta.reshape((1, -1, 1, 1))
        if train:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            n = x.size // x.shape[1]
            unbias = n / (n - 1) if n > 1 else 1.0
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mu.data.ravel()
            self.running_var[...] = (
                (1 - m) * self.running_var + m * unbias * var.data.ravel()
            )
            normed = centered / T.sqrt(var + self.eps)
        else:
            mu = self.running_mean.reshape(1, -1, 1, 1)
            sd = np.sqrt(self.running_var.reshape(1, -1, 1, 1) + self.eps)
            normed = (x - mu) / Tensor(sd)
        return normed * gamma + beta


class Dropout:
    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def __call__(self, x: Tensor, train: bool,
                 rng: np.random.Generator | None = None) -> Tensor:
        return T.dropout(x, self.p, train=train, rng=rng)
