"""Differentiable layer primitives: convolution, pooling, linear, activations, loss.

Each op computes its forward pass with numpy and records a fused backward
closure. Reductions that feed statistics or losses accumulate in float64.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigurationError, DataError
from .tensor import Tensor, make


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # (N, C, Ho, Wo, kh, kw) -> (N, C*kh*kw, Ho*Wo)
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ConfigurationError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if stride < 1 or padding < 0 or kh < 1 or kw < 1:
        raise ConfigurationError(f"conv2d: invalid stride={stride}/padding={padding}/kernel={kh}x{kw}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ConfigurationError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    if b is not None and b.shape != (cout,):
        raise ConfigurationError(f"conv2d: bias shape {b.shape} != ({cout},)")
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(wd, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    cols = xp.reshape(n, cin, h * wd) if pointwise else _im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(cout, -1)
    y = np.matmul(w2, cols)
    if b is not None:
        y += b.data[:, None]
    y = y.reshape(n, cout, ho, wo)

    def bw(g):
        g3 = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g3.sum(axis=(0, 2), dtype=np.float64).astype(b.dtype)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(n, cin, kh, kw, ho, wo)
                gxp = np.zeros(xp.shape, dtype=x.dtype)
                hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[:, :, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return make(y, parents, bw, "conv2d")


def pool(x: Tensor, kind: str, k: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max, average or global-average pooling over the spatial dims of ``x[N,C,H,W]``."""
    if x.ndim != 4:
        raise ConfigurationError(f"pool expects a 4-D input, got {x.shape}")
    if kind == "global_avg":
        return global_avg_pool(x)
    if kind not in ("max", "avg"):
        raise ConfigurationError(f"unknown pool kind {kind!r}")
    stride = k if stride is None else stride
    n, c, h, wd = x.shape
    if k < 1 or stride < 1 or k > h + 2 * padding or k > wd + 2 * padding:
        raise ConfigurationError(f"pool window {k} exceeds spatial extent {h}x{wd}")
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(wd, k, stride, padding)
    fill = -np.inf if kind == "max" else 0.0
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    if kind == "max":
        flat = win.reshape(n, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def bw(g):
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for idx in range(k * k):
                i, j = divmod(idx, k)
                gxp[:, :, i : i + hs : stride, j : j + ws : stride] += np.where(arg == idx, g, 0)
            return (gxp[:, :, padding : padding + h, padding : padding + wd],)

    else:
        y = win.mean(axis=(-2, -1), dtype=np.float64).astype(x.dtype)

        def bw(g):
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            share = g / (k * k)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += share
            return (gxp[:, :, padding : padding + h, padding : padding + wd],)

    return make(np.ascontiguousarray(y), (x,), bw, f"{kind}_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, wd = x.shape
    y = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)

    def bw(g):
        return (np.broadcast_to(g / (h * wd), x.shape).astype(x.dtype),)

    return make(y, (x,), bw, "global_avg_pool")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x @ w.T + b`` for ``x[N,Din]`` and ``w[Dout,Din]``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ConfigurationError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ConfigurationError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data

    def bw(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0, dtype=np.float64).astype(b.dtype)

    return make(y, (x, w) if b is None else (x, w, b), bw, "linear")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[label]``, stabilized by max subtraction."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DataError(f"logits must be [N,K], got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise DataError(f"labels shape {labels.shape} does not match batch size {n}")
    if n == 0:
        raise DataError("cross entropy of an empty batch is undefined")
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, labels])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return ((p * (float(g) / n)).astype(logits.dtype),)

    return make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make(x.data * cdf, (x,), bw, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")
