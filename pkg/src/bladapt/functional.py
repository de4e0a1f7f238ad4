"""Convolutional network primitives built on the tape in `tensor`."""

from __future__ import annotations

from typing import MutableMapping, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, _note_branch, as_tensor, make_op

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class DegenerateBatchError(ValueError):
    """Batch statistics requested over fewer than two values per channel."""


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation, NCHW input and OCkk weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise DimensionError(f"conv2d channel axis mismatch: input C={C}, weight C={Cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel axes must be odd, got kh={kh}, kw={kw}")
    if padding < 0 or stride < 1:
        raise ValueError(f"invalid padding={padding} / stride={stride}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise DimensionError(f"conv2d spatial axes H={H}, W={W} smaller than kernel {kh}x{kw}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise DimensionError(f"conv2d bias axis must be ({O},), got {bias.shape}")

    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, N * Ho * Wo)
    wmat = weight.data.reshape(O, -1)
    out = (wmat @ cols).reshape(O, N, Ho, Wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g, mask):
        gmat = g.transpose(1, 0, 2, 3).reshape(O, -1)
        gx = gw = gb = None
        if mask[0]:
            dcols = (wmat.T @ gmat).reshape(C, kh, kw, N, Ho, Wo)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        if mask[1]:
            gw = (gmat @ cols.T).reshape(weight.shape)
        if bias is not None and mask[2]:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv2d", inputs, out, bw)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
    stats_out: Optional[MutableMapping[str, np.ndarray]] = None,
    key: str = "bn",
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode batch statistics are used; the momentum-updated running
    statistics are written to ``stats_out[key + ".running_mean"/".running_var"]``
    when a mapping is supplied, leaving the passed-in arrays untouched.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    N, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm2d affine params must be ({C},), got {gamma.shape}, {beta.shape}")
    g4 = gamma.data.reshape(1, C, 1, 1)
    xd = x.data

    if training:
        count = N * H * W
        if count < 2:
            raise DegenerateBatchError(f"batchnorm2d in train mode needs >=2 values per channel, got {count}")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if stats_out is not None:
            stats_out[key + ".running_mean"] = ((1 - momentum) * running_mean + momentum * mean).astype(running_mean.dtype)
            stats_out[key + ".running_var"] = (
                (1 - momentum) * running_var + momentum * var * count / (count - 1)
            ).astype(running_var.dtype)
    else:
        mean, var = running_mean, running_var

    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype).reshape(1, C, 1, 1)
    xhat = (xd - mean.reshape(1, C, 1, 1).astype(xd.dtype)) * inv
    out = xhat * g4 + beta.data.reshape(1, C, 1, 1)

    def bw(g, mask):
        gx = gg = gb = None
        if mask[0]:
            dxhat = g * g4
            if training:
                gx = inv * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            else:
                gx = dxhat * inv
        if mask[1]:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if mask[2]:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gg, gb

    return make_op("batchnorm2d", (x, gamma, beta), out, bw)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    N, C, H, W = x.shape
    if H % k or W % k:
        raise DimensionError(f"maxpool2d: spatial axes H={H}, W={W} not divisible by {k}")
    blocks = x.data.reshape(N, C, H // k, k, W // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // k, W // k, k * k)
    arg = blocks.argmax(axis=-1)
    _note_branch("maxpool2d", arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g, mask):
        # ties route to the first maximum only
        onehot = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(N, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)
        return (gx,)

    return make_op("maxpool2d", (x,), out, bw)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g, mask):
        return (g.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return make_op("upsample_nearest", (x,), out, bw)
