"""Training objectives: supervised MSE, unsupervised fidelity + smoothness, split-group denoising."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .functional import conv2d
from .tensor import DimensionError, Tensor

# BT.601 full range, U/V centred at zero
YUV_MATRIX = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)


@dataclass(frozen=True)
class SmoothnessContext:
    """Weights for the edge-aware smoothness term; 4-connected neighbourhood."""

    sigma: float = 0.1
    fidelity_weight: float = 0.2

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.fidelity_weight < 0:
            raise ValueError("fidelity weight must be non-negative")


def _same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def supervised_loss(z, z_gt) -> Tensor:
    """Mean squared error over every element."""
    z, z_gt = T.as_tensor(z), T.as_tensor(z_gt)
    _same_shape(z, z_gt, "supervised_loss")
    return T.tmean(T.square(T.sub(z, z_gt)))


def rgb_to_yuv(img) -> Tensor:
    """[N,3,H,W] RGB in [0,1] to YUV with zero-centred chroma."""
    img = T.as_tensor(img)
    if img.ndim != 4 or img.shape[1] != 3:
        raise DimensionError(f"rgb_to_yuv expects [N,3,H,W], got {img.shape}")
    w = YUV_MATRIX.astype(img.dtype).reshape(3, 3, 1, 1)
    return conv2d(img, w, None)


def neighbour_weights(y: np.ndarray, ctx: SmoothnessContext) -> tuple:
    """w for horizontal and vertical neighbour pairs, shapes [N,1,H,W-1] and [N,1,H-1,W].

    Computed from the guidance image in YUV (single-channel guidance is used
    as is); symmetric by construction since each unordered pair is evaluated
    once.
    """
    y = np.asarray(y, dtype=np.float64)
    yuv = rgb_to_yuv(y).data if y.shape[1] == 3 else y
    dh = ((yuv[..., :, 1:] - yuv[..., :, :-1]) ** 2).sum(axis=1, keepdims=True)
    dv = ((yuv[..., 1:, :] - yuv[..., :-1, :]) ** 2).sum(axis=1, keepdims=True)
    two_s2 = 2.0 * ctx.sigma ** 2
    return np.exp(-dh / two_s2), np.exp(-dv / two_s2)


def smoothness_term(x, y, ctx: SmoothnessContext) -> Tensor:
    x = T.as_tensor(x)
    n, _, h, w = x.shape
    wh, wv = neighbour_weights(np.asarray(y), ctx)
    wh, wv = wh.astype(x.dtype), wv.astype(x.dtype)
    ax = T.tabs(T.sub(x[:, :, :, 1:], x[:, :, :, :-1]))
    ay = T.tabs(T.sub(x[:, :, 1:, :], x[:, :, :-1, :]))
    # each unordered pair appears twice in the sum over i and j in N(i)
    total = T.add(T.tsum(T.mul(ax, np.broadcast_to(wh, ax.shape))), T.tsum(T.mul(ay, np.broadcast_to(wv, ay.shape))))
    return T.mul(total, 2.0 / (n * h * w))


def unsupervised_loss(x, y, ctx: Optional[SmoothnessContext] = None) -> Tensor:
    """lambda * MSE(x, y) + per-pixel mean of sum_j w_ij |x_i - x_j|."""
    ctx = ctx or SmoothnessContext()
    x = T.as_tensor(x)
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    _same_shape(x, y_arr, "unsupervised_loss")
    fidelity = T.tmean(T.square(T.sub(x, y_arr.astype(x.dtype))))
    return T.add(T.mul(fidelity, ctx.fidelity_weight), smoothness_term(x, y_arr, ctx))


def adaptive_denoise_loss(zhat_a=None, gt_a=None, zhat_b=None, gt_b=None) -> Tensor:
    """MSE on the noisy group plus MSE on the clean group; empty groups are dropped."""
    terms = []
    for zh, gt, tag in ((zhat_a, gt_a, "noisy"), (zhat_b, gt_b, "clean")):
        if zh is None or (hasattr(zh, "shape") and zh.shape[0] == 0):
            continue
        if gt is None:
            raise ValueError(f"{tag} group has outputs but no ground truth")
        terms.append(supervised_loss(zh, gt))
    if not terms:
        raise ValueError("adaptive_denoise_loss needs at least one non-empty group")
    return terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
