"""Full-reference (PSNR, SSIM) and no-reference (DE, LOE) image quality metrics.

Images are ``[3,H,W]`` (or ``[H,W]`` grayscale) arrays in [0, 1].
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LOE_MAX_SIDE = 50
LOE_SCALE = 1000.0

LUMA = np.array([0.299, 0.587, 0.114])


def luminance(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=(0, 0))
    raise ValueError(f"expected [3,H,W] or [H,W], got {img.shape}")


def _check_pair(a, b) -> tuple:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical images give +inf."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def window_size(H: int, W: int) -> int:
    k = min(SSIM_WINDOW, H, W)
    if k < 1:
        raise ValueError(f"empty image {H}x{W}")
    return k if k % 2 else k - 1


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b) -> float:
    """Mean SSIM of the luminance over all fully-contained 11x11 Gaussian windows.

    Images smaller than the window use the largest odd window that fits,
    keeping sigma and renormalizing the taps.
    """
    a, b = _check_pair(a, b)
    la, lb = luminance(a), luminance(b)
    size = window_size(*la.shape)
    g = gaussian_window(size)
    mu_a, mu_b = _filter_valid(la, g), _filter_valid(lb, g)
    var_a = _filter_valid(la * la, g) - mu_a ** 2
    var_b = _filter_valid(lb * lb, g) - mu_b ** 2
    cov = _filter_valid(la * lb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def quantized_luminance(img) -> np.ndarray:
    return np.clip(np.round(luminance(img) * 255.0), 0, 255).astype(np.int64)


def de_entropy(img) -> float:
    """Shannon entropy (bits) of the 256-bin histogram of 8-bit luminance."""
    counts = np.bincount(quantized_luminance(img).ravel(), minlength=256)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def lightness(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.max(axis=0) if img.ndim == 3 else img


def _nearest_indices(n: int, cap: int) -> np.ndarray:
    m = min(n, cap)
    return (np.arange(m) * n) // m


def loe(enhanced, original) -> float:
    """Lightness-order error, scaled by 1000.

    Lightness is the per-pixel RGB maximum, nearest-sampled down to at most
    50x50; the score is the fraction of ordered pixel pairs whose
    ``>=`` relation differs between the two images.
    """
    e, o = _check_pair(enhanced, original)
    le, lo = lightness(e), lightness(o)
    ri = _nearest_indices(le.shape[0], LOE_MAX_SIDE)
    ci = _nearest_indices(le.shape[1], LOE_MAX_SIDE)
    le = le[np.ix_(ri, ci)].ravel()
    lo = lo[np.ix_(ri, ci)].ravel()
    flips = (lo[:, None] >= lo[None, :]) ^ (le[:, None] >= le[None, :])
    return float(flips.mean() * LOE_SCALE)


@dataclass
class MetricRow:
    id: str
    psnr: float
    ssim: float
    de: float
    loe: float


def _mean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def _fmt(v: float) -> str:
    return f"{v:.6f}"


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def add(self, image_id: str, enhanced, original, reference=None) -> MetricRow:
        if reference is not None:
            p, s = psnr(enhanced, reference), ssim(enhanced, reference)
        else:
            p = s = math.nan
        row = MetricRow(image_id, p, s, de_entropy(enhanced), loe(enhanced, original))
        self.rows.append(row)
        return row

    def means(self) -> dict:
        return {k: _mean(getattr(r, k) for r in self.rows) for k in ("psnr", "ssim", "de", "loe")}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "psnr", "ssim", "de", "loe"])
        for r in self.rows:
            w.writerow([r.id, _fmt(r.psnr), _fmt(r.ssim), _fmt(r.de), _fmt(r.loe)])
        m = self.means()
        w.writerow(["mean", _fmt(m["psnr"]), _fmt(m["ssim"]), _fmt(m["de"]), _fmt(m["loe"])])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())
