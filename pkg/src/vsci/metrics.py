"""Reconstruction quality metrics: per-frame PSNR and single-scale SSIM.

Both metrics are computed per frame and then averaged ("per-frame mean"
convention). Inputs are not clamped here; callers clamp reconstructions to
[0, 1] before scoring.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatchError

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeMismatchError(f"shape mismatch {x.shape} vs {ref.shape}")
    if x.ndim != 3:
        raise ShapeMismatchError(f"expected (H, W, B) cubes, got {x.shape}")
    return x, ref


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0):
    """Per-frame PSNR in dB plus the mean over frames.

    10*log10(peak^2 / MSE) per frame, capped at 100 dB (the cap value is
    reported for frames with zero MSE so CSV output stays numeric).
    """
    if peak <= 0:
        raise ValueError("peak must be > 0")
    x, ref = _check_pair(x, ref)
    mse = np.mean((x - ref) ** 2, axis=(0, 1))
    vals = np.full(mse.shape, PSNR_CAP_DB)
    nz = mse > 0
    vals[nz] = np.minimum(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse[nz]))
    return vals, float(vals.mean())


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    win = sliding_window_view(img, window.shape)
    return np.einsum("hwkl,kl->hw", win, window, optimize=True)


def ssim(x: np.ndarray, ref: np.ndarray):
    """Per-frame single-scale SSIM plus the mean over frames.

    11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic range 1.0;
    the SSIM map uses valid-mode filtering and is averaged over pixels, then
    over frames. Frames must be at least 11x11.
    """
    x, ref = _check_pair(x, ref)
    h, w, b = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeMismatchError(
            f"frames must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    vals = np.empty(b)
    for k in range(b):
        a = x[:, :, k]
        r = ref[:, :, k]
        mu_a = _filter_valid(a, window)
        mu_r = _filter_valid(r, window)
        var_a = _filter_valid(a * a, window) - mu_a * mu_a
        var_r = _filter_valid(r * r, window) - mu_r * mu_r
        cov = _filter_valid(a * r, window) - mu_a * mu_r
        num = (2.0 * mu_a * mu_r + c1) * (2.0 * cov + c2)
        den = (mu_a * mu_a + mu_r * mu_r + c1) * (var_a + var_r + c2)
        vals[k] = float(np.mean(num / den))
    return vals, float(vals.mean())
