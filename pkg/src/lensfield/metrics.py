"""Image quality metrics on sRGB-encoded, 8-bit quantized images."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .imageio import to_srgb8

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11


def quantize(linear) -> np.ndarray:
    """Linear RGB to sRGB 8-bit levels rescaled into [0, 1]."""
    return to_srgb8(linear).astype(np.float64) / 255.0


def psnr_encoded(a, b) -> float:
    """PSNR of two images already in [0, 1], capped for exact matches."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _blur(x):
    # truncate so the kernel spans exactly SSIM_WINDOW taps
    radius = SSIM_WINDOW // 2
    return gaussian_filter(x, SSIM_SIGMA, mode="reflect", truncate=radius / SSIM_SIGMA)


def ssim_encoded(a, b) -> float:
    """Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    pad = SSIM_WINDOW // 2
    vals = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _blur(x), _blur(y)
        sxx = _blur(x * x) - mx * mx
        syy = _blur(y * y) - my * my
        sxy = _blur(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        if s.shape[0] > 2 * pad and s.shape[1] > 2 * pad:
            s = s[pad:-pad, pad:-pad]
        vals.append(s.mean())
    return float(np.mean(vals))


def psnr(linear_a, linear_b) -> float:
    return psnr_encoded(quantize(linear_a), quantize(linear_b))


def ssim(linear_a, linear_b) -> float:
    return ssim_encoded(quantize(linear_a), quantize(linear_b))
