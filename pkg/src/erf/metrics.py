"""Image quality metrics."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def mse(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped for identical inputs."""
    err = mse(a, b)
    if err <= 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / err), PSNR_CAP))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # valid-region separable filtering
    out = correlate1d(img, win, axis=0, mode="reflect")
    out = correlate1d(out, win, axis=1, mode="reflect")
    r = win.size // 2
    return out[r:out.shape[0] - r, r:out.shape[1] - r]


def ssim(a, b, size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity with a Gaussian window, averaged over channels."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    win = gaussian_window(size, sigma)
    scores = []
    for c in range(x.shape[2]):
        xc, yc = x[..., c], y[..., c]
        mu_x = _filter(xc, win)
        mu_y = _filter(yc, win)
        sxx = _filter(xc * xc, win) - mu_x * mu_x
        syy = _filter(yc * yc, win) - mu_y * mu_y
        sxy = _filter(xc * yc, win) - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sxx + syy + SSIM_C2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
