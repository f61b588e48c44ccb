"""Full-reference image fidelity: MSE, PSNR and Gaussian-windowed SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imaging import as_image


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    gaussian_sigma: float = 1.5
    dynamic_range: float = 255.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError("window_size must be a positive odd integer")
        if not self.gaussian_sigma > 0:
            raise ValueError("gaussian_sigma must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _pair(a, b):
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    diff = a - b
    return float(np.mean(diff * diff))


def psnr(a, b, peak: float = 255.0) -> float:
    """PSNR in dB; ``inf`` for identical images."""
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """1-D factor of the circular Gaussian window (the 2-D window is its outer product)."""
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(t * t) / (2 * sigma * sigma))
    return g / g.sum()


def ssim_map(a, b, params: SsimParams = SsimParams()) -> np.ndarray:
    """Local SSIM at every centre where the full window fits inside the image."""
    a, b = _pair(a, b)
    n = params.window_size
    if min(a.shape) < n:
        raise ValueError(f"image {a.shape} is smaller than the {n}x{n} window")
    g = gaussian_window(n, params.gaussian_sigma)
    r = n // 2

    def local_mean(img):
        out = ndimage.correlate1d(img, g, axis=0, mode="nearest")
        out = ndimage.correlate1d(out, g, axis=1, mode="nearest")
        return out[r:img.shape[0] - r, r:img.shape[1] - r]

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    c1, c2 = params.c1, params.c2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, params: SsimParams = SsimParams()) -> float:
    return float(np.mean(ssim_map(a, b, params)))


def central_crop(img, fraction: float = 0.8) -> np.ndarray:
    """Central region keeping *fraction* of each dimension."""
    img = as_image(img)
    h, w = img.shape
    ch, cw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
    y0, x0 = (h - ch) // 2, (w - cw) // 2
    return img[y0:y0 + ch, x0:x0 + cw]
