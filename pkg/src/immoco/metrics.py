"""Image quality metrics: PSNR, SSIM and HaarPSI.

All metrics expect real images with data range 1; :func:`evaluate`
turns complex images into magnitude images scaled by the reference maximum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

# HaarPSI constants of the original publication, fitted for 8-bit intensities
HAARPSI_C = 30.0
HAARPSI_ALPHA = 4.2
HAARPSI_SCALES = 3


def _pair(x, ref) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape or x.ndim != 2:
        raise ValueError(f"metrics need two 2D images of equal shape, got {x.shape} and {ref.shape}")
    return x, ref


def psnr(x, ref, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    x, ref = _pair(x, ref)
    mse = np.mean((x - ref) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(data_range ** 2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(x, ref, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all fully contained Gaussian windows."""
    x, ref = _pair(x, ref)
    if min(x.shape) < window:
        raise ValueError(f"images must be at least {window}x{window}")
    win = gaussian_window(window, sigma)

    def filt(img):
        return convolve2d(img, win[::-1, ::-1], mode="valid")

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = filt(x), filt(ref)
    sxx = filt(x * x) - mx * mx
    syy = filt(ref * ref) - my * my
    sxy = filt(x * ref) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def _haar_decompose(img: np.ndarray, n_scales: int) -> np.ndarray:
    coeffs = np.zeros(img.shape + (2 * n_scales,))
    for scale in range(1, n_scales + 1):
        f = 2.0 ** (-scale) * np.ones((2 ** scale, 2 ** scale))
        f[: f.shape[0] // 2, :] *= -1
        coeffs[:, :, scale - 1] = convolve2d(img, f, mode="same")
        coeffs[:, :, scale + n_scales - 1] = convolve2d(img, f.T, mode="same")
    return coeffs


def _subsample(img: np.ndarray) -> np.ndarray:
    return convolve2d(img, np.ones((2, 2)) / 4.0, mode="same")[::2, ::2]


def haarpsi(x, ref, data_range: float = 1.0) -> float:
    """Haar wavelet-based perceptual similarity index in [0, 1].

    Images are rescaled to the 0..255 range the constants were fitted for and
    subsampled by two before a three-scale Haar decomposition.
    """
    x, ref = _pair(x, ref)
    if min(x.shape) < 32:
        raise ValueError("haarpsi needs images of at least 32x32")
    a = _subsample(ref / data_range * 255.0)
    b = _subsample(x / data_range * 255.0)
    n = HAARPSI_SCALES
    ca, cb = _haar_decompose(a, n), _haar_decompose(b, n)
    sims = np.zeros(a.shape + (2,))
    weights = np.zeros(a.shape + (2,))
    for o in range(2):
        weights[..., o] = np.maximum(np.abs(ca[..., 2 + o * n]), np.abs(cb[..., 2 + o * n]))
        ma = np.abs(ca[..., [o * n, 1 + o * n]])
        mb = np.abs(cb[..., [o * n, 1 + o * n]])
        sims[..., o] = np.sum((2 * ma * mb + HAARPSI_C) / (ma ** 2 + mb ** 2 + HAARPSI_C), axis=-1) / 2
    wsum = weights.sum()
    if wsum == 0:
        return 1.0
    s = 1.0 / (1.0 + np.exp(-HAARPSI_ALPHA * sims))
    v = float(np.sum(s * weights) / wsum)
    v = min(v, 1.0 - 1e-15)
    return float((np.log(v / (1.0 - v)) / HAARPSI_ALPHA) ** 2)


@dataclass
class MetricReport:
    ssim: float
    psnr: float
    haarpsi: float


def normalized_magnitudes(x, ref) -> tuple[np.ndarray, np.ndarray]:
    """Magnitudes of two (complex or real) images divided by the reference maximum."""
    def mag(im):
        if hasattr(im, "magnitude"):
            return im.magnitude()
        return np.abs(np.asarray(im))

    mx, mr = mag(x), mag(ref)
    peak = mr.max()
    if peak == 0:
        peak = 1.0
    return mx / peak, mr / peak


def evaluate(x, ref) -> MetricReport:
    a, b = normalized_magnitudes(x, ref)
    return MetricReport(ssim=ssim(a, b), psnr=psnr(a, b), haarpsi=haarpsi(a, b))
