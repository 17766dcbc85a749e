import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from immoco.metrics import evaluate, haarpsi, psnr, ssim


def smooth_image(n=32, seed=0):
    r = np.random.default_rng(seed)
    y, x = np.mgrid[0:n, 0:n] / n
    img = 0.5 + 0.3 * np.sin(6 * x + r.uniform()) * np.cos(4 * y) + 0.1 * r.standard_normal((n, n))
    return np.clip(img, 0, 1)


def loop_ssim(x, y, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Window-by-window SSIM with explicit sums."""
    half = (size - 1) / 2
    w = [[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma ** 2)) for j in range(size)]
         for i in range(size)]
    total = sum(map(sum, w))
    w = [[v / total for v in row] for row in w]
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for r0 in range(x.shape[0] - size + 1):
        for s0 in range(x.shape[1] - size + 1):
            mx = my = 0.0
            for i in range(size):
                for j in range(size):
                    mx += w[i][j] * x[r0 + i, s0 + j]
                    my += w[i][j] * y[r0 + i, s0 + j]
            vx = vy = cxy = 0.0
            for i in range(size):
                for j in range(size):
                    dx, dy = x[r0 + i, s0 + j] - mx, y[r0 + i, s0 + j] - my
                    vx += w[i][j] * dx * dx
                    vy += w[i][j] * dy * dy
                    cxy += w[i][j] * dx * dy
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def loop_haarpsi(x, ref, C=30.0, alpha=4.2, scales=3):
    """HaarPSI written from the defining formulas with explicit pixel loops."""

    def conv_same(img, k):
        # full convolution cropped to the centre, matching 'same' alignment
        kh, kw = k.shape
        h, w = img.shape
        out = np.zeros((h, w))
        oy, ox = (kh - 1) // 2, (kw - 1) // 2
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for a in range(kh):
                    for b in range(kw):
                        ii, jj = i + oy - a, j + ox - b
                        if 0 <= ii < h and 0 <= jj < w:
                            acc += k[a, b] * img[ii, jj]
                out[i, j] = acc
        return out

    def sub(img):
        return conv_same(img, np.full((2, 2), 0.25))[::2, ::2]

    def haar(scale, vertical):
        n = 2 ** scale
        k = np.full((n, n), 2.0 ** -scale)
        k[: n // 2, :] *= -1
        return k.T if vertical else k

    a, b = sub(ref * 255.0), sub(x * 255.0)
    num = den = 0.0
    resp = {}
    for img, tag in ((a, "a"), (b, "b")):
        for s in range(1, scales + 1):
            for v in (False, True):
                resp[tag, s, v] = conv_same(img, haar(s, v))
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            for v in (False, True):
                sim = 0.0
                for s in (1, 2):
                    p, q = abs(resp["a", s, v][i, j]), abs(resp["b", s, v][i, j])
                    sim += (2 * p * q + C) / (p * p + q * q + C) / 2
                weight = max(abs(resp["a", scales, v][i, j]), abs(resp["b", scales, v][i, j]))
                num += weight / (1 + math.exp(-alpha * sim))
                den += weight
    val = num / den
    return (math.log(val / (1 - val)) / alpha) ** 2


def test_psnr_closed_forms():
    x = smooth_image()
    assert psnr(x, x) == float("inf")
    assert psnr(np.full((8, 8), 0.6), np.full((8, 8), 0.5)) == pytest.approx(20.0)


def test_psnr_matches_direct_mse():
    r = np.random.default_rng(1)
    a, b = r.uniform(size=(16, 16)), r.uniform(size=(16, 16))
    mse = sum((a[i, j] - b[i, j]) ** 2 for i in range(16) for j in range(16)) / 256
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), abs=1e-10)


def test_psnr_decreases_with_noise():
    x = smooth_image()
    noise = np.random.default_rng(2).uniform(-1, 1, x.shape)
    vals = [psnr(x + a * noise, x) for a in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_ssim_identity_and_symmetry():
    x, y = smooth_image(seed=0), smooth_image(seed=1)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-14)
    assert ssim(x, y) < 1


def test_ssim_matches_loop_oracle():
    x, y = smooth_image(seed=3), smooth_image(seed=4)
    assert abs(ssim(x, y) - loop_ssim(x, y)) < 1e-8


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))


def test_haarpsi_identity():
    x = smooth_image()
    assert abs(haarpsi(x, x) - 1.0) < 1e-6


def test_haarpsi_monotone_in_noise():
    x = smooth_image(seed=5)
    noise = np.random.default_rng(6).uniform(-1, 1, x.shape)
    light, heavy = haarpsi(x + 0.02 * noise, x), haarpsi(x + 0.3 * noise, x)
    assert 0 <= heavy < light <= 1


def test_haarpsi_matches_loop_oracle():
    x, y = smooth_image(seed=7), smooth_image(seed=8)
    assert abs(haarpsi(x, y) - loop_haarpsi(x, y)) < 1e-8


def test_haarpsi_rejects_small_images():
    with pytest.raises(ValueError):
        haarpsi(np.zeros((16, 16)), np.zeros((16, 16)))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (32, 32), elements=st.floats(0, 1)),
       arrays(np.float64, (32, 32), elements=st.floats(0, 1)))
def test_metric_ranges(a, b):
    s = ssim(a, b)
    assert -1 - 1e-12 <= s <= 1 + 1e-12
    h = haarpsi(a, b)
    assert 0 <= h <= 1 + 1e-9
    assert ssim(a, a) == pytest.approx(1.0)


def test_evaluate_normalizes_by_reference_max():
    ref = smooth_image() * 7.0 * np.exp(1j * 0.3)
    rep = evaluate(ref * 1.0, ref)
    assert rep.ssim == pytest.approx(1.0) and rep.psnr == float("inf")
    noisy = evaluate(ref + 0.5 * np.random.default_rng(9).standard_normal(ref.shape), ref)
    assert noisy.psnr < 40 and noisy.ssim < 1
