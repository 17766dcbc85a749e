"""Centered, orthonormal 2D FFT on two-channel (real, imaginary) tensors."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _check, as_tensor, make_node


def _to_complex(x: np.ndarray) -> np.ndarray:
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


def _to_channels(z: np.ndarray, dtype) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-3).astype(dtype, copy=False)


def fft2c(z: np.ndarray) -> np.ndarray:
    """Centered orthonormal forward FFT of a complex array (last two axes)."""
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(z, axes=axes), norm="ortho"), axes=axes)


def ifft2c(z: np.ndarray) -> np.ndarray:
    """Centered orthonormal inverse FFT of a complex array (last two axes)."""
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(z, axes=axes), norm="ortho"), axes=axes)


def fft2_centered(x, direction: str = "forward") -> Tensor:
    """FFT of ``x`` shaped [..., 2, h, w] with DC at index (h//2, w//2).

    The transform is unitary, so the gradient of the forward transform is the
    inverse transform of the output gradient and vice versa.
    """
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-3] != 2:
        raise ShapeError(f"expected [..., 2, h, w], got {x.shape}")
    if direction not in ("forward", "inverse"):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    _check(x.data)
    fwd, adj = (fft2c, ifft2c) if direction == "forward" else (ifft2c, fft2c)
    out = _to_channels(fwd(_to_complex(x.data)), x.dtype)

    def backward(g):
        x._accumulate(_to_channels(adj(_to_complex(g)), x.dtype))

    return make_node(out, (x,), backward, f"fft2_{direction}")
