"""Image-shaped primitives: convolution, pooling, normalization, warping."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _check, as_tensor, make_node


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        from .tensor import reshape
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected [c,h,w] or [n,c,h,w], got {x.shape}")
    return x, False


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[c*kh*kw, n*ho*wo] patch matrix built from kh*kw shifted slices."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation (no kernel flip), optionally batched.

    ``x`` is ``[c_in, h, w]`` or ``[n, c_in, h, w]``; ``kernel`` is
    ``[c_out, c_in, kh, kw]``; ``bias`` is ``[c_out]``.
    """
    x, squeeze = _batched(as_tensor(x))
    kernel = as_tensor(kernel)
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"kernel expects {ci} input channels, input has {c}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("kernel larger than padded input")
    _check(x.data, kernel.data)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, ho, wo)  # reused by the kernel gradient
    k2 = kernel.data.reshape(co, -1)
    out = np.ascontiguousarray((k2 @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3))
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, -1)
        if kernel.requires_grad:
            kernel._accumulate((gt @ cols.T).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gt.sum(axis=1))
        if not x.requires_grad:
            return
        if stride == 1:
            # full correlation of the output gradient with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            hp, wp = xp.shape[2], xp.shape[3]
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            dxp = (flipped @ _im2col(gp, kh, kw, 1, hp, wp)).reshape(c, n, hp, wp).transpose(1, 0, 2, 3)
        else:
            dcols = (k2.T @ gt).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, i, j].transpose(1, 0, 2, 3)
        x._accumulate(dxp[:, :, padding:padding + h, padding:padding + w])

    res = make_node(out, parents, backward, "conv2d")
    if squeeze:
        from .tensor import reshape
        res = reshape(res, res.shape[1:])
    return res


def avg_pool2d(x) -> Tensor:
    """2x2 average pooling with stride 2."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2d needs even spatial extents, got {h}x{w}")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

    def backward(g):
        up = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        x._accumulate(up)

    return make_node(out, (x,), backward, "avg_pool2d")


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]

    def backward(g):
        x._accumulate(g.reshape(lead + (h, 2, w, 2)).sum(axis=(-3, -1)))

    return make_node(out, (x,), backward, "upsample2x")


class BatchNormState:
    """Running statistics for one batch-norm layer (not optimized)."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float64):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of ``[n, c, h, w]`` input.

    In training mode statistics come from the batch (for ``n == 1`` that is
    the single instance) and the running estimates are updated in place.
    """
    x, squeeze = _batched(as_tensor(x))
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    _check(x.data)
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // x.shape[1]
        unbiased = var * m / max(m - 1, 1)
        state.running_mean *= 1 - state.momentum
        state.running_mean += state.momentum * mu
        state.running_var *= 1 - state.momentum
        state.running_var += state.momentum * unbiased
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data[None, :, None, None]
            if training:
                gx = gx - gx.mean(axis=axes, keepdims=True) \
                    - xhat * (gx * xhat).mean(axis=axes, keepdims=True)
            x._accumulate(gx * inv[None, :, None, None])

    res = make_node(out.astype(x.dtype), (x, gamma, beta), backward, "batch_norm")
    if squeeze:
        from .tensor import reshape
        res = reshape(res, res.shape[1:])
    return res


def grid_sample_bilinear(image, grid) -> Tensor:
    """Sample ``image`` [c, h, w] at normalized positions ``grid`` [..., ho, wo, 2].

    ``grid[..., 0]`` is the column (x) and ``grid[..., 1]`` the row (y)
    coordinate, both in [-1, 1] with -1/+1 at the centres of the first/last
    pixel. Corners falling outside the image contribute zero. Leading grid
    axes produce leading output axes: output is [..., c, ho, wo].
    """
    image, grid = as_tensor(image), as_tensor(grid)
    if image.ndim != 3:
        raise ShapeError(f"image must be [c,h,w], got {image.shape}")
    if grid.ndim < 3 or grid.shape[-1] != 2:
        raise ShapeError(f"grid must be [..., h, w, 2], got {grid.shape}")
    _check(image.data, grid.data)
    c, h, w = image.shape
    lead = grid.shape[:-1]
    gx = grid.data[..., 0].reshape(-1)
    gy = grid.data[..., 1].reshape(-1)
    sx, sy = (w - 1) / 2.0, (h - 1) / 2.0
    px = (gx + 1.0) * sx
    py = (gy + 1.0) * sy
    x0 = np.floor(px)
    y0 = np.floor(py)
    tx = px - x0
    ty = py - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    flat = image.data.reshape(c, h * w)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.where(valid, yi * w + xi, 0)
        wx = tx if dx else 1.0 - tx
        wy = ty if dy else 1.0 - ty
        vals = flat[:, idx] * valid
        corners.append((idx, valid, wx, wy, dx, dy, vals))
    out = sum(wx * wy * vals for _, _, wx, wy, _, _, vals in corners)
    npts = gx.size
    out_shaped = np.moveaxis(out.reshape((c,) + lead), 0, -3)

    def backward(g):
        gflat = np.moveaxis(g, -3, 0).reshape(c, npts)
        if image.requires_grad:
            gimg = np.zeros((c, h * w), dtype=image.dtype)
            for idx, valid, wx, wy, _, _, _ in corners:
                wgt = wx * wy * valid
                for ch in range(c):
                    gimg[ch] += np.bincount(idx, weights=gflat[ch] * wgt, minlength=h * w)
            image._accumulate(gimg.reshape(c, h, w))
        if grid.requires_grad:
            ggx = np.zeros(npts, dtype=grid.dtype)
            ggy = np.zeros(npts, dtype=grid.dtype)
            for _, _, wx, wy, dx, dy, vals in corners:
                dot = (gflat * vals).sum(axis=0)
                ggx += dot * wy * (1.0 if dx else -1.0)
                ggy += dot * wx * (1.0 if dy else -1.0)
            gg = np.stack([ggx * sx, ggy * sy], axis=-1).reshape(grid.shape)
            grid._accumulate(gg)

    return make_node(out_shaped.astype(image.dtype), (image, grid), backward, "grid_sample")


def identity_grid(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Normalized sampling grid [h, w, 2] that reproduces the input exactly."""
    ys = np.linspace(-1.0, 1.0, h, dtype=dtype)
    xs = np.linspace(-1.0, 1.0, w, dtype=dtype)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx, yy], axis=-1)
