"""Hash-grid encodings and the image / motion coordinate networks."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, identity_grid, matmul, relu, tanh
from .autodiff.tensor import ShapeError, make_node

log = logging.getLogger(__name__)

PRIMES = (1, 2654435761, 805459861)


@dataclass
class HashGridConfig:
    n_levels: int = 16
    features_per_level: int = 2
    log2_table_size: int = 14
    base_resolution: int = 16
    per_level_scale: float = 1.5
    init_scale: float = 1e-4

    @property
    def table_size(self) -> int:
        return 2 ** self.log2_table_size

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.features_per_level


class HashGridEncoding:
    """Multi-resolution feature grids indexed by a spatial hash.

    Coordinates in [-1, 1]^d are mapped to [0, res_l] on level ``l``; the
    ``2^d`` surrounding vertices are looked up and blended d-linearly. Levels
    whose full vertex grid fits in the table are indexed densely, finer
    levels through the XOR-of-primes hash.
    """

    def __init__(self, dim: int, config: HashGridConfig, rng: np.random.Generator,
                 dtype=np.float64):
        if dim not in (2, 3):
            raise ValueError(f"hash grid supports 2 or 3 input dimensions, got {dim}")
        self.dim = dim
        self.config = config
        self.resolutions = [int(np.floor(config.base_resolution * config.per_level_scale ** l))
                            for l in range(config.n_levels)]
        shape = (config.n_levels, config.table_size, config.features_per_level)
        self.table = Tensor(rng.uniform(-config.init_scale, config.init_scale, shape).astype(dtype),
                            requires_grad=True)
        self.n_clamped = 0
        self._plan_key: np.ndarray | None = None
        self._plan = None

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def parameters(self) -> dict[str, Tensor]:
        return {"table": self.table}

    def _vertex_index(self, corner: np.ndarray, res: int) -> np.ndarray:
        T = self.config.table_size
        if (res + 1) ** self.dim <= T:
            idx = np.zeros(corner.shape[0], dtype=np.int64)
            stride = 1
            for i in range(self.dim):
                idx += corner[:, i] * stride
                stride *= res + 1
            return idx
        c = corner.astype(np.uint64)
        h = np.zeros(corner.shape[0], dtype=np.uint64)
        for i in range(self.dim):
            h ^= c[:, i] * np.uint64(PRIMES[i])
        return (h % np.uint64(T)).astype(np.int64)

    def plan(self, coords: np.ndarray):
        """Corner indices, weights and per-axis cell fractions for ``coords``."""
        key = self._plan_key
        if key is not None and key.shape == coords.shape and np.array_equal(key, coords):
            return self._plan
        if coords.ndim != 2 or coords.shape[1] != self.dim:
            raise ShapeError(f"coords must be [p, {self.dim}], got {coords.shape}")
        outside = (coords < -1.0) | (coords > 1.0)
        if outside.any():
            self.n_clamped += int(outside.any(axis=1).sum())
            log.warning("clamped %d coordinates into [-1, 1]", int(outside.any(axis=1).sum()))
        u = (np.clip(coords, -1.0, 1.0) + 1.0) * 0.5
        L, T = self.config.n_levels, self.config.table_size
        corners = list(itertools.product((0, 1), repeat=self.dim))
        p = coords.shape[0]
        idx = np.empty((L, len(corners), p), dtype=np.int64)
        frac = np.empty((L, p, self.dim))
        for l, res in enumerate(self.resolutions):
            pos = u * res
            base = np.minimum(np.floor(pos), res - 1).astype(np.int64)
            frac[l] = pos - base
            for ci, bits in enumerate(corners):
                idx[l, ci] = self._vertex_index(base + np.asarray(bits), res) + l * T
        weights = np.ones((L, len(corners), p))
        for ci, bits in enumerate(corners):
            for i, b in enumerate(bits):
                weights[:, ci] *= frac[:, :, i] if b else 1.0 - frac[:, :, i]
        result = (idx, weights, frac, corners)
        self._plan_key, self._plan = coords.copy(), result
        return result

    def __call__(self, coords) -> Tensor:
        return self.encode(coords)

    def encode(self, coords) -> Tensor:
        """Encode ``coords`` [p, d] into features [p, n_levels * features_per_level]."""
        coords_t = coords if isinstance(coords, Tensor) else Tensor(np.asarray(coords))
        cdata = coords_t.data
        idx, weights, frac, corners = self.plan(cdata)
        table = self.table
        L, T, F = table.shape
        flat = table.data.reshape(L * T, F)
        w = weights.astype(table.dtype, copy=False)
        p = cdata.shape[0]
        out = np.empty((p, L, F), dtype=table.dtype)
        for f in range(F):
            out[:, :, f] = (np.take(flat[:, f], idx) * w).sum(axis=1).T
        out = out.reshape(p, L * F)
        res = np.asarray(self.resolutions, dtype=np.float64)

        def backward(g):
            g = g.reshape(p, L, F).transpose(1, 0, 2)  # L, p, F
            if table.requires_grad:
                gt = np.empty((L * T, F), dtype=table.dtype)
                flat_idx = idx.ravel()
                for f in range(F):
                    gt[:, f] = np.bincount(flat_idx, weights=(w * g[:, None, :, f]).ravel(),
                                           minlength=L * T)
                table._accumulate(gt.reshape(L, T, F))
            if coords_t.requires_grad:
                dot = np.einsum("lcpf,lpf->lcp", flat[idx], g)
                gc = np.zeros((p, self.dim))
                for i in range(self.dim):
                    dw = np.ones_like(weights)
                    for ci, bits in enumerate(corners):
                        for j, b in enumerate(bits):
                            if j == i:
                                dw[:, ci] *= 1.0 if b else -1.0
                            else:
                                dw[:, ci] *= frac[:, :, j] if b else 1.0 - frac[:, :, j]
                    gc[:, i] = np.einsum("lcp,lcp,l->p", dot, dw, res * 0.5)
                coords_t._accumulate(gc)

        return make_node(out, (table, coords_t), backward, "hash_encode")


class MLP:
    """Fully connected network: ``n_hidden`` layers of ``width`` plus a linear head."""

    def __init__(self, in_dim: int, width: int, n_hidden: int, out_dim: int,
                 activation: str, rng: np.random.Generator, dtype=np.float64,
                 zero_head: bool = True):
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.activation = activation
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        dims = [in_dim] + [width] * n_hidden
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype),
                                       requires_grad=True))
            self.biases.append(Tensor(rng.uniform(-bound, bound, fan_out).astype(dtype),
                                      requires_grad=True))
        if zero_head:
            head_w = np.zeros((width, out_dim), dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(width)
            head_w = rng.uniform(-bound, bound, (width, out_dim)).astype(dtype)
        self.weights.append(Tensor(head_w, requires_grad=True))
        self.biases.append(Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True))

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"layer{i}.weight"] = w
            params[f"layer{i}.bias"] = b
        return params

    def __call__(self, x: Tensor) -> Tensor:
        act = relu if self.activation == "relu" else tanh
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = matmul(x, w) + b
            if i < last:
                x = act(x)
        return x


def pixel_coordinates(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """All pixel centres as [h*w, 2] (x, y) in [-1, 1], row-major."""
    return identity_grid(h, w, dtype).reshape(-1, 2)


def movement_code(n: int) -> np.ndarray:
    """``n`` movement indices spread linearly over [-1, 1] (0 for a single movement)."""
    if n < 1:
        raise ValueError("movement code needs n >= 1")
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


class ImageINR:
    """Hash-grid encoded ReLU MLP mapping (x, y) to a complex pixel value."""

    def __init__(self, h: int, w: int, encoding: HashGridConfig | None = None,
                 width: int = 256, n_hidden: int = 3, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.h, self.w = h, w
        self.encoding = HashGridEncoding(2, encoding or HashGridConfig(), rng, dtype)
        self.mlp = MLP(self.encoding.output_dim, width, n_hidden, 2, "relu", rng, dtype)
        self.coords = pixel_coordinates(h, w, dtype)

    def parameters(self) -> dict[str, Tensor]:
        params = {f"encoding.{k}": v for k, v in self.encoding.parameters().items()}
        params.update({f"mlp.{k}": v for k, v in self.mlp.parameters().items()})
        return params

    def __call__(self) -> Tensor:
        """Image as [h, w, 2]."""
        out = self.mlp(self.encoding(self.coords))
        return out.reshape(self.h, self.w, 2)

    def channels_first(self) -> Tensor:
        """Image as [2, h, w], the layout used by the FFT and warps."""
        return self().transpose(2, 0, 1)


class MotionINR:
    """Hash-grid encoded tanh MLP mapping (x, y, movement) to a displacement.

    Raw outputs are squashed by tanh and scaled so that no displacement
    exceeds ``max_displacement`` of the field of view. Grids are returned as
    identity sampling grids plus displacement, ready for bilinear warping.
    """

    def __init__(self, h: int, w: int, encoding: HashGridConfig | None = None,
                 width: int = 64, n_hidden: int = 3, max_displacement: float = 0.25,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng or np.random.default_rng(1)
        self.h, self.w = h, w
        cfg = encoding or HashGridConfig(n_levels=8, log2_table_size=12, base_resolution=4,
                                         per_level_scale=1.5)
        self.encoding = HashGridEncoding(3, cfg, rng, dtype)
        self.mlp = MLP(self.encoding.output_dim, width, n_hidden, 2, "tanh", rng, dtype)
        # the field of view spans 2 units in normalized coordinates
        self.scale = 2.0 * max_displacement
        self._identity = identity_grid(h, w, dtype)
        self._coords_cache: dict[bytes, np.ndarray] = {}
        self.dtype = dtype

    def parameters(self) -> dict[str, Tensor]:
        params = {f"encoding.{k}": v for k, v in self.encoding.parameters().items()}
        params.update({f"mlp.{k}": v for k, v in self.mlp.parameters().items()})
        return params

    def coordinates(self, code: np.ndarray) -> np.ndarray:
        key = np.asarray(code, dtype=np.float64).tobytes()
        if key not in self._coords_cache:
            xy = self._identity.reshape(-1, 2)
            blocks = [np.concatenate([xy, np.full((xy.shape[0], 1), c, dtype=self.dtype)], axis=1)
                      for c in code]
            self._coords_cache = {key: np.concatenate(blocks, axis=0)}
        return self._coords_cache[key]

    def displacement(self, code: np.ndarray) -> Tensor:
        """Displacement fields [n, h, w, 2] in normalized units."""
        raw = self.mlp(self.encoding(self.coordinates(code)))
        return (tanh(raw) * self.scale).reshape(len(code), self.h, self.w, 2)

    def __call__(self, code: np.ndarray) -> Tensor:
        """Sampling grids [n, h, w, 2], one per movement."""
        return self.displacement(code) + self._identity
