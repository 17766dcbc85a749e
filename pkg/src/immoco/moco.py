"""Joint optimization of the image and motion networks against acquired k-space."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, fft2_centered, grid_sample_bilinear, sqrt, tsum
from .autodiff.tensor import log as tlog
from .groups import MovementGroups
from .inr import HashGridConfig, ImageINR, MotionINR, movement_code
from .physics import ComplexImage, KSpaceData

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """Raised when the objective becomes NaN or infinite; carries the trace so far."""

    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


def _image_hash() -> HashGridConfig:
    return HashGridConfig(n_levels=16, features_per_level=2, log2_table_size=14,
                          base_resolution=16, per_level_scale=1.5)


def _motion_hash() -> HashGridConfig:
    return HashGridConfig(n_levels=8, features_per_level=2, log2_table_size=12,
                          base_resolution=4, per_level_scale=1.5)


@dataclass
class MocoConfig:
    n_iterations: int = 200
    lr_image: float = 1e-2
    lr_motion: float = 1e-2
    lambda_init: float = 1e-2
    schedule_start_iter: int = 100
    schedule_halve_every: int = 10
    epsilon_log: float = 1e-8
    precision: str = "float64"
    seed: int = 0
    image_width: int = 256
    image_layers: int = 3
    motion_width: int = 64
    motion_layers: int = 3
    max_displacement: float = 0.25
    normalize: bool = True
    image_hash: HashGridConfig = field(default_factory=_image_hash)
    motion_hash: HashGridConfig = field(default_factory=_motion_hash)

    def __post_init__(self):
        if isinstance(self.image_hash, dict):
            self.image_hash = HashGridConfig(**self.image_hash)
        if isinstance(self.motion_hash, dict):
            self.motion_hash = HashGridConfig(**self.motion_hash)
        if self.lr_image <= 0 or self.lr_motion <= 0:
            raise ValueError("learning rates must be positive")
        if self.schedule_halve_every < 1:
            raise ValueError("schedule_halve_every must be >= 1")
        if self.schedule_start_iter > self.n_iterations:
            raise ValueError("schedule_start_iter must not exceed n_iterations")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MocoResult:
    image: ComplexImage
    trace: list[dict]
    grids: np.ndarray
    duration_s: float

    def trace_csv(self) -> str:
        rows = ["iter,dc,reg,lambda,total"]
        for r in self.trace:
            rows.append(f"{r['iter']},{r['dc']!r},{r['reg']!r},{r['lambda']!r},{r['total']!r}")
        return "\n".join(rows) + "\n"


def lambda_schedule(iteration: int, cfg: MocoConfig) -> float:
    """Regularization weight: constant, then halved every ``s`` steps from step ``i``."""
    i, s = cfg.schedule_start_iter, cfg.schedule_halve_every
    if iteration < i:
        return cfg.lambda_init
    return cfg.lambda_init / 2 ** ((iteration - i) // s + 1)


def motion_forward(image: Tensor, grids: Tensor | None, groups: MovementGroups) -> Tensor:
    """Masked sum of spectra of the image warped once per movement group.

    ``image`` is [2, h, w]; ``grids`` is [n, h, w, 2]. Reference lines take
    the spectrum of the unwarped image.
    """
    w = image.shape[-1]
    if groups.n_lines != w:
        raise ValueError(f"groups cover {groups.n_lines} lines, image has {w}")
    dtype = image.dtype
    ref = groups.reference_mask().astype(dtype)
    k = fft2_centered(image) * ref
    if groups.n_movements:
        if grids is None or grids.shape[0] != groups.n_movements:
            raise ValueError("one sampling grid per movement group is required")
        moved = grid_sample_bilinear(image, grids)  # n, 2, h, w
        masks = groups.masks().astype(dtype)[:, None, None, :]
        k = k + tsum(fft2_centered(moved) * masks, axis=0)
    return k


def guided_forward(image_inr: ImageINR, motion_inr: MotionINR, groups: MovementGroups,
                   code: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor | None]:
    """Evaluate both networks and the motion-guided acquisition.

    Returns ``(k_pred, image, grids)`` with ``k_pred`` and ``image`` as
    [2, h, w] tensors.
    """
    image = image_inr.channels_first()
    grids = None
    if groups.n_movements:
        code = movement_code(groups.n_movements) if code is None else code
        grids = motion_inr(code)
    return motion_forward(image, grids, groups), image, grids


def dc_loss(k_pred, k_acq) -> Tensor:
    """Mean squared complex difference over all grid points."""
    target = k_acq.data if isinstance(k_acq, (KSpaceData, Tensor)) else np.asarray(k_acq)
    if not isinstance(k_pred, Tensor):
        k_pred = Tensor(k_pred.data if isinstance(k_pred, KSpaceData) else k_pred)
    if k_pred.shape != target.shape:
        raise ValueError(f"k-space extents differ: {k_pred.shape} vs {target.shape}")
    diff = k_pred - target.astype(k_pred.dtype)
    n_points = target.shape[-1] * target.shape[-2]
    return tsum(diff * diff) * (1.0 / n_points)


def gradient_entropy(image, eps: float = 1e-8) -> Tensor:
    """Entropy of the normalized gradient-magnitude distribution of ``|image|``.

    Forward differences on the magnitude image; the per-pixel magnitude
    ``sqrt(gx^2 + gy^2 + eps) - sqrt(eps)`` vanishes for flat regions so a
    constant image scores exactly zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not isinstance(image, Tensor):
        image = Tensor(image.data if isinstance(image, ComplexImage) else image)
    re, im = image[0], image[1]
    mag = sqrt(re * re + im * im, eps)
    gx = mag[:-1, 1:] - mag[:-1, :-1]
    gy = mag[1:, :-1] - mag[:-1, :-1]
    g = sqrt(gx * gx + gy * gy, eps) - math.sqrt(eps)
    h = g / (tsum(g) + eps)
    return -tsum(h * tlog(h, eps))


def _init_networks(h: int, w: int, cfg: MocoConfig) -> tuple[ImageINR, MotionINR]:
    rng = np.random.default_rng(cfg.seed)
    image_inr = ImageINR(h, w, cfg.image_hash, cfg.image_width, cfg.image_layers, rng, cfg.dtype)
    motion_inr = MotionINR(h, w, cfg.motion_hash, cfg.motion_width, cfg.motion_layers,
                           cfg.max_displacement, rng, cfg.dtype)
    return image_inr, motion_inr


def run_moco(k_acq: KSpaceData, groups: MovementGroups, cfg: MocoConfig | None = None,
             callback=None) -> MocoResult:
    """Fit both networks to ``k_acq`` and return the image network's output."""
    cfg = cfg or MocoConfig()
    start = time.perf_counter()
    h, w = k_acq.n_freq, k_acq.n_phase
    if groups.n_lines != w:
        raise ValueError(f"groups cover {groups.n_lines} lines, k-space has {w}")
    scale = 1.0
    if cfg.normalize:
        peak = float(k_acq.to_image().magnitude().max())
        scale = peak if peak > 0 else 1.0
    target = (k_acq.data / scale).astype(cfg.dtype)
    image_inr, motion_inr = _init_networks(h, w, cfg)
    opt_image = Adam(image_inr.parameters().values(), lr=cfg.lr_image)
    motion_params = list(motion_inr.parameters().values()) if groups.n_movements else []
    opt_motion = Adam(motion_params, lr=cfg.lr_motion)
    code = movement_code(max(groups.n_movements, 1))
    trace: list[dict] = []
    for it in range(cfg.n_iterations):
        lam = lambda_schedule(it, cfg)
        k_pred, image, _ = guided_forward(image_inr, motion_inr, groups, code)
        dc = dc_loss(k_pred, target)
        reg = gradient_entropy(image, cfg.epsilon_log)
        total = dc + reg * lam
        row = {"iter": it, "dc": float(dc.data), "reg": float(reg.data), "lambda": lam,
               "total": float(total.data)}
        trace.append(row)
        if not math.isfinite(row["total"]):
            raise NonFiniteLossError(f"non-finite loss at iteration {it}", trace)
        total.backward()
        opt_image.step()
        if motion_params:
            opt_motion.step()
        if callback is not None:
            callback(it, row, image_inr, motion_inr)
    image = image_inr.channels_first().data * scale
    grids = motion_inr(code).data if groups.n_movements else np.zeros((0, h, w, 2), cfg.dtype)
    if not np.all(np.isfinite(image)):
        raise NonFiniteLossError("non-finite corrected image", trace)
    return MocoResult(ComplexImage(image.astype(np.float64)), trace, grids,
                      time.perf_counter() - start)
