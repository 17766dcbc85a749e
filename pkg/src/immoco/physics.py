"""Complex image and k-space containers, rigid motion, and the acquisition model.

Images and k-spaces are stored as two-channel real arrays ``[2, h, w]``
(real, imaginary). The frequency-encode axis runs along rows (``h = N_x``)
and phase-encode lines are columns (``w = N_y``), filled left to right.
Translations are in pixels, with 1 px taken as 1 mm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, fft2c, grid_sample_bilinear, identity_grid, ifft2c


@dataclass
class ComplexImage:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise ValueError(f"complex image must be [2, h, w], got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("complex image contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_complex(cls, z: np.ndarray, dtype=np.float64) -> "ComplexImage":
        return cls(np.stack([z.real, z.imag]).astype(dtype))

    @classmethod
    def from_real(cls, x: np.ndarray, dtype=np.float64) -> "ComplexImage":
        x = np.asarray(x, dtype=dtype)
        return cls(np.stack([x, np.zeros_like(x)]))

    def to_complex(self) -> np.ndarray:
        return self.data[0] + 1j * self.data[1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.data[0], self.data[1])


@dataclass
class KSpaceData:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise ValueError(f"k-space must be [2, n_freq, n_phase], got {self.data.shape}")

    @property
    def n_freq(self) -> int:
        return self.data.shape[1]

    @property
    def n_phase(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_complex(cls, z: np.ndarray, dtype=np.float64) -> "KSpaceData":
        return cls(np.stack([z.real, z.imag]).astype(dtype))

    def to_complex(self) -> np.ndarray:
        return self.data[0] + 1j * self.data[1]

    def to_image(self) -> ComplexImage:
        """Zero-filled inverse FFT reconstruction."""
        return ComplexImage.from_complex(ifft2c(self.to_complex()), self.data.dtype)


def fft_image(image: ComplexImage) -> KSpaceData:
    return KSpaceData.from_complex(fft2c(image.to_complex()), image.data.dtype)


@dataclass(frozen=True)
class RigidMotion:
    rotation_deg: float = 0.0
    tx_mm: float = 0.0
    ty_mm: float = 0.0

    def __post_init__(self):
        if abs(self.rotation_deg) > 180:
            raise ValueError(f"rotation must lie in [-180, 180], got {self.rotation_deg}")
        if not (math.isfinite(self.tx_mm) and math.isfinite(self.ty_mm)):
            raise ValueError("translations must be finite")

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and self.tx_mm == 0 and self.ty_mm == 0

    def inverse(self) -> "RigidMotion":
        # forward: p' = R p + t (about the centre); inverse: p = R^T p' - R^T t
        th = math.radians(self.rotation_deg)
        c, s = math.cos(th), math.sin(th)
        tx = -(c * self.tx_mm + s * self.ty_mm)
        ty = -(-s * self.tx_mm + c * self.ty_mm)
        return RigidMotion(-self.rotation_deg, tx, ty)


def rigid_grid(motion: RigidMotion, h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Inverse-warp sampling grid [h, w, 2] for ``motion``.

    The motion rotates about the image centre (positive angles turn the +x
    axis towards +y, i.e. towards increasing row index) and then translates
    by ``(tx, ty)`` pixels along columns and rows.
    """
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    th = math.radians(motion.rotation_deg)
    c, s = math.cos(th), math.sin(th)
    # output pixel p' samples input at R^T (p' - centre - t) + centre
    ux = xx - cx - motion.tx_mm
    uy = yy - cy - motion.ty_mm
    sx = c * ux + s * uy + cx
    sy = -s * ux + c * uy + cy
    gx = sx / cx - 1.0 if w > 1 else np.zeros_like(sx)
    gy = sy / cy - 1.0 if h > 1 else np.zeros_like(sy)
    return np.stack([gx, gy], axis=-1).astype(dtype)


def warp(image, grid) -> Tensor:
    """Differentiable warp of a [2, h, w] tensor by a sampling grid."""
    return grid_sample_bilinear(image, grid)


def apply_rigid(image: ComplexImage, motion: RigidMotion) -> ComplexImage:
    """Rigidly move ``image`` with bilinear resampling and zero fill."""
    if motion.is_identity:
        return ComplexImage(image.data.copy())
    grid = rigid_grid(motion, image.height, image.width, image.data.dtype)
    return ComplexImage(grid_sample_bilinear(Tensor(image.data), grid).data)


@dataclass
class SamplingSchedule:
    """Contiguous, left-to-right line segments with one rigid motion each.

    ``segments[t] = (start, end)`` is inclusive. Segment ``t`` defines the
    time-point mask ``S_t``.
    """

    n_lines: int
    segments: list[tuple[int, int]]
    motions: list[RigidMotion]

    def __post_init__(self):
        self.segments = [(int(a), int(b)) for a, b in self.segments]
        if len(self.segments) != len(self.motions):
            raise ValueError("one motion per segment required")
        expected = 0
        for a, b in self.segments:
            if a != expected or b < a:
                raise ValueError(f"segments must tile 0..{self.n_lines - 1} left to right")
            expected = b + 1
        if expected != self.n_lines:
            raise ValueError(f"segments cover {expected} of {self.n_lines} lines")

    @property
    def n_time_points(self) -> int:
        return len(self.segments)

    @property
    def masks(self) -> np.ndarray:
        """Boolean [T, n_lines] masks, pairwise disjoint and covering."""
        m = np.zeros((len(self.segments), self.n_lines), dtype=bool)
        for t, (a, b) in enumerate(self.segments):
            m[t, a:b + 1] = True
        return m

    def line_labels(self) -> np.ndarray:
        """Per-line ground truth: 1 where the line's motion is not identity."""
        labels = np.zeros(self.n_lines, dtype=np.uint8)
        for (a, b), m in zip(self.segments, self.motions):
            if not m.is_identity:
                labels[a:b + 1] = 1
        return labels

    @classmethod
    def single(cls, n_lines: int, motion: RigidMotion | None = None) -> "SamplingSchedule":
        return cls(n_lines, [(0, n_lines - 1)], [motion or RigidMotion()])

    def to_json(self) -> list[dict]:
        return [
            {"lines": [a, b], "rotation_deg": m.rotation_deg, "tx_mm": m.tx_mm, "ty_mm": m.ty_mm}
            for (a, b), m in zip(self.segments, self.motions)
        ]

    @classmethod
    def from_json(cls, entries: list[dict]) -> "SamplingSchedule":
        segments = [tuple(e["lines"]) for e in entries]
        motions = [RigidMotion(e["rotation_deg"], e["tx_mm"], e["ty_mm"]) for e in entries]
        n_lines = segments[-1][1] + 1 if segments else 0
        return cls(n_lines, segments, motions)


def forward_model(image: ComplexImage, schedule: SamplingSchedule, noise_std: float = 0.0,
                  rng: np.random.Generator | None = None) -> KSpaceData:
    """Sum over time points of masked FFTs of the moved image (single coil)."""
    if schedule.n_lines != image.width:
        raise ValueError(f"schedule has {schedule.n_lines} lines, image has {image.width} columns")
    out = np.zeros((image.height, image.width), dtype=np.complex128)
    for (a, b), motion in zip(schedule.segments, schedule.motions):
        spectrum = fft2c(apply_rigid(image, motion).to_complex())
        out[:, a:b + 1] = spectrum[:, a:b + 1]
    if noise_std > 0:
        rng = rng or np.random.default_rng()
        out = out + noise_std * (rng.standard_normal(out.shape) + 1j * rng.standard_normal(out.shape))
    return KSpaceData.from_complex(out, image.data.dtype)


@dataclass
class MotionScenario:
    severity: str = "light"
    seed: int = 0
    n_movements_range: tuple[int, int] | None = None
    amplitude_range: tuple[float, float] = (-10.0, 10.0)
    reference: str = "central"
    min_segment: int = 2
    noise_std: float = 0.0

    RANGES = {"light": (6, 10), "heavy": (16, 20)}

    def __post_init__(self):
        if self.severity not in self.RANGES:
            raise ValueError(f"unknown severity {self.severity!r}; use 'light' or 'heavy'")
        if self.n_movements_range is None:
            self.n_movements_range = self.RANGES[self.severity]
        if self.reference not in ("central", "random"):
            raise ValueError("reference must be 'central' or 'random'")


def _random_segments(rng: np.random.Generator, n_lines: int, n_segments: int,
                     min_len: int) -> list[tuple[int, int]]:
    # stars and bars over the slack beyond the minimum length of each segment
    slack = n_lines - n_segments * min_len
    bars = np.sort(rng.choice(slack + n_segments - 1, size=n_segments - 1, replace=False))
    extra = np.diff(np.concatenate([[-1], bars, [slack + n_segments - 1]])) - 1
    lengths = extra + min_len
    ends = np.cumsum(lengths) - 1
    starts = ends - lengths + 1
    return [(int(a), int(b)) for a, b in zip(starts, ends)]


def simulate_motion(image: ComplexImage, scenario: MotionScenario
                    ) -> tuple[KSpaceData, SamplingSchedule, ComplexImage]:
    """Corrupt ``image`` with piecewise-constant rigid motion.

    Returns the corrupted k-space, the schedule that produced it and the
    untouched ground-truth image.
    """
    rng = np.random.default_rng(scenario.seed)
    lo, hi = scenario.n_movements_range
    n = int(rng.integers(lo, hi + 1))
    n_lines = image.width
    if n * scenario.min_segment > n_lines:
        raise ValueError(f"{n} movements of >= {scenario.min_segment} lines do not fit in {n_lines} lines")
    segments = _random_segments(rng, n_lines, n, scenario.min_segment)
    a_lo, a_hi = scenario.amplitude_range
    params = rng.uniform(a_lo, a_hi, size=(n, 3))
    if scenario.reference == "central":
        centre = n_lines // 2
        ref = next(t for t, (a, b) in enumerate(segments) if a <= centre <= b)
    else:
        ref = int(rng.integers(n))
    motions = [RigidMotion(0.0, 0.0, 0.0) if t == ref else RigidMotion(*map(float, p))
               for t, p in enumerate(params)]
    schedule = SamplingSchedule(n_lines, segments, motions)
    kspace = forward_model(image, schedule, scenario.noise_std, rng)
    return kspace, schedule, image


# Modified Shepp-Logan (Toft): intensity, semi-axes a, b, centre x0, y0, angle in degrees
_SHEPP_LOGAN = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
]


def phantom_coordinates(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates in [-1, 1]; y points up (row 0 is y = +1)."""
    y = np.linspace(1.0, -1.0, h)
    x = np.linspace(-1.0, 1.0, w)
    return np.meshgrid(x, y)


def _ellipse_mask(xx, yy, a, b, x0, y0, angle_deg):
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    u = (xx - x0) * c + (yy - y0) * s
    v = -(xx - x0) * s + (yy - y0) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_phantom(kind: str = "shepp_logan", h: int = 128, w: int = 128,
                     seed: int = 0) -> ComplexImage:
    """Real-valued phantom in [0, 1] with a zero imaginary channel."""
    if h < 32 or w < 32:
        raise ValueError(f"phantom size must be at least 32x32, got {h}x{w}")
    xx, yy = phantom_coordinates(h, w)
    img = np.zeros((h, w))
    if kind == "shepp_logan":
        for value, a, b, x0, y0, ang in _SHEPP_LOGAN:
            img[_ellipse_mask(xx, yy, a, b, x0, y0, ang)] += value
    elif kind == "random_ellipses":
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 13))
        # outer body first, then painted inclusions
        a, b = rng.uniform(0.6, 0.85, size=2)
        img[_ellipse_mask(xx, yy, a, b, 0.0, 0.0, rng.uniform(-30, 30))] = rng.uniform(0.5, 1.0)
        for _ in range(n - 1):
            r = rng.uniform(0, 0.5)
            phi = rng.uniform(0, 2 * np.pi)
            ea, eb = rng.uniform(0.05, 0.35, size=2)
            m = _ellipse_mask(xx, yy, ea, eb, r * np.cos(phi), r * np.sin(phi), rng.uniform(-90, 90))
            img[m] = rng.uniform(0.1, 1.0)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    return ComplexImage.from_real(np.clip(img, 0.0, 1.0))
