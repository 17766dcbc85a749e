"""Per-line corruption masks and their partition into movement groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MovementGroups:
    """Contiguous runs of corrupted lines, one per movement.

    Lines outside every group form the motion-free reference.
    """

    n_lines: int
    groups: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        self.groups = [[int(i) for i in g] for g in self.groups]
        seen = np.zeros(self.n_lines, dtype=bool)
        last = -1
        for g in self.groups:
            if not g:
                raise ValueError("movement groups must be non-empty")
            if g != list(range(g[0], g[-1] + 1)):
                raise ValueError(f"group {g} is not a contiguous run")
            if g[0] <= last:
                raise ValueError("groups must be sorted and disjoint")
            if g[0] < 0 or g[-1] >= self.n_lines:
                raise ValueError(f"group {g} out of range for {self.n_lines} lines")
            seen[g[0]:g[-1] + 1] = True
            last = g[-1]
        self._reference = np.flatnonzero(~seen).tolist()

    @property
    def n_movements(self) -> int:
        return len(self.groups)

    @property
    def reference_lines(self) -> list[int]:
        return list(self._reference)

    def masks(self) -> np.ndarray:
        """Boolean [n_movements, n_lines] line masks."""
        m = np.zeros((self.n_movements, self.n_lines), dtype=bool)
        for t, g in enumerate(self.groups):
            m[t, g] = True
        return m

    def reference_mask(self) -> np.ndarray:
        m = np.zeros(self.n_lines, dtype=bool)
        m[self._reference] = True
        return m

    def as_lists(self) -> list[list[int]]:
        """One-hot rows, one list of length ``n_lines`` per movement."""
        return self.masks().astype(int).tolist()


def group_movements(line_mask) -> MovementGroups:
    """Split a per-line 0/1 vector into maximal runs of ones."""
    lines = np.asarray(line_mask).astype(bool).ravel()
    groups = []
    start = None
    for j, flagged in enumerate(lines):
        if flagged and start is None:
            start = j
        elif not flagged and start is not None:
            groups.append(list(range(start, j)))
            start = None
    if start is not None:
        groups.append(list(range(start, len(lines))))
    return MovementGroups(len(lines), groups)


def groups_from_schedule(schedule) -> MovementGroups:
    """Oracle grouping: every non-identity segment of a schedule is one movement."""
    groups = [list(range(a, b + 1)) for (a, b), m in zip(schedule.segments, schedule.motions)
              if not m.is_identity]
    return MovementGroups(schedule.n_lines, groups)


def mask_to_lines(logits, pixel_threshold: float = 0.5, line_fraction: float = 0.2) -> np.ndarray:
    """Flag lines (columns) whose share of positive pixels reaches ``line_fraction``.

    A pixel is positive when ``sigmoid(logit) > pixel_threshold``. The line
    rule is inclusive: exactly ``line_fraction * n_freq`` positives flag it.
    """
    z = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"logits must be [n_freq, n_phase], got {z.shape}")
    with np.errstate(over="ignore"):
        prob = 1.0 / (1.0 + np.exp(-z))
    counts = (prob > pixel_threshold).sum(axis=0)
    # tolerance keeps e.g. 0.2 * 100 = 20.000000000000004 from rejecting 20 positives
    return (counts >= line_fraction * z.shape[0] - 1e-9).astype(np.uint8)
