"""Grid containers shared by the loss, metric and pipeline modules.

Grids are row-major numpy arrays indexed ``[v, u]`` (row, column) with the
origin at the top-left pixel centre.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MaskedField:
    """A scalar grid with a validity mask of the same shape."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 2 or values.shape != valid.shape:
            raise ValueError(
                f"values {values.shape} and valid {valid.shape} must be matching 2D grids"
            )
        object.__setattr__(self, "values", values)
        # non-finite samples can never be valid
        object.__setattr__(self, "valid", valid & np.isfinite(values))

    @classmethod
    def from_array(cls, values) -> "MaskedField":
        """Wrap an array; every finite sample is considered valid."""
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.isfinite(values))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class PointMap:
    """Per-pixel 3D points, shape (H, W, 3), plus validity."""

    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if points.ndim != 3 or points.shape[2] != 3 or points.shape[:2] != valid.shape:
            raise ValueError("points must be (H, W, 3) with an (H, W) mask")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "valid", valid & np.isfinite(points).all(axis=2))

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


def as_masked(field) -> MaskedField:
    if isinstance(field, MaskedField):
        return field
    return MaskedField.from_array(field)
