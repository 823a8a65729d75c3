"""Rectified stereo camera model and stereo-temporal projection.

The rig is two rectified cameras sharing focal length ``f`` and aspect ratio
``alpha``. Their principal points differ horizontally by ``d_min``, the
minimum disparity, which is why disparity is only *affine* in inverse depth:

    q = (d - d_min) / (f * b)

Translation between the frames at t and t+1 is expressed in units of the
stereo baseline (``t_tilde = t / b``) so the whole model is scale free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateProjection, NonPositiveScale
from .fields import MaskedField, PointMap

EPS_PROJ = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    alpha: float = 1.0
    cu: float = 0.0
    cv: float = 0.0
    d_min: float = 0.0

    def __post_init__(self):
        vals = (self.f, self.alpha, self.cu, self.cv, self.d_min)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"intrinsics must be finite, got {vals}")
        if self.f <= 0 or self.alpha <= 0:
            raise ValueError(f"f and alpha must be positive (f={self.f}, alpha={self.alpha})")


def _orthonormality_error(R: np.ndarray) -> float:
    return float(np.abs(R.T @ R - np.eye(3)).max())


@dataclass(frozen=True)
class RigMotion:
    """Rotation and baseline-normalised translation from frame t to t+1."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    t_tilde: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t_tilde, dtype=np.float64).reshape(3)
        if _orthonormality_error(R) > 1e-12 or abs(np.linalg.det(R) - 1.0) > 1e-12:
            raise ValueError("rotation must be orthonormal with det +1")
        if not np.isfinite(t).all():
            raise ValueError("t_tilde must be finite")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "t_tilde", t)

    @classmethod
    def from_rotvec(cls, rotvec, t_tilde) -> "RigMotion":
        return cls(rotvec_to_matrix(rotvec), t_tilde)


def rotvec_to_matrix(rotvec) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation, robust near zero."""
    return float(np.linalg.norm(Rotation.from_matrix(R).as_rotvec()))


def intrinsic_matrix(intr: CameraIntrinsics, side: str = "left") -> np.ndarray:
    if side == "left":
        cx = intr.cu + 0.5 * intr.d_min
    elif side == "right":
        cx = intr.cu - 0.5 * intr.d_min
    else:
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    return np.array(
        [
            [intr.f, 0.0, cx],
            [0.0, intr.alpha * intr.f, intr.cv],
            [0.0, 0.0, 1.0],
        ]
    )


def normalized_rays(intr: CameraIntrinsics, p, side: str = "left") -> np.ndarray:
    """K^-1 [u, v, 1] for pixels of shape (..., 2)."""
    p = np.asarray(p, dtype=np.float64)
    cx = intr.cu + (0.5 if side == "left" else -0.5) * intr.d_min
    x = (p[..., 0] - cx) / intr.f
    y = (p[..., 1] - intr.cv) / (intr.alpha * intr.f)
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def project_stereo_temporal(intr: CameraIntrinsics, motion: RigMotion, p, d) -> np.ndarray:
    """Map left-frame pixels at time t to the left frame at t+1.

    Args:
        intr: rig intrinsics.
        motion: rotation and baseline-normalised translation.
        p: pixel(s), shape (2,) or (..., 2).
        d: disparity at ``p`` in pixels, broadcastable to ``p[..., 0]``.

    Returns:
        Projected pixel(s) with the same leading shape as ``p``.

    Raises:
        DegenerateProjection: a mapped point lies on the camera plane
            (``|z| <= 1e-9``).
    """
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    rays = normalized_rays(intr, p)
    coeff = (d - intr.d_min) / intr.f
    X = rays @ motion.rotation.T + coeff[..., None] * motion.t_tilde
    z = X[..., 2]
    if np.any(np.abs(z) <= EPS_PROJ):
        raise DegenerateProjection("point maps onto the camera plane")
    cx = intr.cu + 0.5 * intr.d_min
    u = intr.f * X[..., 0] / z + cx
    v = intr.alpha * intr.f * X[..., 1] / z + intr.cv
    return np.stack([u, v], axis=-1)


def disparity_to_inverse_depth(d, intr: CameraIntrinsics, fb: float):
    """Convert disparity to inverse depth, ``q = (d - d_min) / fb``.

    ``d`` may be a plain array (NaN stays NaN) or a :class:`MaskedField`
    (the mask is carried over unchanged).
    """
    if not fb > 0:
        raise NonPositiveScale(f"focal-times-baseline must be positive, got {fb}")
    if isinstance(d, MaskedField):
        return MaskedField((d.values - intr.d_min) / fb, d.valid)
    return (np.asarray(d, dtype=np.float64) - intr.d_min) / fb


def backproject(q, intr: CameraIntrinsics, side: str = "left") -> PointMap:
    """Lift an inverse-depth grid to a 3D point map, ``P = K^-1 [u, v, 1] / q``.

    Pixels with ``q <= 0`` (or flagged invalid) come back invalid with zeroed
    coordinates.
    """
    if isinstance(q, MaskedField):
        values, valid = q.values, q.valid.copy()
    else:
        values = np.asarray(q, dtype=np.float64)
        valid = np.isfinite(values)
    h, w = values.shape
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    rays = normalized_rays(intr, np.stack([uu, vv], axis=-1), side)
    valid &= values > 0
    depth = np.where(valid, 1.0 / np.where(valid, values, 1.0), 0.0)
    return PointMap(rays * depth[..., None], valid)
