"""Synthetic stereo-video scenes with exact flows, for tests and self-checks.

The scene is a box-shaped room (five planes) seen by a rectified rig, plus
an optional rectangular object that translates independently between t and
t+1. Every view is ray-cast, so flows carry genuine occlusions and the
forward-backward checks behave as they would on real data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationEstimate, Correspondences
from .geometry import CameraIntrinsics, RigMotion, intrinsic_matrix, project_stereo_temporal

VIEWS = ("left_t", "right_t", "left_t1", "right_t1")


@dataclass(frozen=True)
class Surface:
    normal: np.ndarray
    offset: float
    # rectangle bounds: origin + s*axis_u + r*axis_v, s in [0, len_u], r in [0, len_v]
    origin: np.ndarray | None = None
    axis_u: np.ndarray | None = None
    axis_v: np.ndarray | None = None
    len_u: float = 0.0
    len_v: float = 0.0
    moving: bool = False


def _room(width=6.5, floor=1.6, ceiling=-2.5, left=-3.0, back=10.0) -> list[Surface]:
    ex, ey, ez = np.eye(3)
    right = left + width
    return [
        Surface(ez, back),
        Surface(ey, floor),
        Surface(ey, ceiling),
        Surface(ex, left),
        Surface(ex, right),
    ]


def _object(center, size) -> Surface:
    ex, ey, ez = np.eye(3)
    cx, cy, cz = center
    w, h = size
    return Surface(
        ez, cz, origin=np.array([cx - w / 2, cy - h / 2, cz]), axis_u=ex, axis_v=ey, len_u=w, len_v=h, moving=True
    )


@dataclass
class SyntheticScene:
    """A rig, its motion and a set of surfaces; renders flows between views."""

    intr: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(110.0, 1.0, 63.5, 47.5, -3.0))
    motion: RigMotion = field(default_factory=lambda: RigMotion.from_rotvec([0.004, 0.03, 0.01], [0.5, 0.1, 1.2]))
    baseline: float = 0.4
    height: int = 96
    width: int = 128
    object_center: tuple[float, float, float] | None = (-0.2, 0.0, 4.5)
    object_size: tuple[float, float] = (2.0, 2.0)
    object_shift: tuple[float, float, float] = (0.25, 0.0, 0.0)

    def __post_init__(self):
        self.surfaces = _room()
        if self.object_center is not None:
            self.surfaces.append(_object(self.object_center, self.object_size))
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    # view transforms: X_view = M X_world + s (+ M m for moving points at t+1)
    def _transform(self, view: str, moving: bool) -> tuple[np.ndarray, np.ndarray]:
        b = self.baseline
        R = self.motion.rotation
        t = b * self.motion.t_tilde
        shift = -b * np.array([1.0, 0.0, 0.0]) if view.startswith("right") else np.zeros(3)
        if view.endswith("t1"):
            s = t + shift
            if moving:
                s = s + R @ np.asarray(self.object_shift, dtype=np.float64)
            return R, s
        return np.eye(3), shift

    def _K(self, view: str) -> np.ndarray:
        return intrinsic_matrix(self.intr, "left" if view.startswith("left") else "right")

    def render(self, view: str) -> tuple[np.ndarray, np.ndarray]:
        """World point (at time t) and moving flag seen by each pixel of ``view``."""
        if view in self._cache:
            return self._cache[view]
        h, w = self.height, self.width
        vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
        pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        rays = pix @ np.linalg.inv(self._K(view)).T
        best = np.full((h, w), np.inf)
        world = np.full((h, w, 3), np.nan)
        moving = np.zeros((h, w), dtype=bool)
        for surf in self.surfaces:
            M, s = self._transform(view, surf.moving)
            n = M @ surf.normal
            c = surf.offset + n @ s
            with np.errstate(divide="ignore", invalid="ignore"):
                lam = c / (rays @ n)
                X = (lam[..., None] * rays - s) @ M  # back to world frame, M orthonormal
            ok = np.isfinite(lam) & (lam > 1e-6)
            if surf.origin is not None:
                rel = X - surf.origin
                a = rel @ surf.axis_u
                bb = rel @ surf.axis_v
                ok &= (a >= 0) & (a <= surf.len_u) & (bb >= 0) & (bb <= surf.len_v)
            closer = ok & (lam < best)
            best[closer] = lam[closer]
            world[closer] = X[closer]
            moving[closer] = surf.moving
        self._cache[view] = (world, moving)
        return world, moving

    def project(self, world: np.ndarray, moving: np.ndarray, view: str) -> np.ndarray:
        """Pixel coordinates of world points in ``view`` (moving points displaced at t+1)."""
        out = np.empty(world.shape[:-1] + (2,))
        for flag in (False, True):
            M, s = self._transform(view, flag)
            sel = moving == flag
            Xv = world[sel] @ M.T + s
            ph = Xv @ self._K(view).T
            out[sel] = ph[:, :2] / ph[:, 2:3]
        return out

    def flow(self, src: str, dst: str) -> np.ndarray:
        world, moving = self.render(src)
        h, w = self.height, self.width
        vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
        return self.project(world, moving, dst) - np.stack([uu, vv], axis=-1)

    def depth(self, view: str = "left_t") -> np.ndarray:
        world, moving = self.render(view)
        M, s = self._transform(view, False)
        Xv = world @ M.T + s
        if view.endswith("t1"):
            Mo, so = self._transform(view, True)
            Xv[moving] = world[moving] @ Mo.T + so
        return Xv[..., 2]

    def luma(self, view: str = "left_t") -> np.ndarray:
        """Smooth texture in [0.1, 0.9], a function of the world point."""
        world, moving = self.render(view)
        tex = 0.5 + 0.2 * np.sin(3.1 * world[..., 0] + 1.7 * world[..., 2]) * np.cos(2.3 * world[..., 1])
        tex += np.where(moving, 0.2, 0.0)
        return np.clip(tex, 0.1, 0.9)

    def bundle(self):
        from .pipeline import FlowBundle

        pairs = {
            "stereo_t": ("left_t", "right_t"),
            "stereo_t1": ("left_t1", "right_t1"),
            "temporal_l": ("left_t", "left_t1"),
            "temporal_r": ("right_t", "right_t1"),
            "cross": ("left_t", "right_t1"),
        }
        kwargs = {}
        for name, (a, b) in pairs.items():
            kwargs[name] = self.flow(a, b)
            kwargs[name + "_rev"] = self.flow(b, a)
        return FlowBundle(**kwargs)

    def truth(self) -> CalibrationEstimate:
        return CalibrationEstimate(self.intr, self.motion)


def random_rig_correspondences(
    n: int = 200,
    seed: int = 0,
    intr: CameraIntrinsics | None = None,
    motion: RigMotion | None = None,
    size: tuple[int, int] = (480, 640),
    depth_range: tuple[float, float] = (2.0, 20.0),
    baseline: float = 0.5,
) -> tuple[Correspondences, CalibrationEstimate, np.ndarray]:
    """Noiseless matches of random scene points under a known rig.

    Returns the correspondences, the true calibration and the per-match
    depths (useful for the scale-gauge check).
    """
    rng = np.random.default_rng(seed)
    h, w = size
    if intr is None:
        intr = CameraIntrinsics(500.0, 1.0, w / 2, h / 2, -4.0)
    if motion is None:
        axis = rng.normal(size=3)
        motion = RigMotion.from_rotvec(0.05 * axis / np.linalg.norm(axis), [0.3, 0.1, 0.9])
    p = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
    Z = rng.uniform(*depth_range, n)
    d = intr.d_min + intr.f * baseline / Z
    p1 = project_stereo_temporal(intr, motion, p, d)
    return Correspondences(p, p1, d), CalibrationEstimate(intr, motion), Z


def perturb_estimate(est: CalibrationEstimate, frac: float = 0.05) -> CalibrationEstimate:
    """Scale f, d_min, the rotation vector and t_tilde by ``1 + frac``."""
    from dataclasses import replace

    from scipy.spatial.transform import Rotation

    i = est.intr
    rv = Rotation.from_matrix(est.motion.rotation).as_rotvec()
    return CalibrationEstimate(
        replace(i, f=i.f * (1 + frac), d_min=i.d_min * (1 + frac)),
        RigMotion.from_rotvec(rv * (1 + frac), est.motion.t_tilde * (1 + frac)),
    )


def rigid_scene_matches(n: int = 100, seed: int = 0, size=(480, 640)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Two-view matches of a general 3D point cloud; returns ``(x1, x2, F_true)``."""
    rng = np.random.default_rng(seed)
    h, w = size
    f = rng.uniform(400, 800)
    K = np.array([[f, 0, w / 2], [0, f, h / 2], [0, 0, 1.0]])
    axis = rng.normal(size=3)
    from .geometry import rotvec_to_matrix

    R = rotvec_to_matrix(0.1 * axis / np.linalg.norm(axis))
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    X = np.column_stack([rng.uniform(-3, 3, n), rng.uniform(-2, 2, n), rng.uniform(4, 12, n)])
    x1h = X @ K.T
    X2 = X @ R.T + t
    x2h = X2 @ K.T
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    Kinv = np.linalg.inv(K)
    F = Kinv.T @ tx @ R @ Kinv
    return x1h[:, :2] / x1h[:, 2:], x2h[:, :2] / x2h[:, 2:], F / np.linalg.norm(F)
