"""Self-calibration of a rectified stereo rig from stereo-temporal matches.

Pipeline pieces:

* normalised 8-point fundamental-matrix fit and a seeded RANSAC around it,
  used to keep only background (rigidly moving) matches;
* damped Gauss-Newton bundle adjustment of ``(f, d_min, R, t_tilde)``
  against the reprojection error, with SSD or Huber robustification (IRLS);
* static / moving labelling by thresholding the reprojection error.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegenerateProjection,
    NoConsensus,
    NonFiniteResidual,
    SingularNormalEquations,
)
from .geometry import (
    EPS_PROJ,
    CameraIntrinsics,
    RigMotion,
    nearest_rotation,
    normalized_rays,
    project_stereo_temporal,
    rotvec_to_matrix,
)

log = logging.getLogger(__name__)

PARAM_NAMES = ("f", "d_min", "w0", "w1", "w2", "t0", "t1", "t2")


@dataclass(frozen=True)
class Correspondences:
    """Matches from the left image at t to the left image at t+1.

    Attributes:
        p_t: (N, 2) pixels in the left frame at t.
        p_t1: (N, 2) matching pixels in the left frame at t+1.
        d: (N,) disparity at ``p_t``.
        weight: (N,) non-negative per-match weights.
    """

    p_t: np.ndarray
    p_t1: np.ndarray
    d: np.ndarray
    weight: np.ndarray = None

    def __post_init__(self):
        p_t = np.asarray(self.p_t, dtype=np.float64).reshape(-1, 2)
        p_t1 = np.asarray(self.p_t1, dtype=np.float64).reshape(-1, 2)
        d = np.asarray(self.d, dtype=np.float64).reshape(-1)
        n = len(p_t)
        weight = np.ones(n) if self.weight is None else np.asarray(self.weight, dtype=np.float64).reshape(-1)
        if not (len(p_t1) == len(d) == len(weight) == n):
            raise ValueError("correspondence arrays must have equal length")
        if not (np.isfinite(p_t).all() and np.isfinite(p_t1).all() and np.isfinite(d).all()):
            raise ValueError("correspondences must be finite")
        if (weight < 0).any() or not np.isfinite(weight).all():
            raise ValueError("weights must be finite and non-negative")
        for name, val in (("p_t", p_t), ("p_t1", p_t1), ("d", d), ("weight", weight)):
            object.__setattr__(self, name, val)

    def __len__(self) -> int:
        return len(self.d)

    def subset(self, index) -> "Correspondences":
        return Correspondences(self.p_t[index], self.p_t1[index], self.d[index], self.weight[index])


@dataclass(frozen=True)
class RobustLossConfig:
    """Per-match cost on the residual norm.

    With ``kind="huber"`` and ``reject_factor`` set, a converged solve is
    followed by up to ``reject_rounds`` re-solves in which matches whose
    residual exceeds ``reject_factor * huber_delta`` get zero weight. Huber
    alone bounds, but does not remove, the pull of gross outliers.
    """

    kind: str = "huber"
    huber_delta: float = 1.0
    reject_factor: float | None = 3.0
    reject_rounds: int = 3

    def __post_init__(self):
        if self.kind not in ("ssd", "huber"):
            raise ValueError(f"unknown robust loss {self.kind!r}")
        if self.kind == "huber" and not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        if self.reject_factor is not None and not self.reject_factor > 0:
            raise ValueError("reject_factor must be positive or None")

    def rho(self, s: np.ndarray) -> np.ndarray:
        """Cost of a residual norm ``s``."""
        if self.kind == "ssd":
            return 0.5 * s * s
        delta = self.huber_delta
        return np.where(s <= delta, 0.5 * s * s, delta * (s - 0.5 * delta))

    def irls_weight(self, s: np.ndarray) -> np.ndarray:
        """rho'(s) / s."""
        if self.kind == "ssd":
            return np.ones_like(s)
        return np.where(s <= self.huber_delta, 1.0, self.huber_delta / np.maximum(s, 1e-300))


@dataclass(frozen=True)
class SolverOptions:
    tol_g: float = 1e-10
    tol_x: float = 1e-12
    max_iters: int = 100
    lambda_init: float = 1e-4
    lambda_max: float = 1e16
    flat_cond: float = 1e12


@dataclass(frozen=True)
class CalibrationEstimate:
    intr: CameraIntrinsics
    motion: RigMotion = field(default_factory=RigMotion)
    residual_rms: float = 0.0
    iterations: int = 0
    converged: bool = False
    diagnostics: tuple[str, ...] = ()
    history: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        i = self.intr
        return {
            "f": i.f,
            "alpha": i.alpha,
            "cu": i.cu,
            "cv": i.cv,
            "d_min": i.d_min,
            "rotation": self.motion.rotation.tolist(),
            "t_tilde": self.motion.t_tilde.tolist(),
            "residual_rms": self.residual_rms,
            "iterations": self.iterations,
            "converged": self.converged,
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibrationEstimate":
        intr = CameraIntrinsics(doc["f"], doc.get("alpha", 1.0), doc.get("cu", 0.0), doc.get("cv", 0.0), doc.get("d_min", 0.0))
        motion = RigMotion(nearest_rotation(np.asarray(doc["rotation"], dtype=np.float64)), doc["t_tilde"])
        return cls(
            intr,
            motion,
            float(doc.get("residual_rms", 0.0)),
            int(doc.get("iterations", 0)),
            bool(doc.get("converged", False)),
            tuple(doc.get("diagnostics", ())),
        )


class MotionLabel(enum.IntEnum):
    STATIC = 0
    MOVING = 1
    UNDEFINED = 2


# --------------------------------------------------------------------------
# epipolar geometry
# --------------------------------------------------------------------------

def _hartley_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    dist = np.sqrt(((x - mean) ** 2).sum(axis=1)).mean()
    if not dist > 1e-12:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / dist
    T = np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])
    xh = np.column_stack([x, np.ones(len(x))]) @ T.T
    return xh, T


def eight_point(x1, x2) -> np.ndarray:
    """Normalised 8-point estimate of F with ``x2^T F x1 = 0``.

    The result has unit Frobenius norm and rank 2.
    """
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    if len(x1) < 8 or len(x1) != len(x2):
        raise ValueError(f"need at least 8 matched points, got {len(x1)}")
    a, T1 = _hartley_normalize(x1)
    b, T2 = _hartley_normalize(x2)
    A = (b[:, :, None] * a[:, None, :]).reshape(-1, 9)
    _, sv, Vt = np.linalg.svd(A, full_matrices=len(A) < 9)
    rank = int((sv > 1e-10 * sv[0]).sum())
    if rank < 8:
        raise DegenerateConfiguration(f"design matrix has rank {rank}")
    F = Vt[-1].reshape(3, 3)
    U, S, Vt = np.linalg.svd(F)
    F = U @ np.diag([S[0], S[1], 0.0]) @ Vt
    F = T2.T @ F @ T1
    return F / np.linalg.norm(F)


def epipolar_residual(F, x1, x2) -> np.ndarray:
    """Algebraic residual ``x2^T F x1`` per match."""
    a = np.column_stack([x1, np.ones(len(x1))])
    b = np.column_stack([x2, np.ones(len(x2))])
    return np.einsum("ni,ij,nj->n", b, F, a)


def sampson_distance(F, x1, x2) -> np.ndarray:
    """First-order geometric epipolar error in pixels."""
    a = np.column_stack([x1, np.ones(len(x1))])
    b = np.column_stack([x2, np.ones(len(x2))])
    Fa = a @ F.T
    Ftb = b @ F
    num = np.einsum("ni,ni->n", b, Fa)
    den = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def ransac_background(
    corr: Correspondences,
    max_iters: int = 2000,
    inlier_thresh: float = 1.0,
    rng_seed: int = 0,
    confidence: float = 0.9999,
) -> tuple[np.ndarray, np.ndarray]:
    """Largest-consensus fundamental matrix over random 8-subsets.

    Returns the boolean inlier mask of the best hypothesis and F refit on
    those inliers. The number of hypotheses adapts to the inlier ratio seen
    so far (stopping at ``confidence``) but never exceeds ``max_iters``.
    """
    n = len(corr)
    if n < 8:
        raise ValueError(f"need at least 8 matches, got {n}")
    if not inlier_thresh > 0:
        raise ValueError("inlier_thresh must be positive")
    x1, x2 = corr.p_t, corr.p_t1
    rng = np.random.default_rng(rng_seed)
    best = np.zeros(n, dtype=bool)
    best_count = 0
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        sample = rng.choice(n, 8, replace=False)
        try:
            F = eight_point(x1[sample], x2[sample])
        except DegenerateConfiguration:
            continue
        inl = sampson_distance(F, x1, x2) <= inlier_thresh
        count = int(inl.sum())
        if count > best_count:
            best, best_count = inl, count
            ratio = count / n
            if ratio >= 1.0:
                needed = it
            else:
                needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - ratio**8))) if ratio > 0 else max_iters
    if best_count < 8:
        raise NoConsensus(f"best hypothesis has only {best_count} inliers")
    log.debug("ransac: %d/%d inliers after %d hypotheses", best_count, n, it)
    return best, eight_point(x1[best], x2[best])


# --------------------------------------------------------------------------
# bundle adjustment
# --------------------------------------------------------------------------

def reprojection_residual(corr: Correspondences, est: CalibrationEstimate) -> np.ndarray:
    """Predicted minus observed pixel at t+1, shape (N, 2)."""
    return project_stereo_temporal(est.intr, est.motion, corr.p_t, corr.d) - corr.p_t1


def projection_jacobian(corr: Correspondences, est: CalibrationEstimate) -> tuple[np.ndarray, np.ndarray]:
    """Residuals (N, 2) and their Jacobian (N, 2, 8).

    Parameter order is ``f, d_min, omega (3), t_tilde (3)`` where ``omega``
    is a left-multiplied rotation increment ``R <- exp([omega]x) R`` taken at
    zero.
    """
    intr, R, tt = est.intr, est.motion.rotation, est.motion.t_tilde
    f, a = intr.f, intr.alpha
    x = normalized_rays(intr, corr.p_t)
    c = (corr.d - intr.d_min) / f
    Rx = x @ R.T
    X = Rx + c[:, None] * tt
    z = X[:, 2]
    if np.any(np.abs(z) <= EPS_PROJ):
        raise DegenerateProjection("point maps onto the camera plane")
    y0, y1 = X[:, 0] / z, X[:, 1] / z
    cx = intr.cu + 0.5 * intr.d_min
    pred = np.column_stack([f * y0 + cx, a * f * y1 + intr.cv])
    resid = pred - corr.p_t1

    n = len(corr)
    # dX/dtheta, (N, 3, 8)
    dX = np.zeros((n, 3, 8))
    dx_df = np.column_stack([-x[:, 0] / f, -x[:, 1] / f, np.zeros(n)])
    dX[:, :, 0] = dx_df @ R.T - (c / f)[:, None] * tt
    dX[:, :, 1] = np.outer(np.full(n, -0.5 / f), R[:, 0]) - (1.0 / f) * tt
    # d(exp(w) R x)/dw at 0 = -[R x]_x
    Rx0, Rx1, Rx2 = Rx[:, 0], Rx[:, 1], Rx[:, 2]
    zero = np.zeros(n)
    dX[:, :, 2:5] = -np.stack(
        [
            np.stack([zero, -Rx2, Rx1], axis=1),
            np.stack([Rx2, zero, -Rx0], axis=1),
            np.stack([-Rx1, Rx0, zero], axis=1),
        ],
        axis=1,
    )
    dX[:, :, 5:8] = c[:, None, None] * np.eye(3)

    # dy/dX, (N, 2, 3)
    dy = np.zeros((n, 2, 3))
    dy[:, 0, 0] = 1.0 / z
    dy[:, 0, 2] = -y0 / z
    dy[:, 1, 1] = 1.0 / z
    dy[:, 1, 2] = -y1 / z
    J = np.einsum("nij,njk->nik", dy, dX)
    J[:, 0, :] *= f
    J[:, 1, :] *= a * f
    J[:, 0, 0] += y0
    J[:, 1, 0] += a * y1
    J[:, 0, 1] += 0.5
    return resid, J


def _apply_update(est: CalibrationEstimate, delta: np.ndarray) -> CalibrationEstimate:
    i = est.intr
    intr = replace(i, f=i.f + delta[0], d_min=i.d_min + delta[1])
    R = nearest_rotation(rotvec_to_matrix(delta[2:5]) @ est.motion.rotation)
    return replace(est, intr=intr, motion=RigMotion(R, est.motion.t_tilde + delta[5:8]))


def _objective(corr, est, robust) -> tuple[float, np.ndarray]:
    r = reprojection_residual(corr, est)
    if not np.isfinite(r).all():
        raise NonFiniteResidual("reprojection residual is not finite")
    s = np.linalg.norm(r, axis=1)
    return float(corr.weight @ robust.rho(s)), r


def _skew(v: np.ndarray) -> np.ndarray:
    """Stacked cross-product matrices for (N, 3) vectors."""
    z = np.zeros(len(v))
    return np.stack(
        [
            np.stack([z, -v[:, 2], v[:, 1]], axis=1),
            np.stack([v[:, 2], z, -v[:, 0]], axis=1),
            np.stack([-v[:, 1], v[:, 0], z], axis=1),
        ],
        axis=1,
    )


def initial_motion(corr: Correspondences, intr: CameraIntrinsics, rounds: int = 5) -> RigMotion:
    """Linear estimate of ``R`` and ``t_tilde`` with the intrinsics held fixed.

    The observed ray ``y`` at t+1 must be parallel to ``R x + c t_tilde``, so
    ``y x (R x + c t_tilde) = 0``. Linearising ``R <- exp([w]x) R`` makes this
    linear in ``(w, t_tilde)``; a few re-linearisations settle the rotation.
    Weighted by the correspondence weights, least squares over all matches.
    """
    if len(corr) < 3:
        raise ValueError(f"need at least 3 correspondences, got {len(corr)}")
    x = normalized_rays(intr, corr.p_t)
    y = normalized_rays(intr, corr.p_t1)
    c = (corr.d - intr.d_min) / intr.f
    sw = np.sqrt(corr.weight)[:, None]
    Y = _skew(y)
    R = np.eye(3)
    tt = np.zeros(3)
    for _ in range(rounds):
        Rx = x @ R.T
        A = np.concatenate([-Y @ _skew(Rx), c[:, None, None] * Y], axis=2)
        b = -np.einsum("nij,nj->ni", Y, Rx)
        A = (A * sw[:, :, None]).reshape(-1, 6)
        b = (b * sw).reshape(-1)
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        if not np.all(np.isfinite(sol)):
            raise SingularNormalEquations("linear motion estimate is not finite")
        R = nearest_rotation(rotvec_to_matrix(sol[:3]) @ R)
        tt = sol[3:]
    if not np.linalg.norm(tt) > 0:
        tt = np.array([0.0, 0.0, 1e-3])
    return RigMotion(R, tt)


def bundle_adjust(
    corr: Correspondences,
    init: CalibrationEstimate,
    robust: RobustLossConfig = RobustLossConfig(),
    opts: SolverOptions = SolverOptions(),
) -> CalibrationEstimate:
    """Refine ``f``, ``d_min``, ``R`` and ``t_tilde`` by damped Gauss-Newton.

    Each iteration linearises the projection, reweights residuals for the
    robust loss (IRLS) and solves Marquardt-damped normal equations. A step
    is accepted only if the robust objective does not increase; otherwise
    damping grows tenfold. ``alpha``, ``cu`` and ``cv`` are held fixed.

    Raises:
        SingularNormalEquations: the damped system could not be solved.
        NonFiniteResidual: a residual became NaN/inf.
    """
    if len(corr) < 4:
        raise ValueError(f"need at least 4 correspondences, got {len(corr)}")
    if not init.intr.f > 0:
        raise ValueError("initial focal length must be positive")

    est = _solve(corr, init, robust, opts)
    if robust.kind != "huber" or robust.reject_factor is None:
        return est
    limit = robust.reject_factor * robust.huber_delta
    keep = np.ones(len(corr), dtype=bool)
    total_iters = est.iterations
    for _ in range(robust.reject_rounds):
        err = np.linalg.norm(reprojection_residual(corr, est), axis=1)
        new_keep = err <= limit
        if (new_keep == keep).all() or new_keep.sum() < 4:
            break
        keep = new_keep
        log.debug("bundle_adjust: re-solving without %d matches", int((~keep).sum()))
        trimmed = Correspondences(corr.p_t, corr.p_t1, corr.d, np.where(keep, corr.weight, 0.0))
        est = _solve(trimmed, est, robust, opts)
        total_iters += est.iterations
    return replace(est, iterations=total_iters)


def _solve(corr, init, robust, opts) -> CalibrationEstimate:
    est = init
    cost, r = _objective(corr, est, robust)
    history = [cost]
    lam = opts.lambda_init
    converged = False
    diagnostics: list[str] = []
    it = 0
    while it < opts.max_iters:
        it += 1
        r, J = projection_jacobian(corr, est)
        s = np.linalg.norm(r, axis=1)
        w = corr.weight * robust.irls_weight(s)
        Jf = J.reshape(-1, 8)
        rf = r.reshape(-1)
        wf = np.repeat(w, 2)
        H = Jf.T @ (wf[:, None] * Jf)
        g = Jf.T @ (wf * rf)
        if np.abs(g).max() < opts.tol_g:
            converged = True
            it -= 1
            break
        diag = np.maximum(np.diag(H), 1e-300)
        step_small = False
        while lam <= opts.lambda_max:
            try:
                delta = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is None or not np.isfinite(delta).all():
                lam *= 10.0
                continue
            step_small = np.linalg.norm(delta) <= opts.tol_x * (np.linalg.norm(_params(est)) + opts.tol_x)
            try:
                trial = _apply_update(est, delta)
                new_cost, _ = _objective(corr, trial, robust)
            except (DegenerateProjection, ValueError):
                new_cost = np.inf
            if new_cost <= cost:
                est, cost = trial, new_cost
                history.append(cost)
                lam = max(lam / 10.0, 1e-12)
                break
            if step_small:
                break
            lam *= 10.0
        else:
            raise SingularNormalEquations("damping escalation exhausted")
        if step_small:
            converged = True
            break

    r, J = projection_jacobian(corr, est)
    Jf = J.reshape(-1, 8)
    col = np.linalg.norm(Jf, axis=0)
    if np.linalg.cond(Jf / np.maximum(col, 1e-300)) ** 2 > opts.flat_cond:
        diagnostics.append("FlatDirections")
        converged = False
    used = corr.weight > 0
    rms = float(np.sqrt(np.mean(np.sum(r[used] ** 2, axis=1)))) if used.any() else 0.0
    return replace(
        est,
        residual_rms=rms,
        iterations=it,
        converged=converged,
        diagnostics=tuple(diagnostics),
        history=tuple(history),
    )


def _params(est: CalibrationEstimate) -> np.ndarray:
    return np.concatenate([[est.intr.f, est.intr.d_min], np.zeros(3), est.motion.t_tilde])


# --------------------------------------------------------------------------
# labelling and diagnostics
# --------------------------------------------------------------------------

def label_motion(corr: Correspondences, est: CalibrationEstimate, tau_motion: float = 1.0) -> np.ndarray:
    """Per-match :class:`MotionLabel` codes (int8)."""
    if not tau_motion > 0:
        raise ValueError("tau_motion must be positive")
    intr, motion = est.intr, est.motion
    x = normalized_rays(intr, corr.p_t)
    X = x @ motion.rotation.T + ((corr.d - intr.d_min) / intr.f)[:, None] * motion.t_tilde
    degenerate = np.abs(X[:, 2]) <= EPS_PROJ
    labels = np.full(len(corr), MotionLabel.UNDEFINED, dtype=np.int8)
    ok = ~degenerate
    if ok.any():
        err = np.linalg.norm(reprojection_residual(corr.subset(ok), est), axis=1)
        labels[ok] = np.where(err > tau_motion, MotionLabel.MOVING, MotionLabel.STATIC)
    return labels


def jacobian_check(corr: Correspondences, est: CalibrationEstimate, h: float = 1e-6) -> float:
    """Largest relative gap between analytic and central-difference Jacobians.

    The finite differences re-evaluate the projection chain in extended
    precision; in float64 the ~1e-13 px rounding of absolute pixel
    coordinates divided by ``2h`` would swamp small derivative entries.
    """
    _, J = projection_jacobian(corr, est)
    worst = 0.0
    for k in range(8):
        delta = np.zeros(8, dtype=np.longdouble)
        delta[k] = h
        num = (_residual_ld(corr, est, delta) - _residual_ld(corr, est, -delta)) / (2 * np.longdouble(h))
        num = num.astype(np.float64)
        rel = np.abs(J[:, :, k] - num) / (np.abs(num) + 1e-8)
        worst = max(worst, float(rel.max()))
    return worst


def _rodrigues_ld(w: np.ndarray) -> np.ndarray:
    theta = np.sqrt((w * w).sum())
    K = np.array(
        [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]],
        dtype=np.longdouble,
    )
    if theta == 0:
        return np.eye(3, dtype=np.longdouble)
    return np.eye(3, dtype=np.longdouble) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * (K @ K)


def _residual_ld(corr: Correspondences, est: CalibrationEstimate, delta: np.ndarray) -> np.ndarray:
    ld = np.longdouble
    i = est.intr
    f = ld(i.f) + delta[0]
    d_min = ld(i.d_min) + delta[1]
    R = _rodrigues_ld(delta[2:5]) @ est.motion.rotation.astype(ld)
    tt = est.motion.t_tilde.astype(ld) + delta[5:8]
    cx = ld(i.cu) + d_min / 2
    pt = corr.p_t.astype(ld)
    x = np.stack([(pt[:, 0] - cx) / f, (pt[:, 1] - ld(i.cv)) / (ld(i.alpha) * f), np.ones(len(pt), dtype=ld)], axis=1)
    X = x @ R.T + ((corr.d.astype(ld) - d_min) / f)[:, None] * tt
    u = f * X[:, 0] / X[:, 2] + cx
    v = ld(i.alpha) * f * X[:, 1] / X[:, 2] + ld(i.cv)
    return np.stack([u, v], axis=1) - corr.p_t1.astype(ld)
