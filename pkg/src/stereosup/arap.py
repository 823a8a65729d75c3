"""As-rigid-as-possible (ARAP) rigidity losses.

Pixel-wise ARAP gives every pixel its own best-fit rigid motion over an
edge-aware neighbourhood. Allowing reflections lets the optimum be written
without solving for the motion:

    min_M L_i = sum w o |p~|^2 - 2 || sum w o p~ p~'^T ||_tr + sum w o |p~'|^2

where p~ and p~' are the neighbourhood points centred on their weighted
centroids. Neighbourhood weights come from a guided filter, so every term is
a filtered product of point coordinates and costs O(1) per pixel.

The cluster-wise variant (rigid clusters glued by anchor terms) is provided
for evaluation only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateCluster, EmptySupport
from .fields import PointMap

EPS_SUPPORT = 1e-6


@dataclass(frozen=True)
class GuidedFilterConfig:
    radius: int = 8
    eps: float = 1e-2

    def __post_init__(self):
        if int(self.radius) != self.radius or self.radius < 1:
            raise ValueError(f"radius must be an integer >= 1, got {self.radius}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


@dataclass(frozen=True)
class ClusterGraph:
    """Rigid clusters over a point map.

    Attributes:
        assignment: (H, W) int array of cluster ids in ``[0, K)``.
        anchors: (K, 3) anchor point per cluster.
        edges: (E, 2) int array of neighbouring cluster pairs.
        motions: (K, 3, 4) rigid motion ``[R | t]`` per cluster.
    """

    assignment: np.ndarray
    anchors: np.ndarray
    edges: np.ndarray
    motions: np.ndarray

    def __post_init__(self):
        assignment = np.asarray(self.assignment, dtype=np.int64)
        anchors = np.asarray(self.anchors, dtype=np.float64).reshape(-1, 3)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        motions = np.asarray(self.motions, dtype=np.float64).reshape(-1, 3, 4)
        k = len(anchors)
        if len(motions) != k:
            raise ValueError("one motion per anchor required")
        if assignment.size and (assignment.min() < 0 or assignment.max() >= k):
            raise ValueError("assignment references a missing cluster")
        if edges.size and (edges.min() < 0 or edges.max() >= k):
            raise ValueError("edge references a missing cluster")
        for name, val in (("assignment", assignment), ("anchors", anchors), ("edges", edges), ("motions", motions)):
            object.__setattr__(self, name, val)


# --------------------------------------------------------------------------
# local closed form
# --------------------------------------------------------------------------

def trace_norm(M) -> float:
    """Nuclear norm: the sum of singular values."""
    return float(np.linalg.svd(np.asarray(M, dtype=np.float64), compute_uv=False).sum())


def _support(p, p_prime, w, o):
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    p_prime = np.asarray(p_prime, dtype=np.float64).reshape(-1, 3)
    wo = np.asarray(w, dtype=np.float64).ravel() * np.asarray(o, dtype=np.float64).ravel()
    if not (len(p) == len(p_prime) == len(wo)):
        raise ValueError("p, p_prime, w and o must have the same length")
    keep = wo != 0
    wo, p, p_prime = wo[keep], p[keep], p_prime[keep]
    total = wo.sum()
    if not total > 0:
        raise EmptySupport("no weighted, unoccluded support")
    p_c = p - (wo @ p) / total
    pp_c = p_prime - (wo @ p_prime) / total
    return wo, p_c, pp_c


def arap_local_closed(p, p_prime, w, o) -> float:
    """Minimum local rigidity cost via the trace-norm identity.

    Points with ``w * o == 0`` are dropped before anything else, so their
    coordinates cannot influence the result.
    """
    wo, p_c, pp_c = _support(p, p_prime, w, o)
    cross = (p_c * wo[:, None]).T @ pp_c
    return float(
        wo @ np.einsum("ij,ij->i", p_c, p_c)
        - 2.0 * trace_norm(cross)
        + wo @ np.einsum("ij,ij->i", pp_c, pp_c)
    )


def arap_local_bruteforce(p, p_prime, w, o) -> float:
    """Same minimum, found by solving for the best orthogonal motion explicitly.

    Weighted Procrustes: with ``C = sum w o p~ p~'^T = U S V^T`` the optimal
    orthogonal map (reflection allowed) is ``Q = V U^T``; the residual is
    then summed point by point.
    """
    wo, p_c, pp_c = _support(p, p_prime, w, o)
    U, _, Vt = np.linalg.svd((p_c * wo[:, None]).T @ pp_c)
    Q = Vt.T @ U.T
    resid = p_c @ Q.T - pp_c
    return float(wo @ np.einsum("ij,ij->i", resid, resid))


# --------------------------------------------------------------------------
# guided filter
# --------------------------------------------------------------------------

def _box_sum(x: np.ndarray, r: int) -> np.ndarray:
    """Sum over a (2r+1)^2 window clipped at the borders, axes 0 and 1."""
    out = x.astype(np.longdouble)
    for axis in (0, 1):
        n = out.shape[axis]
        pad = [(0, 0)] * out.ndim
        pad[axis] = (1, 0)
        c = np.cumsum(np.pad(out, pad), axis=axis)
        idx = np.arange(n)
        hi = np.minimum(idx + r + 1, n)
        lo = np.maximum(idx - r, 0)
        out = np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)
    return out.astype(np.float64)


class GuidedFilter:
    """Guided filter with a fixed guidance image, reusable across inputs.

    The guidance may be (H, W) or (H, W, 3). Inputs may carry extra trailing
    channels; each channel is filtered independently with the same kernel.
    """

    def __init__(self, guidance, cfg: GuidedFilterConfig = GuidedFilterConfig()):
        I = np.asarray(guidance, dtype=np.float64)
        self.color = I.ndim == 3
        if self.color and I.shape[2] == 1:
            I, self.color = I[..., 0], False
        if not (I.ndim == 2 or (I.ndim == 3 and I.shape[2] == 3)):
            raise ValueError(f"guidance must be (H, W) or (H, W, 3), got {I.shape}")
        self.cfg = cfg
        self.I = I
        self.shape = I.shape[:2]
        r = cfg.radius
        self.count = _box_sum(np.ones(self.shape), r)
        if self.color:
            self.mean_I = _box_sum(I, r) / self.count[..., None]
            corr = _box_sum(I[..., :, None] * I[..., None, :], r) / self.count[..., None, None]
            cov = corr - self.mean_I[..., :, None] * self.mean_I[..., None, :]
            self.inv_cov = np.linalg.inv(cov + cfg.eps * np.eye(3))
        else:
            self.mean_I = _box_sum(I, r) / self.count
            var = _box_sum(I * I, r) / self.count - self.mean_I**2
            self.inv_var = 1.0 / (var + cfg.eps)

    def _mean(self, x):
        c = self.count.reshape(self.shape + (1,) * (x.ndim - 2))
        return _box_sum(x, self.cfg.radius) / c

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        if p.shape[:2] != self.shape:
            raise ValueError(f"input {p.shape} does not match guidance {self.shape}")
        flat = p.reshape(self.shape + (-1,))
        mean_p = self._mean(flat)
        if self.color:
            corr = self._mean(self.I[..., :, None] * flat[..., None, :])
            cov = corr - self.mean_I[..., :, None] * mean_p[..., None, :]
            a = self.inv_cov @ cov  # (H, W, 3, C)
            b = mean_p - np.einsum("hwg,hwgc->hwc", self.mean_I, a)
            out = np.einsum("hwg,hwgc->hwc", self.I, self._mean(a)) + self._mean(b)
        else:
            cov = self._mean(self.I[..., None] * flat) - self.mean_I[..., None] * mean_p
            a = cov * self.inv_var[..., None]
            b = mean_p - a * self.mean_I[..., None]
            out = self.I[..., None] * self._mean(a) + self._mean(b)
        return out.reshape(p.shape)


def guided_filter(inp, guidance, cfg: GuidedFilterConfig = GuidedFilterConfig()) -> np.ndarray:
    """Edge-aware smoothing of ``inp`` steered by ``guidance`` using box sums."""
    return GuidedFilter(guidance, cfg)(inp)


# --------------------------------------------------------------------------
# image-level pixel-wise ARAP
# --------------------------------------------------------------------------

class ArapImageResult(NamedTuple):
    per_pixel: np.ndarray  # NaN where not evaluated
    total: float
    covered: int  # pixels with enough unoccluded support


def arap_loss_image(P: PointMap, P_prime: PointMap, guidance, O, cfg: GuidedFilterConfig = GuidedFilterConfig()) -> ArapImageResult:
    """Pixel-wise ARAP cost for every pixel of a template/deformed point-map pair.

    Args:
        P: template points (frame t).
        P_prime: the same pixels' points after deformation.
        guidance: guidance image for the edge-aware weights.
        O: occlusion mask, 1 = visible. Invalid points are treated as occluded.
        cfg: guided-filter radius and regularisation.
    """
    if P.shape != P_prime.shape:
        raise ValueError("point maps must share a shape")
    o = (np.asarray(O, dtype=np.float64) != 0) & P.valid & P_prime.valid
    o = o.astype(np.float64)
    # global centring: the loss is translation invariant, and this keeps the
    # expanded second moments from cancelling catastrophically
    sel = o > 0
    c = P.points[sel].mean(axis=0) if sel.any() else np.zeros(3)
    c2 = P_prime.points[sel].mean(axis=0) if sel.any() else np.zeros(3)
    X = np.where(sel[..., None], P.points - c, 0.0)
    Y = np.where(sel[..., None], P_prime.points - c2, 0.0)

    gf = GuidedFilter(guidance, cfg)
    h, w = P.shape
    stack = np.concatenate(
        [
            o[..., None],
            o[..., None] * X,
            o[..., None] * Y,
            (o * np.einsum("hwc,hwc->hw", X, X))[..., None],
            (o * np.einsum("hwc,hwc->hw", Y, Y))[..., None],
            (o[..., None, None] * X[..., :, None] * Y[..., None, :]).reshape(h, w, 9),
        ],
        axis=2,
    )
    F = gf(stack)
    W = F[..., 0]
    Sx, Sy = F[..., 1:4], F[..., 4:7]
    Fxx, Fyy = F[..., 7], F[..., 8]
    Fxy = F[..., 9:18].reshape(h, w, 3, 3)

    covered = W > EPS_SUPPORT
    Wsafe = np.where(covered, W, 1.0)
    a = Fxx - np.einsum("hwc,hwc->hw", Sx, Sx) / Wsafe
    b = Fyy - np.einsum("hwc,hwc->hw", Sy, Sy) / Wsafe
    cross = Fxy - Sx[..., :, None] * Sy[..., None, :] / Wsafe[..., None, None]
    tr = np.linalg.svd(cross, compute_uv=False).sum(axis=-1)
    per_pixel = np.where(covered, a - 2.0 * tr + b, np.nan)
    evaluated = covered & P.valid & P_prime.valid
    per_pixel[~evaluated] = np.nan
    return ArapImageResult(per_pixel, float(per_pixel[evaluated].sum()), int(evaluated.sum()))


# --------------------------------------------------------------------------
# occlusion
# --------------------------------------------------------------------------

def bilinear_sample(field: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample an (H, W) or (H, W, C) field at float coordinates assumed inside the grid."""
    if field.ndim == 2:
        return bilinear_sample(field[..., None], x, y)[..., 0]
    h, w = field.shape[:2]
    x0 = np.clip(np.floor(x), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, h - 1).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (x - x0)[..., None]
    wy = (y - y0)[..., None]
    return (
        (1 - wx) * (1 - wy) * field[y0, x0]
        + wx * (1 - wy) * field[y0, x1]
        + (1 - wx) * wy * field[y1, x0]
        + wx * wy * field[y1, x1]
    )


def warp_targets(flow: np.ndarray):
    """Landing coordinates of every pixel under ``flow`` and whether they are in-bounds."""
    h, w = flow.shape[:2]
    vv, uu = np.mgrid[0:h, 0:w]
    x = uu + flow[..., 0]
    y = vv + flow[..., 1]
    finite = np.isfinite(x) & np.isfinite(y)
    inside = finite & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    return np.where(inside, x, 0.0), np.where(inside, y, 0.0), inside


def compute_occlusion(flow_fwd, flow_bwd, thresh: float) -> np.ndarray:
    """Forward-backward consistency mask (True = visible/consistent).

    A pixel passes when its forward flow lands inside the grid and the
    backward flow sampled there (bilinearly) undoes it to within ``thresh``.
    """
    flow_fwd = np.asarray(flow_fwd, dtype=np.float64)
    flow_bwd = np.asarray(flow_bwd, dtype=np.float64)
    if flow_fwd.shape != flow_bwd.shape or flow_fwd.ndim != 3 or flow_fwd.shape[2] != 2:
        raise ValueError("flows must be matching (H, W, 2) arrays")
    if not thresh > 0:
        raise ValueError("thresh must be positive")
    x, y, inside = warp_targets(flow_fwd)
    back = bilinear_sample(flow_bwd, x, y)
    du = flow_fwd[..., 0] + back[..., 0]
    dv = flow_fwd[..., 1] + back[..., 1]
    with np.errstate(invalid="ignore"):
        ok = du * du + dv * dv <= thresh * thresh
    return inside & ok


# --------------------------------------------------------------------------
# cluster-wise ARAP baseline
# --------------------------------------------------------------------------

def _apply(M: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ M[:, :3].T + M[:, 3]


def cluster_arap_eval(P: PointMap, P_prime: PointMap, g: ClusterGraph) -> tuple[float, float]:
    """Evaluate the cluster rigidity term and the anchor gluing term.

    Both use plain (unsquared) Euclidean norms.
    """
    valid = P.valid & P_prime.valid
    if g.assignment.shape != valid.shape:
        raise ValueError("assignment must match the point-map grid")
    local = 0.0
    for k in range(len(g.anchors)):
        sel = valid & (g.assignment == k)
        if sel.any():
            resid = _apply(g.motions[k], P.points[sel]) - P_prime.points[sel]
            local += float(np.linalg.norm(resid, axis=1).sum())
    glob = 0.0
    for k1, k2 in g.edges:
        a1 = _apply(g.motions[k1], g.anchors[k1][None])[0]
        a2 = _apply(g.motions[k2], g.anchors[k2][None])[0]
        glob += float(np.linalg.norm(a1 - a2))
    return local, glob


def cluster_motion_solve(P: PointMap, P_prime: PointMap, assignment) -> np.ndarray:
    """Independent best rigid motion (det +1) per cluster by Kabsch.

    Returns a (K, 3, 4) array with K = max(assignment) + 1.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    valid = P.valid & P_prime.valid
    k_count = int(assignment.max()) + 1
    motions = np.zeros((k_count, 3, 4))
    for k in range(k_count):
        sel = valid & (assignment == k)
        src, dst = P.points[sel], P_prime.points[sel]
        if len(src) < 3:
            raise DegenerateCluster(f"cluster {k} has {len(src)} points, need 3")
        mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
        sv = np.linalg.svd(src - mu_s, compute_uv=False)
        if sv[1] <= 1e-12 * max(sv[0], 1e-300):
            raise DegenerateCluster(f"cluster {k} is collinear")
        U, _, Vt = np.linalg.svd((src - mu_s).T @ (dst - mu_d))
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
        R = Vt.T @ D @ U.T
        motions[k, :, :3] = R
        motions[k, :, 3] = mu_d - R @ mu_s
    return motions
