"""Slow, straight-line reference implementations.

Each function here recomputes a quantity from its definition without sharing
code with the fast path it checks. They back the test-suite and the CLI
``selfcheck`` command and are not meant for production use.
"""

from __future__ import annotations

import math

import numpy as np

from .arap import GuidedFilterConfig, arap_local_closed


def project_reference(f, alpha, cu, cv, d_min, R, t_tilde, u, v, d):
    """Stereo-temporal projection of one pixel, written out with explicit K matrices."""
    K = np.array([[f, 0.0, cu + d_min / 2.0], [0.0, alpha * f, cv], [0.0, 0.0, 1.0]])
    inner = np.asarray(R) @ np.linalg.inv(K) @ np.array([u, v, 1.0]) + (d - d_min) / f * np.asarray(t_tilde)
    out = K @ (inner / inner[2])
    return out[0], out[1]


def nmg_bruteforce(q, d, valid, spacings):
    """NMG loss by explicit loops. Returns ``(total, pair_count, scale)``."""
    q = np.asarray(q, dtype=float)
    d = np.asarray(d, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    h, w = q.shape
    pairs = []
    for k in spacings:
        for y in range(h):
            for x in range(w):
                for dy, dx in ((0, k), (k, 0)):
                    y2, x2 = y + dy, x + dx
                    if y2 < h and x2 < w and valid[y, x] and valid[y2, x2]:
                        pairs.append((q[y2, x2] - q[y, x], d[y2, x2] - d[y, x]))
    num = math.fsum(abs(gd) for _, gd in pairs)
    den = math.fsum(abs(gq) for gq, _ in pairs)
    s = num / den
    total = math.fsum(abs(s * gq - gd) for gq, gd in pairs)
    return total, len(pairs), s


def guided_filter_kernel(guidance, cfg: GuidedFilterConfig) -> np.ndarray:
    """Dense (HW x HW) guided-filter weight matrix built window by window.

    Window k contributes ``(1 + (I_i - mu_k)^T (Sigma_k + eps)^-1 (I_j - mu_k)) / |w_k|``
    to every pair (i, j) inside it; row i is then divided by the number of
    windows containing i. Windows are clipped at the image border.
    """
    I = np.asarray(guidance, dtype=float)
    if I.ndim == 2:
        I = I[..., None]
    h, w, c = I.shape
    r = cfg.radius
    n = h * w
    W = np.zeros((n, n))
    cover = np.zeros(n)
    for ky in range(h):
        for kx in range(w):
            ys = range(max(ky - r, 0), min(ky + r + 1, h))
            xs = range(max(kx - r, 0), min(kx + r + 1, w))
            idx = np.array([y * w + x for y in ys for x in xs])
            feats = I.reshape(n, c)[idx]
            mu = feats.mean(axis=0)
            cen = feats - mu
            sigma = cen.T @ cen / len(idx)
            inv = np.linalg.inv(sigma + cfg.eps * np.eye(c))
            block = (1.0 + cen @ inv @ cen.T) / len(idx)
            W[np.ix_(idx, idx)] += block
            cover[idx] += 1
    return W / cover[:, None]


def jacobi_singular_values(M, sweeps: int = 60) -> np.ndarray:
    """Singular values by one-sided Jacobi rotations (descending)."""
    A = np.array(M, dtype=float)
    n = A.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = A[:, i] @ A[:, i]
                beta = A[:, j] @ A[:, j]
                gamma = A[:, i] @ A[:, j]
                off = max(off, abs(gamma) / math.sqrt(max(alpha * beta, 1e-300)))
                if gamma == 0.0:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                Ai = A[:, i].copy()
                A[:, i] = c * Ai - s * A[:, j]
                A[:, j] = s * Ai + c * A[:, j]
        if off < 1e-15:
            break
    return np.sort(np.linalg.norm(A, axis=0))[::-1]


def arap_image_reference(P, P_prime, guidance, O, cfg: GuidedFilterConfig) -> np.ndarray:
    """Per-pixel ARAP cost from explicit kernel rows fed to the closed form."""
    K = guided_filter_kernel(guidance, cfg)
    o = (np.asarray(O) != 0) & P.valid & P_prime.valid
    pts = P.points.reshape(-1, 3)
    pts2 = P_prime.points.reshape(-1, 3)
    of = o.ravel().astype(float)
    out = np.full(o.size, np.nan)
    for i in range(o.size):
        if not (P.valid.ravel()[i] and P_prime.valid.ravel()[i]):
            continue
        if K[i] @ of <= 1e-6:
            continue
        out[i] = arap_local_closed(pts, pts2, K[i], of)
    return out.reshape(o.shape)


def occlusion_scalar(flow_fwd, flow_bwd, thresh):
    """Forward-backward check, one pixel at a time in plain Python floats."""
    h, w = flow_fwd.shape[:2]
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            fu, fv = float(flow_fwd[y, x, 0]), float(flow_fwd[y, x, 1])
            tx, ty = x + fu, y + fv
            if not (math.isfinite(tx) and math.isfinite(ty)):
                continue
            if not (0 <= tx <= w - 1 and 0 <= ty <= h - 1):
                continue
            x0 = min(max(math.floor(tx), 0), w - 1)
            y0 = min(max(math.floor(ty), 0), h - 1)
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            wx, wy = tx - x0, ty - y0
            sample = []
            for ch in range(2):
                sample.append(
                    (1 - wx) * (1 - wy) * float(flow_bwd[y0, x0, ch])
                    + wx * (1 - wy) * float(flow_bwd[y0, x1, ch])
                    + (1 - wx) * wy * float(flow_bwd[y1, x0, ch])
                    + wx * wy * float(flow_bwd[y1, x1, ch])
                )
            du = fu + sample[0]
            dv = fv + sample[1]
            out[y, x] = du * du + dv * dv <= thresh * thresh
    return out


def nmg_total_longdouble(q, d, spacings) -> np.longdouble:
    """NMG loss (all spacings, fully valid grid) evaluated in extended precision."""
    q = np.asarray(q, dtype=np.longdouble)
    d = np.asarray(d, dtype=np.longdouble)
    gq, gd = [], []
    for k in spacings:
        gq += [(q[:, k:] - q[:, :-k]).ravel(), (q[k:] - q[:-k]).ravel()]
        gd += [(d[:, k:] - d[:, :-k]).ravel(), (d[k:] - d[:-k]).ravel()]
    gq, gd = np.concatenate(gq), np.concatenate(gd)
    s = np.abs(gd).sum() / np.abs(gq).sum()
    return np.abs(s * gq - gd).sum()


def nmg_fd_gradient(q, d, spacings, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of the NMG loss, one pixel at a time.

    The loss is evaluated in extended precision so that cancellation in the
    difference does not swamp small gradient components.
    """
    q = np.asarray(q, dtype=np.longdouble)
    out = np.zeros(q.shape)
    for idx in np.ndindex(q.shape):
        qp, qm = q.copy(), q.copy()
        qp[idx] += h
        qm[idx] -= h
        diff = nmg_total_longdouble(qp, d, spacings) - nmg_total_longdouble(qm, d, spacings)
        out[idx] = float(diff / (2 * np.longdouble(h)))
    return out
