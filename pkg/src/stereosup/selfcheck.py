"""Small, fast oracle comparisons run by ``stereosup selfcheck``."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import arap, calibration, geometry, nmg, oracles
from . import io as sio
from .fields import MaskedField, PointMap
from .synthetic import perturb_estimate, random_rig_correspondences, rigid_scene_matches


def _projection(rng):
    intr = geometry.CameraIntrinsics(*rng.uniform([200, 0.8, 100, 80, -5], [600, 1.2, 300, 200, 5]))
    motion = geometry.RigMotion.from_rotvec(rng.normal(size=3) * 0.05, rng.normal(size=3))
    worst = 0.0
    for _ in range(20):
        u, v, d = rng.uniform([0, 0, 10], [400, 300, 40])
        fast = geometry.project_stereo_temporal(intr, motion, [u, v], d)
        ref = oracles.project_reference(intr.f, intr.alpha, intr.cu, intr.cv, intr.d_min, motion.rotation, motion.t_tilde, u, v, d)
        worst = max(worst, float(np.abs(fast - ref).max()))
    return worst <= 1e-9, f"max |diff| {worst:.2e} px"


def _nmg(rng):
    q, d = rng.random((16, 16)), rng.random((16, 16))
    valid = rng.random((16, 16)) > 0.2
    cfg = nmg.NmgConfig((1, 2, 5))
    fast = nmg.nmg_loss(MaskedField(q, valid), MaskedField(d, valid), cfg)
    total, count, _ = oracles.nmg_bruteforce(q, d, valid, cfg.spacings)
    err = abs(fast.total - total) / total
    return err <= 1e-10 and fast.pair_count == count, f"rel diff {err:.2e}"


def _nmg_gradient(rng):
    q, d = rng.random((12, 12)), rng.random((12, 12))
    cfg = nmg.NmgConfig((1, 3))
    g = nmg.nmg_gradient(q, d, cfg)
    num = oracles.nmg_fd_gradient(q, d, cfg.spacings)
    worst = float(np.max(np.abs(g - num) / np.maximum(np.abs(num), 1e-6 * np.abs(num).max())))
    return worst <= 1e-5, f"max rel {worst:.2e}"


def _arap_local(rng):
    worst = 0.0
    for _ in range(50):
        n = rng.integers(4, 30)
        p, p2 = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        w, o = rng.random(n), (rng.random(n) > 0.2).astype(float)
        o[0] = 1.0
        a = arap.arap_local_closed(p, p2, w, o)
        b = arap.arap_local_bruteforce(p, p2, w, o)
        worst = max(worst, abs(a - b) / max(abs(b), 1e-300))
    return worst <= 1e-8, f"max rel {worst:.2e}"


def _trace_norm(rng):
    M = rng.normal(size=(3, 3))
    a = arap.trace_norm(M)
    b = oracles.jacobi_singular_values(M).sum()
    return abs(a - b) <= 1e-10, f"|diff| {abs(a - b):.2e}"


def _guided(rng):
    I, p = rng.random((12, 12)), rng.random((12, 12))
    cfg = arap.GuidedFilterConfig(3, 1e-2)
    K = oracles.guided_filter_kernel(I, cfg)
    err = float(np.abs(arap.guided_filter(p, I, cfg) - (K @ p.ravel()).reshape(12, 12)).max())
    return err <= 1e-6, f"max |diff| {err:.2e}"


def _arap_image(rng):
    h = w = 10
    yy, xx = np.mgrid[0:h, 0:w] / 5.0
    P = np.stack([xx, yy, 4 + np.sin(xx) * np.cos(yy)], axis=-1)
    P2 = P + 0.2 * np.stack([np.sin(yy), np.cos(xx), xx * yy / 4], axis=-1)
    ones = np.ones((h, w), bool)
    guide = rng.random((h, w))
    O = rng.random((h, w)) > 0.2
    cfg = arap.GuidedFilterConfig(2, 1e-2)
    fast = arap.arap_loss_image(PointMap(P, ones), PointMap(P2, ones), guide, O, cfg).per_pixel
    ref = oracles.arap_image_reference(PointMap(P, ones), PointMap(P2, ones), guide, O, cfg)
    rel = float(np.nanmax(np.abs(fast - ref) / np.maximum(np.abs(ref), 1e-12)))
    return rel <= 1e-5, f"max rel {rel:.2e}"


def _occlusion(rng):
    fwd = rng.normal(scale=2.0, size=(12, 14, 2))
    bwd = rng.normal(scale=2.0, size=(12, 14, 2))
    ok = np.array_equal(arap.compute_occlusion(fwd, bwd, 2.0), oracles.occlusion_scalar(fwd, bwd, 2.0))
    return ok, "exact match" if ok else "mismatch"


def _bundle(rng):
    corr, truth, _ = random_rig_correspondences(200, seed=int(rng.integers(1 << 31)))
    est = calibration.bundle_adjust(corr, perturb_estimate(truth), calibration.RobustLossConfig("ssd"))
    err = max(abs(est.intr.f / truth.intr.f - 1), abs(est.intr.d_min / truth.intr.d_min - 1))
    return err <= 1e-4, f"rel param err {err:.2e}"


def _ransac(rng):
    x1, x2, _ = rigid_scene_matches(70, seed=int(rng.integers(1 << 31)))
    out1 = rng.uniform([0, 0], [640, 480], (30, 2))
    out2 = rng.uniform([0, 0], [640, 480], (30, 2))
    corr = calibration.Correspondences(np.vstack([x1, out1]), np.vstack([x2, out2]), np.zeros(100))
    inl, _ = calibration.ransac_background(corr, rng_seed=0)
    recall = inl[:70].mean()
    return recall >= 0.99 and inl[70:].sum() <= 1, f"recall {recall:.3f}, false {int(inl[70:].sum())}"


def _formats(rng):
    flow = rng.normal(size=(5, 7, 2)).astype(np.float32)
    blob = sio.encode_flo(flow)
    ok = sio.encode_flo(sio.decode_flo(blob)) == blob
    grid = rng.normal(size=(4, 6)).astype(np.float32)
    pblob = sio.encode_pfm(grid)
    ok &= sio.encode_pfm(sio.decode_pfm(pblob)) == pblob
    return ok, "bit-identical" if ok else "round-trip changed bytes"


CHECKS: dict[str, Callable] = {
    "projection": _projection,
    "nmg_loss": _nmg,
    "nmg_gradient": _nmg_gradient,
    "arap_local": _arap_local,
    "trace_norm": _trace_norm,
    "guided_filter": _guided,
    "arap_image": _arap_image,
    "occlusion": _occlusion,
    "bundle_adjust": _bundle,
    "ransac": _ransac,
    "formats": _formats,
}


def run_selfcheck(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS.items():
        rng = np.random.default_rng([seed, len(results)])
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash is a failed check, not a crash of the tool
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
