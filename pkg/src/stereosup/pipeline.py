"""Turn stereo-video flows into filtered disparity supervision.

Stages, in order: forward-backward and cycle consistency filtering of the
flow bundle, the minimum-survivor gate, background selection by RANSAC,
bundle adjustment, and static/moving labelling. Shot-level quality gates
(vertical disparity, disparity range, left-right consistency, static frames,
brightness) mirror the dataset curation rules.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .arap import bilinear_sample, compute_occlusion, warp_targets
from .calibration import (
    CalibrationEstimate,
    Correspondences,
    MotionLabel,
    RobustLossConfig,
    bundle_adjust,
    initial_motion,
    label_motion,
    ransac_background,
    reprojection_residual,
)
from .errors import Rejected, ShapeMismatch, StereoSupError
from .fields import MaskedField
from .geometry import CameraIntrinsics, RigMotion

log = logging.getLogger(__name__)

FLOW_NAMES = ("stereo_t", "stereo_t1", "temporal_l", "temporal_r", "cross")


@dataclass(frozen=True)
class FlowBundle:
    """Forward flows between the four frames and the reverse of each.

    All arrays are (H, W, 2) with (u, v) displacement per pixel of the source
    frame. ``stereo_t``: left_t -> right_t, ``stereo_t1``: left_t1 -> right_t1,
    ``temporal_l``: left_t -> left_t1, ``temporal_r``: right_t -> right_t1,
    ``cross``: left_t -> right_t1; ``*_rev`` go the other way.
    """

    stereo_t: np.ndarray
    stereo_t1: np.ndarray
    temporal_l: np.ndarray
    temporal_r: np.ndarray
    cross: np.ndarray
    stereo_t_rev: np.ndarray
    stereo_t1_rev: np.ndarray
    temporal_l_rev: np.ndarray
    temporal_r_rev: np.ndarray
    cross_rev: np.ndarray

    def __post_init__(self):
        shape = None
        for f in fields(self):
            arr = np.asarray(getattr(self, f.name), dtype=np.float64)
            if arr.ndim != 3 or arr.shape[2] != 2:
                raise ShapeMismatch(f"{f.name} must be (H, W, 2), got {arr.shape}")
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ShapeMismatch(f"{f.name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, f.name, arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.stereo_t.shape[:2]


@dataclass(frozen=True)
class PipelineConfig:
    fb_thresh: float = 1.0
    cycle_thresh: float = 1.0
    min_valid_fraction: float = 0.30
    vertical_disp_max_fraction: float = 0.10
    vertical_disp_px: float = 1.0
    horizontal_range_min_px: float = 5.0
    lr_consistency_min_fraction: float = 0.70
    static_flow_px: float = 8.0
    brightness_min: float = 0.06
    tau_motion: float = 1.0
    disparity_sign: float = -1.0
    ransac_iters: int = 2000
    ransac_thresh: float = 1.0
    huber_delta: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name == "disparity_sign":
                if val not in (-1.0, 1.0):
                    raise ValueError("disparity_sign must be +1 or -1")
            elif not val > 0:
                raise ValueError(f"{f.name} must be positive, got {val}")
        for name in ("min_valid_fraction", "vertical_disp_max_fraction", "lr_consistency_min_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SupervisionPacket:
    disparity: MaskedField
    motion_mask: np.ndarray  # int8 MotionLabel codes
    calib: CalibrationEstimate
    stats: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# flow consistency
# --------------------------------------------------------------------------

def fb_filter(flow_fwd, flow_bwd, fb_thresh: float = 1.0) -> np.ndarray:
    """Supervision validity from forward-backward consistency.

    Same test as :func:`stereosup.arap.compute_occlusion`.
    """
    return compute_occlusion(flow_fwd, flow_bwd, fb_thresh)


def _sample_mask(mask: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # nearest pixel; coordinates are already known to be in bounds
    return mask[np.rint(y).astype(np.int64), np.rint(x).astype(np.int64)]


def cycle_filter(
    bundle: FlowBundle, cycle_thresh: float = 1.0, fb_thresh: float = 1.0, disparity_sign: float = -1.0
) -> tuple[Correspondences, np.ndarray]:
    """Keep left_t pixels whose flows agree around every loop.

    A pixel survives when stereo_t, temporal_l and cross pass their
    forward-backward checks at the pixel, temporal_r and stereo_t1 pass at
    the intermediate landing points, and the three routes to right_{t+1}
    (stereo_t then temporal_r, temporal_l then stereo_t1, cross) end within
    ``cycle_thresh`` of each other.

    Returns the surviving correspondences (row-major pixel order) and the
    (H, W) survivor mask.
    """
    fb = {name: fb_filter(getattr(bundle, name), getattr(bundle, name + "_rev"), fb_thresh) for name in FLOW_NAMES}
    h, w = bundle.shape
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)

    xs, ys, in_s = warp_targets(bundle.stereo_t)
    xl, yl, in_l = warp_targets(bundle.temporal_l)
    xc, yc, in_c = warp_targets(bundle.cross)
    keep = fb["stereo_t"] & fb["temporal_l"] & fb["cross"] & in_s & in_l & in_c
    keep &= _sample_mask(fb["temporal_r"], xs, ys) & _sample_mask(fb["stereo_t1"], xl, yl)

    route_a = np.stack([xs, ys], axis=-1) + bilinear_sample(bundle.temporal_r, xs, ys)
    route_b = np.stack([xl, yl], axis=-1) + bilinear_sample(bundle.stereo_t1, xl, yl)
    route_c = np.stack([xc, yc], axis=-1)
    spread = np.maximum.reduce(
        [
            np.linalg.norm(route_a - route_b, axis=-1),
            np.linalg.norm(route_a - route_c, axis=-1),
            np.linalg.norm(route_b - route_c, axis=-1),
        ]
    )
    with np.errstate(invalid="ignore"):
        keep &= spread <= cycle_thresh

    p_t = np.stack([uu[keep], vv[keep]], axis=1)
    p_t1 = np.stack([xl[keep], yl[keep]], axis=1)
    d = disparity_sign * bundle.stereo_t[..., 0][keep]
    return Correspondences(p_t, p_t1, d), keep


# --------------------------------------------------------------------------
# gates
# --------------------------------------------------------------------------

def discard_check(valid_fraction: float, cfg: PipelineConfig = PipelineConfig()) -> bool:
    if not 0.0 <= valid_fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {valid_fraction}")
    return valid_fraction >= cfg.min_valid_fraction


def shot_quality_filter(stereo_flow, lr_valid, cfg: PipelineConfig = PipelineConfig()) -> tuple[bool, list[str]]:
    """Apply the shot-level stereo sanity rules.

    Rejects when more than ``vertical_disp_max_fraction`` of pixels have a
    vertical disparity above ``vertical_disp_px``, when the horizontal
    disparity range over left-right-consistent pixels is below
    ``horizontal_range_min_px``, or when fewer than
    ``lr_consistency_min_fraction`` of pixels pass the left-right check.
    Reaching a threshold exactly passes.
    """
    flow = np.asarray(stereo_flow, dtype=np.float64)
    lr = np.asarray(lr_valid).astype(bool)
    if flow.shape[:2] != lr.shape or flow.ndim != 3:
        raise ShapeMismatch(f"flow {flow.shape} and mask {lr.shape} disagree")
    reasons = []
    finite = np.isfinite(flow).all(axis=-1)
    n = int(finite.sum())
    big_vertical = int((np.abs(flow[..., 1][finite]) > cfg.vertical_disp_px).sum())
    if n == 0 or big_vertical / n > cfg.vertical_disp_max_fraction:
        reasons.append("vertical_disparity")
    horiz = flow[..., 0][lr & finite]
    if horiz.size == 0 or horiz.max() - horiz.min() < cfg.horizontal_range_min_px:
        reasons.append("horizontal_range")
    if lr.mean() < cfg.lr_consistency_min_fraction:
        reasons.append("lr_consistency")
    return not reasons, reasons


def static_frame_filter(temporal_flow, cfg: PipelineConfig = PipelineConfig()) -> bool:
    """False for near-static frames (largest flow magnitude under ``static_flow_px``)."""
    flow = np.asarray(temporal_flow, dtype=np.float64)
    mag = np.hypot(flow[..., 0], flow[..., 1])
    mag = mag[np.isfinite(mag)]
    return bool(mag.size) and float(mag.max()) >= cfg.static_flow_px


def stereo_format_score(left_half, right_half) -> float:
    """Mean squared difference between the two halves of a side-by-side frame."""
    a = np.asarray(left_half, dtype=np.float64)
    b = np.asarray(right_half, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"halves differ in shape: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def to_luma(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] >= 3:
        return img[..., :3] @ np.array([0.299, 0.587, 0.114])
    if img.ndim == 3:
        return img[..., 0]
    return img


def brightness_check(image, cfg: PipelineConfig = PipelineConfig()) -> bool:
    """Drop black frames: accept iff mean luma (unit range) reaches ``brightness_min``."""
    return float(to_luma(image).mean()) >= cfg.brightness_min


# --------------------------------------------------------------------------
# orchestration
# --------------------------------------------------------------------------

def default_init(shape: tuple[int, int], alpha: float = 1.0) -> CalibrationEstimate:
    """Starting point used when the caller has nothing better."""
    h, w = shape
    intr = CameraIntrinsics(float(w), alpha, (w - 1) / 2, (h - 1) / 2, 0.0)
    return CalibrationEstimate(intr, RigMotion(np.eye(3), [0.01, 0.0, 0.0]))


def _tagged(stage: str, exc: StereoSupError) -> StereoSupError:
    exc.stage = stage
    return exc


def build_supervision(
    bundle: FlowBundle,
    images: dict | None = None,
    cfg: PipelineConfig = PipelineConfig(),
    rng_seed: int = 0,
    init: CalibrationEstimate | CameraIntrinsics | None = None,
) -> SupervisionPacket:
    """Run the full filtering and calibration cascade on one frame.

    Args:
        bundle: flows between the stereo pair at t and t+1.
        images: optional frames keyed by name; ``"left_t"`` feeds the
            brightness gate.
        cfg: thresholds.
        rng_seed: RANSAC seed; the packet is a pure function of the inputs
            and this seed.
        init: calibration starting point; ``alpha``, ``cu`` and ``cv`` are
            taken from it and kept fixed. Bare intrinsics (or ``None``, which
            means :func:`default_init` intrinsics) get their motion start
            from :func:`~stereosup.calibration.initial_motion` on the RANSAC
            inliers.

    Raises:
        Rejected: a gate failed; ``reasons`` and ``stats`` describe why.
        StereoSupError: a solver failure, with ``stage`` set.
    """
    h, w = bundle.shape
    n_pixels = h * w
    stats: dict = {"n_pixels": n_pixels}
    reasons: list[str] = []

    if images and "left_t" in images and not brightness_check(images["left_t"], cfg):
        reasons.append("brightness")
    if not static_frame_filter(bundle.temporal_l, cfg):
        reasons.append("static_frame")
    lr_valid = fb_filter(bundle.stereo_t, bundle.stereo_t_rev, cfg.fb_thresh)
    ok, shot_reasons = shot_quality_filter(bundle.stereo_t, lr_valid, cfg)
    reasons.extend(shot_reasons)
    stats["lr_consistent_fraction"] = float(lr_valid.mean())
    if reasons:
        raise Rejected(reasons, stats)

    corr, survivors = cycle_filter(bundle, cfg.cycle_thresh, cfg.fb_thresh, cfg.disparity_sign)
    n_surv = len(corr)
    stats.update(flow_survivors=n_surv, flow_rejected=n_pixels - n_surv, valid_fraction=n_surv / n_pixels)
    if not discard_check(n_surv / n_pixels, cfg):
        raise Rejected(["low_valid_fraction"], stats)

    try:
        inliers, _ = ransac_background(corr, cfg.ransac_iters, cfg.ransac_thresh, rng_seed)
    except StereoSupError as exc:
        raise _tagged("ransac_background", exc)
    stats.update(ransac_inliers=int(inliers.sum()), ransac_outliers=int((~inliers).sum()))

    background = corr.subset(inliers)
    robust = RobustLossConfig("huber", cfg.huber_delta)
    try:
        if isinstance(init, CalibrationEstimate):
            start = init
        else:
            intr = init if init is not None else default_init((h, w)).intr
            start = CalibrationEstimate(intr, initial_motion(background, intr))
        calib = bundle_adjust(background, start, robust)
    except StereoSupError as exc:
        raise _tagged("bundle_adjust", exc)

    labels = label_motion(corr, calib, cfg.tau_motion)
    counts = {lab.name.lower(): int((labels == lab).sum()) for lab in MotionLabel}
    stats.update(labels=counts)

    motion_mask = np.full((h, w), MotionLabel.UNDEFINED, dtype=np.int8)
    motion_mask[survivors] = labels
    disparity = np.full((h, w), np.nan)
    disparity[survivors] = corr.d
    stats["residual_rms"] = calib.residual_rms
    log.info("supervision: %d survivors, %d inliers, labels %s", n_surv, stats["ransac_inliers"], counts)
    return SupervisionPacket(MaskedField(disparity, survivors), motion_mask, calib, stats)
