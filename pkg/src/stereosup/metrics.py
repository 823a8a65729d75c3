"""Depth evaluation metrics.

Inverse-depth metrics (MRE, SILog, scaled NMG) are computed directly on
``q``; the depth-ratio family (abs rel, sq rel, RMSE log, delta thresholds)
on depth, normally after median alignment because predictions are only
defined up to scale.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyEvaluationSet, NonPositiveMedian, ZeroMeanGT
from .fields import MaskedField, as_masked
from .nmg import NmgConfig, nmg_loss


@dataclass(frozen=True)
class MetricReport:
    mre: float
    silog: float
    nmg_scaled: float
    abs_rel: float
    sq_rel: float
    rmse_log: float
    delta_1: float
    delta_2: float
    delta_3: float
    n_pixels: int

    def to_dict(self) -> dict:
        return asdict(self)


def _eval_mask(pred: MaskedField, gt: MaskedField) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred.valid & gt.valid & (gt.values > 0)


def metric_mre_silog(pred_q, gt_q, depth_cap: float = 20.0) -> tuple[float, float]:
    """Mean relative error and scale-invariant log error on inverse depth.

    Only pixels whose ground-truth depth ``1 / gt_q`` is at most ``depth_cap``
    are scored. SILog is the variance of ``log pred_q - log gt_q``.
    """
    pred, gt = as_masked(pred_q), as_masked(gt_q)
    m = _eval_mask(pred, gt)
    m[m] = 1.0 / gt.values[m] <= depth_cap
    if not m.any():
        raise EmptyEvaluationSet("no pixels within the depth cap")
    p, g = pred.values[m], gt.values[m]
    if (p <= 0).any():
        raise ValueError("predicted inverse depth must be positive at evaluated pixels")
    mre = float(np.mean(np.abs(p - g) / g))
    e = np.log(p) - np.log(g)
    silog = float(np.mean(e * e) - np.mean(e) ** 2)
    return mre, max(silog, 0.0)


def metric_nmg_scaled(pred_q, gt_q, cfg: NmgConfig = NmgConfig()) -> float:
    """Per-pair NMG error divided by the mean valid ground-truth inverse depth."""
    pred, gt = as_masked(pred_q), as_masked(gt_q)
    res = nmg_loss(pred, gt, cfg)
    if res.pair_count == 0:
        raise EmptyEvaluationSet("no valid gradient pairs")
    mean_gt = float(gt.values[gt.valid].mean()) if gt.valid.any() else 0.0
    if mean_gt == 0.0:
        raise ZeroMeanGT("mean ground-truth inverse depth is zero")
    return res.mean / mean_gt


def metric_kitti_family(pred_depth, gt_depth) -> tuple[float, float, float, float, float, float]:
    """``(abs_rel, sq_rel, rmse_log, delta_1, delta_2, delta_3)`` on depth.

    ``delta_n`` is the fraction of pixels with ``max(p/g, g/p) < 1.25**n``.
    """
    pred, gt = as_masked(pred_depth), as_masked(gt_depth)
    m = _eval_mask(pred, gt) & (pred.values > 0)
    if not m.any():
        raise EmptyEvaluationSet("no pixels with positive prediction and ground truth")
    p, g = pred.values[m], gt.values[m]
    abs_rel = float(np.mean(np.abs(p - g) / g))
    sq_rel = float(np.mean((p - g) ** 2 / g))
    rmse_log = float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2)))
    ratio = np.maximum(p / g, g / p)
    deltas = [float(np.mean(ratio < 1.25**n)) for n in (1, 2, 3)]
    return (abs_rel, sq_rel, rmse_log, *deltas)


def lower_median(x: np.ndarray) -> float:
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    return float(x[(len(x) - 1) // 2])


def median_align(pred_depth, gt_depth):
    """Scale ``pred_depth`` by ``median(gt) / median(pred)`` over jointly valid pixels.

    Uses the lower median for even counts. Returns the same kind of object
    that was passed in (array or :class:`MaskedField`).
    """
    pred, gt = as_masked(pred_depth), as_masked(gt_depth)
    m = pred.valid & gt.valid
    if not m.any():
        raise EmptyEvaluationSet("no jointly valid pixels")
    mp, mg = lower_median(pred.values[m]), lower_median(gt.values[m])
    if mp <= 0 or mg <= 0:
        raise NonPositiveMedian(f"medians must be positive (pred {mp}, gt {mg})")
    scale = mg / mp
    if isinstance(pred_depth, MaskedField):
        return MaskedField(pred.values * scale, pred.valid)
    return np.asarray(pred_depth, dtype=np.float64) * scale


def evaluate(pred_q, gt_q, cfg: NmgConfig = NmgConfig(), depth_cap: float = 20.0) -> MetricReport:
    """All metrics for an inverse-depth prediction against inverse-depth ground truth."""
    pred, gt = as_masked(pred_q), as_masked(gt_q)
    mre, silog = metric_mre_silog(pred, gt, depth_cap)
    nmg = metric_nmg_scaled(pred, gt, cfg)
    m = _eval_mask(pred, gt) & (pred.values > 0)
    safe_p = np.where(m, pred.values, 1.0)
    safe_g = np.where(m, gt.values, 1.0)
    pred_d = MaskedField(1.0 / safe_p, m)
    gt_d = MaskedField(1.0 / safe_g, m)
    kitti = metric_kitti_family(median_align(pred_d, gt_d), gt_d)
    return MetricReport(mre, silog, nmg, *kitti, n_pixels=int(m.sum()))
