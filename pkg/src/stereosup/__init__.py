"""Self-supervised depth supervision from stereo video.

Submodules:
    geometry: rectified rig intrinsics, stereo-temporal projection, back-projection.
    nmg: normalized multiscale gradient and ordinal losses.
    arap: pixel-wise as-rigid-as-possible loss with guided-filter weights.
    calibration: epipolar RANSAC, bundle adjustment, motion labels.
    pipeline: flow filtering cascade that turns flows into supervision.
    metrics: depth-quality metrics.
    io: file formats and JSON reports.
"""

from .arap import GuidedFilterConfig, arap_loss_image, arap_local_closed, compute_occlusion, guided_filter
from .calibration import (
    CalibrationEstimate,
    Correspondences,
    MotionLabel,
    RobustLossConfig,
    bundle_adjust,
    label_motion,
    ransac_background,
)
from .errors import FormatError, Rejected, StereoSupError
from .fields import MaskedField, PointMap
from .geometry import CameraIntrinsics, RigMotion, backproject, disparity_to_inverse_depth, project_stereo_temporal
from .metrics import MetricReport, evaluate
from .nmg import NmgConfig, nmg_gradient, nmg_loss, ordinal_loss
from .pipeline import FlowBundle, PipelineConfig, SupervisionPacket, build_supervision

__version__ = "0.1.0"

__all__ = [
    "CalibrationEstimate",
    "CameraIntrinsics",
    "Correspondences",
    "FlowBundle",
    "FormatError",
    "GuidedFilterConfig",
    "MaskedField",
    "MetricReport",
    "MotionLabel",
    "NmgConfig",
    "PipelineConfig",
    "PointMap",
    "Rejected",
    "RigMotion",
    "RobustLossConfig",
    "StereoSupError",
    "SupervisionPacket",
    "arap_local_closed",
    "arap_loss_image",
    "backproject",
    "build_supervision",
    "bundle_adjust",
    "compute_occlusion",
    "disparity_to_inverse_depth",
    "evaluate",
    "guided_filter",
    "label_motion",
    "nmg_gradient",
    "nmg_loss",
    "ordinal_loss",
    "project_stereo_temporal",
    "ransac_background",
]
