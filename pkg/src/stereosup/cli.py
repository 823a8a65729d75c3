"""Command-line driver.

Every subcommand prints a JSON report (or writes it to ``--out``). Exit
codes: 0 success, 1 rejected by a quality gate, 2 usage or input error,
3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io as sio
from .arap import GuidedFilterConfig, arap_loss_image, compute_occlusion
from .calibration import (
    CalibrationEstimate,
    Correspondences,
    MotionLabel,
    RobustLossConfig,
    bundle_adjust,
    initial_motion,
    label_motion,
    ransac_background,
)
from .errors import FormatError, Rejected, StereoSupError
from .fields import MaskedField, PointMap
from .geometry import CameraIntrinsics
from .metrics import evaluate
from .nmg import NmgConfig, nmg_loss, ordinal_loss, sample_ordinal_pairs
from .pipeline import (
    FLOW_NAMES,
    FlowBundle,
    PipelineConfig,
    brightness_check,
    build_supervision,
    default_init,
    fb_filter,
    shot_quality_filter,
    static_frame_filter,
    to_luma,
)
from .selfcheck import run_selfcheck

log = logging.getLogger("stereosup")

EXIT_OK, EXIT_REJECTED, EXIT_USAGE, EXIT_SOLVER = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# input helpers
# --------------------------------------------------------------------------

def _spacings(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"spacings must be comma-separated integers, got {text!r}") from None


def _field(path: str) -> MaskedField:
    """Scalar grid from PFM (NaN = invalid), 16-bit PNG disparity or .npy."""
    p = Path(path)
    if p.suffix.lower() == ".png":
        return sio.read_png16_disparity(p)
    if p.suffix.lower() == ".npy":
        return MaskedField.from_array(np.load(p))
    return MaskedField.from_array(sio.read_pfm(p))


def _image(path: str) -> np.ndarray:
    p = Path(path)
    if p.suffix.lower() == ".pfm":
        return sio.read_pfm(p).astype(np.float64)
    if p.suffix.lower() == ".npy":
        return np.load(p).astype(np.float64)
    from PIL import Image

    with Image.open(p) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / (65535.0 if arr.max() > 255 else 255.0)


def read_correspondences(path: str) -> Correspondences:
    """CSV with header; columns u_t, v_t, u_t1, v_t1, d and optional weight."""
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if data.shape[1] not in (5, 6):
        raise UsageError(f"{path}: expected 5 or 6 columns (u_t,v_t,u_t1,v_t1,d[,weight]), got {data.shape[1]}")
    weight = data[:, 5] if data.shape[1] == 6 else None
    return Correspondences(data[:, 0:2], data[:, 2:4], data[:, 4], weight)


def write_correspondences(path: str, corr: Correspondences) -> None:
    data = np.column_stack([corr.p_t, corr.p_t1, corr.d, corr.weight])
    np.savetxt(path, data, delimiter=",", header="u_t,v_t,u_t1,v_t1,d,weight", comments="", fmt="%.17g")


def _load_calibration(path: str) -> CalibrationEstimate:
    doc = json.loads(Path(path).read_text())
    if "calibration" in doc and isinstance(doc["calibration"], dict):
        doc = doc["calibration"]
    return CalibrationEstimate.from_dict(doc)


def _pipeline_config(args) -> PipelineConfig:
    values = {}
    if args.config:
        values.update(json.loads(Path(args.config).read_text()))
    for f in fields(PipelineConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    try:
        return PipelineConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad pipeline configuration: {exc}") from None


def _intrinsics_from_args(args, shape=None) -> CameraIntrinsics:
    """Starting intrinsics; the principal point defaults to the image centre."""
    if (args.cu is None or args.cv is None) and shape is None:
        raise UsageError("--cu and --cv are required (or give --width/--height)")
    base = default_init(shape, args.alpha).intr if shape is not None else None
    cu = base.cu if args.cu is None else args.cu
    cv = base.cv if args.cv is None else args.cv
    f0 = args.f_init if args.f_init is not None else (base.f if base else None)
    if f0 is None:
        raise UsageError("--f-init is required when the image width is unknown")
    try:
        return CameraIntrinsics(f0, args.alpha, cu, cv, args.dmin_init)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_calibrate(args) -> tuple[dict, int]:
    corr = read_correspondences(args.corr)
    shape = (args.height, args.width) if args.width and args.height else None
    intr = _intrinsics_from_args(args, shape)
    stats = {"n_correspondences": len(corr)}
    if not args.no_ransac:
        inl, _ = ransac_background(corr, args.ransac_iters, args.ransac_thresh, args.seed)
        stats.update(ransac_inliers=int(inl.sum()), ransac_outliers=int((~inl).sum()))
        corr = corr.subset(inl)
    robust = RobustLossConfig(args.robust, args.huber_delta)
    init = CalibrationEstimate(intr, initial_motion(corr, intr))
    est = bundle_adjust(corr, init, robust)
    return sio.make_report("calibrate", stats=stats, calibration=est.to_dict()), EXIT_OK


def cmd_label_motion(args) -> tuple[dict, int]:
    corr = read_correspondences(args.corr)
    est = _load_calibration(args.calib)
    labels = label_motion(corr, est, args.tau)
    counts = {lab.name.lower(): int((labels == lab).sum()) for lab in MotionLabel}
    if args.labels_out:
        np.savetxt(args.labels_out, labels, fmt="%d", header="label (0 static, 1 moving, 2 undefined)")
    return sio.make_report("label-motion", stats={"n_correspondences": len(corr), "labels": counts}), EXIT_OK


def cmd_filter_shot(args) -> tuple[dict, int]:
    cfg = _pipeline_config(args)
    flow = sio.read_flo(args.stereo_flow).astype(np.float64)
    if args.lr_mask:
        lr = sio.read_pfm(args.lr_mask)
        lr = np.isfinite(lr) & (lr != 0)
    elif args.stereo_flow_rev:
        lr = fb_filter(flow, sio.read_flo(args.stereo_flow_rev), cfg.fb_thresh)
    else:
        raise UsageError("give --lr-mask or --stereo-flow-rev")
    accepted, reasons = shot_quality_filter(flow, lr, cfg)
    stats = {"lr_consistent_fraction": float(lr.mean())}
    if args.temporal_flow:
        if not static_frame_filter(sio.read_flo(args.temporal_flow), cfg):
            reasons.append("static_frame")
    if args.image:
        luma = to_luma(_image(args.image))
        stats["mean_luma"] = float(luma.mean())
        if not brightness_check(luma, cfg):
            reasons.append("brightness")
    accepted = not reasons
    doc = sio.make_report("filter-shot", accepted=accepted, stats=stats, rejection_reasons=reasons)
    return doc, EXIT_OK if accepted else EXIT_REJECTED


def cmd_make_supervision(args) -> tuple[dict, int]:
    cfg = _pipeline_config(args)
    flows_dir = Path(args.flows)
    arrays = {}
    for name in FLOW_NAMES:
        for key in (name, name + "_rev"):
            path = flows_dir / f"{key}.flo"
            if not path.exists():
                raise UsageError(f"missing flow file {path}")
            arrays[key] = sio.read_flo(path)
    bundle = FlowBundle(**arrays)
    images = {"left_t": _image(args.image)} if args.image else None
    init = _intrinsics_from_args(args, bundle.shape)
    try:
        packet = build_supervision(bundle, images, cfg, args.seed, init)
    except Rejected as rej:
        return sio.make_report("make-supervision", accepted=False, stats=rej.stats, rejection_reasons=rej.reasons), EXIT_REJECTED
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        disp = np.where(packet.disparity.valid, packet.disparity.values, np.nan)
        sio.write_pfm(out / "disparity.pfm", disp)
        sio.write_pfm(out / "motion_mask.pfm", packet.motion_mask.astype(np.float32))
        sio.write_png16_disparity(out / "disparity.png", packet.disparity)
    doc = sio.make_report("make-supervision", stats=packet.stats, calibration=packet.calib.to_dict())
    return doc, EXIT_OK


def cmd_loss(args) -> tuple[dict, int]:
    if args.kind == "nmg":
        cfg = NmgConfig(args.spacings)
        res = nmg_loss(_field(args.pred), _field(args.gt), cfg)
        loss = {"kind": "nmg", "total": res.total, "mean": res.mean, "pair_count": res.pair_count, "scale": res.scale, "spacings": list(cfg.spacings)}
    elif args.kind == "ordinal":
        pred = _field(args.pred)
        pairs = sample_ordinal_pairs(_field(args.gt), args.n_pairs, args.ratio_thresh, args.seed)
        total = ordinal_loss(np.where(pred.valid, pred.values, 0.0), pairs)
        loss = {"kind": "ordinal", "total": total, "mean": total / len(pairs), "pair_count": len(pairs)}
    else:
        P = np.load(args.points)
        P2 = np.load(args.points_deformed)
        ok = np.isfinite(P).all(-1)
        ok2 = np.isfinite(P2).all(-1)
        guidance = _image(args.guidance)
        if guidance.ndim == 3 and guidance.shape[2] == 4:
            guidance = guidance[..., :3]
        if args.occlusion:
            O = _field(args.occlusion).values != 0
        elif args.flow_fwd and args.flow_bwd:
            O = compute_occlusion(sio.read_flo(args.flow_fwd), sio.read_flo(args.flow_bwd), args.occ_thresh)
        else:
            O = np.ones(P.shape[:2], bool)
        res = arap_loss_image(PointMap(np.nan_to_num(P), ok), PointMap(np.nan_to_num(P2), ok2), guidance, O, GuidedFilterConfig(args.radius, args.eps))
        loss = {"kind": "arap", "total": res.total, "mean": res.total / max(res.covered, 1), "pixel_count": res.covered}
        if args.per_pixel_out:
            sio.write_pfm(args.per_pixel_out, res.per_pixel)
    return sio.make_report("loss", loss=loss), EXIT_OK


def cmd_metrics(args) -> tuple[dict, int]:
    report = evaluate(_field(args.pred), _field(args.gt), NmgConfig(args.spacings), args.depth_cap)
    return sio.make_report("metrics", metrics=report.to_dict(), stats={"n_pixels": report.n_pixels}), EXIT_OK


def cmd_selfcheck(args) -> tuple[dict, int]:
    results = run_selfcheck(args.seed)
    for name, ok, detail in results:
        log.info("%-14s %s  %s", name, "PASS" if ok else "FAIL", detail)
    checks = {name: {"passed": ok, "detail": detail} for name, ok, detail in results}
    passed = all(ok for _, ok, _ in results)
    failed = [name for name, ok, _ in results if not ok]
    doc = sio.make_report("selfcheck", accepted=passed, stats={"checks": checks}, rejection_reasons=failed)
    return doc, EXIT_OK if passed else EXIT_SOLVER


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_intrinsics(p):
    g = p.add_argument_group("rig intrinsics")
    g.add_argument("--alpha", type=float, default=1.0, help="aspect ratio (fixed)")
    g.add_argument("--cu", type=float, help="principal point x (fixed; default image centre)")
    g.add_argument("--cv", type=float, help="principal point y (fixed; default image centre)")
    g.add_argument("--f-init", type=float, help="initial focal length (default image width)")
    g.add_argument("--dmin-init", type=float, default=0.0, help="initial minimum disparity")


def _add_pipeline_flags(p):
    p.add_argument("--config", help="JSON file with pipeline thresholds; flags override it")
    g = p.add_argument_group("thresholds")
    for f in fields(PipelineConfig):
        kind = int if f.name == "ransac_iters" else float
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stereosup", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--out", help="write the JSON report here instead of stdout")
    parser.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="RANSAC + bundle adjustment from a correspondence CSV")
    p.add_argument("--corr", required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    _add_intrinsics(p)
    p.add_argument("--robust", choices=("huber", "ssd"), default="huber")
    p.add_argument("--huber-delta", type=float, default=1.0)
    p.add_argument("--no-ransac", action="store_true")
    p.add_argument("--ransac-iters", type=int, default=2000)
    p.add_argument("--ransac-thresh", type=float, default=1.0)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("label-motion", help="static/moving labels under a calibration")
    p.add_argument("--corr", required=True)
    p.add_argument("--calib", required=True, help="calibration JSON (bare or a calibrate report)")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--labels-out")
    p.set_defaults(func=cmd_label_motion)

    p = sub.add_parser("filter-shot", help="shot-level stereo quality gates")
    p.add_argument("--stereo-flow", required=True)
    p.add_argument("--lr-mask", help="PFM, non-zero = left-right consistent")
    p.add_argument("--stereo-flow-rev", help="right->left flow, used when no --lr-mask is given")
    p.add_argument("--temporal-flow")
    p.add_argument("--image")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_filter_shot)

    p = sub.add_parser("make-supervision", help="full filtering + calibration cascade")
    p.add_argument("--flows", required=True, help="directory holding <name>.flo and <name>_rev.flo")
    p.add_argument("--image", help="left frame at t, for the brightness gate")
    p.add_argument("--out-dir")
    _add_intrinsics(p)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_make_supervision)

    p = sub.add_parser("loss", help="evaluate a supervision loss")
    p.add_argument("kind", choices=("nmg", "ordinal", "arap"))
    p.add_argument("--pred", help="predicted inverse depth (nmg, ordinal)")
    p.add_argument("--gt", help="disparity (nmg, ordinal)")
    p.add_argument("--spacings", type=_spacings, default=(2, 8, 32, 64))
    p.add_argument("--n-pairs", type=int, default=1000)
    p.add_argument("--ratio-thresh", type=float, default=1.02)
    p.add_argument("--points", help="template point map (.npy, H x W x 3)")
    p.add_argument("--points-deformed", help="deformed point map (.npy, H x W x 3)")
    p.add_argument("--guidance")
    p.add_argument("--occlusion")
    p.add_argument("--flow-fwd")
    p.add_argument("--flow-bwd")
    p.add_argument("--occ-thresh", type=float, default=1.0)
    p.add_argument("--radius", type=int, default=8)
    p.add_argument("--eps", type=float, default=1e-2)
    p.add_argument("--per-pixel-out")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("metrics", help="depth metrics for an inverse-depth prediction")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--spacings", type=_spacings, default=(2, 8, 32, 64))
    p.add_argument("--depth-cap", type=float, default=20.0)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("selfcheck", help="run the embedded oracle comparisons")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def _check_required(args) -> None:
    if args.command == "loss":
        need = {"nmg": ("pred", "gt"), "ordinal": ("pred", "gt"), "arap": ("points", "points_deformed", "guidance")}[args.kind]
        missing = [n for n in need if getattr(args, n) is None]
        if missing:
            raise UsageError(f"loss {args.kind} needs " + ", ".join("--" + m.replace("_", "-") for m in missing))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = _attach_stderr_logging(args)
    try:
        return _run(parser, args)
    finally:
        log.removeHandler(handler)


def _attach_stderr_logging(args) -> logging.Handler:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO if args.command == "selfcheck" else logging.WARNING - 10 * min(args.verbose, 2))
    return handler


def _run(parser, args) -> int:
    try:
        _check_required(args)
        doc, code = args.func(args)
    except (UsageError, FormatError, json.JSONDecodeError, FileNotFoundError, IsADirectoryError) as exc:
        parser.print_usage(sys.stderr)
        print(f"stereosup: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Rejected as rej:
        doc, code = sio.make_report(args.command, accepted=False, stats=rej.stats, rejection_reasons=rej.reasons), EXIT_REJECTED
    except StereoSupError as exc:
        stage = f" [{exc.stage}]" if exc.stage else ""
        print(f"stereosup: solver error{stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    text = sio.dump_report(doc)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
