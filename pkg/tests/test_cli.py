"""Command-line driver: reports, files and exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from stereosup import io as sio
from stereosup.cli import main, write_correspondences
from stereosup.synthetic import SyntheticScene, random_rig_correspondences


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    doc = json.loads(out.out) if out.out.strip() else None
    return code, doc, out.err


@pytest.fixture(scope="module")
def scene():
    return SyntheticScene()


@pytest.fixture
def flows_dir(tmp_path, scene):
    bundle = scene.bundle()
    d = tmp_path / "flows"
    d.mkdir()
    for name in ("stereo_t", "stereo_t1", "temporal_l", "temporal_r", "cross"):
        sio.write_flo(d / f"{name}.flo", getattr(bundle, name))
        sio.write_flo(d / f"{name}_rev.flo", getattr(bundle, name + "_rev"))
    return d


def test_selfcheck_passes(capsys):
    code, doc, err = run(capsys, "selfcheck")
    assert code == 0
    assert doc["accepted"] is True
    assert all(c["passed"] for c in doc["stats"]["checks"].values())
    assert "PASS" in err


def test_loss_nmg(tmp_path, capsys, rng):
    q = rng.random((80, 80)).astype(np.float32)
    sio.write_pfm(tmp_path / "q.pfm", q)
    sio.write_pfm(tmp_path / "d.pfm", 3 * q + 1)
    code, doc, _ = run(capsys, "loss", "nmg", "--pred", tmp_path / "q.pfm", "--gt", tmp_path / "d.pfm", "--spacings", "2,8,32,64")
    assert code == 0
    loss = doc["loss"]
    assert loss["spacings"] == [2, 8, 32, 64]
    # float32 storage of 3q + 1 leaves only rounding-level disagreement
    assert loss["mean"] < 1e-6
    assert loss["mean"] == pytest.approx(loss["total"] / loss["pair_count"])
    assert loss["pair_count"] == sum(2 * 80 * (80 - k) for k in (2, 8, 32, 64))


def test_loss_ordinal(tmp_path, capsys, rng):
    d = rng.uniform(1, 10, (20, 20)).astype(np.float32)
    sio.write_pfm(tmp_path / "d.pfm", d)
    code, doc, _ = run(capsys, "--seed", 4, "loss", "ordinal", "--pred", tmp_path / "d.pfm", "--gt", tmp_path / "d.pfm", "--n-pairs", 50)
    assert code == 0
    assert doc["loss"]["pair_count"] == 50
    assert doc["loss"]["total"] > 0


def test_loss_arap_identity(tmp_path, capsys, rng):
    yy, xx = np.mgrid[0:16, 0:16] / 16.0
    P = np.stack([xx, yy, 2 + 0.1 * np.sin(4 * xx)], axis=-1)
    np.save(tmp_path / "p.npy", P)
    np.save(tmp_path / "g.npy", rng.random((16, 16)))
    code, doc, _ = run(
        capsys, "loss", "arap", "--points", tmp_path / "p.npy", "--points-deformed", tmp_path / "p.npy",
        "--guidance", tmp_path / "g.npy", "--radius", 3, "--per-pixel-out", tmp_path / "pp.pfm",
    )
    assert code == 0
    assert abs(doc["loss"]["total"]) < 1e-8
    assert sio.read_pfm(tmp_path / "pp.pfm").shape == (16, 16)


def test_loss_arap_requires_points(capsys):
    code, doc, err = run(capsys, "loss", "arap", "--guidance", "x.npy")
    assert code == 2 and doc is None
    assert "--points" in err


def test_metrics(tmp_path, capsys, rng):
    gt = rng.uniform(0.1, 1.0, (20, 20)).astype(np.float32)
    sio.write_pfm(tmp_path / "gt.pfm", gt)
    sio.write_pfm(tmp_path / "pred.pfm", 2 * gt)
    code, doc, _ = run(capsys, "metrics", "--pred", tmp_path / "pred.pfm", "--gt", tmp_path / "gt.pfm", "--spacings", "2,8")
    assert code == 0
    assert doc["metrics"]["silog"] == pytest.approx(0.0, abs=1e-12)
    assert doc["metrics"]["mre"] == pytest.approx(1.0)
    assert doc["metrics"]["delta_1"] == 1.0


def _stereo_fixture(tmp_path, lr_fraction):
    flow = np.zeros((10, 10, 2), np.float32)
    flow[..., 0] = -np.linspace(0, 20, 100).reshape(10, 10)
    lr = np.zeros(100, np.float32)
    lr[: int(round(lr_fraction * 100))] = 1
    sio.write_flo(tmp_path / "s.flo", flow)
    sio.write_pfm(tmp_path / "m.pfm", lr.reshape(10, 10))
    return tmp_path / "s.flo", tmp_path / "m.pfm"


def test_filter_shot_rejects_low_consistency(tmp_path, capsys):
    flo, mask = _stereo_fixture(tmp_path, 0.69)
    code, doc, _ = run(capsys, "filter-shot", "--stereo-flow", flo, "--lr-mask", mask)
    assert code == 1
    assert doc["accepted"] is False
    assert doc["rejection_reasons"] == ["lr_consistency"]


def test_filter_shot_accepts_and_honours_overrides(tmp_path, capsys):
    flo, mask = _stereo_fixture(tmp_path, 0.71)
    code, doc, _ = run(capsys, "filter-shot", "--stereo-flow", flo, "--lr-mask", mask)
    assert code == 0 and doc["accepted"] is True
    code, doc, _ = run(capsys, "filter-shot", "--stereo-flow", flo, "--lr-mask", mask, "--lr-consistency-min-fraction", 0.8)
    assert code == 1


def test_filter_shot_config_file(tmp_path, capsys):
    flo, mask = _stereo_fixture(tmp_path, 0.71)
    (tmp_path / "cfg.json").write_text(json.dumps({"lr_consistency_min_fraction": 0.9}))
    code, doc, _ = run(capsys, "filter-shot", "--stereo-flow", flo, "--lr-mask", mask, "--config", tmp_path / "cfg.json")
    assert code == 1
    (tmp_path / "bad.json").write_text(json.dumps({"nope": 1}))
    code, _, _ = run(capsys, "filter-shot", "--stereo-flow", flo, "--lr-mask", mask, "--config", tmp_path / "bad.json")
    assert code == 2


def test_make_supervision_writes_outputs(tmp_path, capsys, flows_dir, scene):
    out = tmp_path / "out"
    code, doc, _ = run(capsys, "make-supervision", "--flows", flows_dir, "--out-dir", out, "--cu", scene.intr.cu, "--cv", scene.intr.cv)
    assert code == 0
    assert doc["calibration"]["f"] == pytest.approx(scene.intr.f, rel=1e-4)
    disp = sio.read_pfm(out / "disparity.pfm")
    mask = sio.read_pfm(out / "motion_mask.pfm")
    assert disp.shape == mask.shape == (scene.height, scene.width)
    assert np.isnan(disp[mask == 2]).all()
    assert np.isfinite(disp[mask != 2]).all()
    assert (out / "disparity.png").exists()


def test_make_supervision_missing_flow(tmp_path, capsys, flows_dir):
    (flows_dir / "cross.flo").unlink()
    code, doc, err = run(capsys, "make-supervision", "--flows", flows_dir)
    assert code == 2 and "cross.flo" in err


def test_make_supervision_rejection(tmp_path, capsys, flows_dir):
    code, doc, _ = run(capsys, "make-supervision", "--flows", flows_dir, "--min-valid-fraction", 0.99)
    assert code == 1
    assert doc["rejection_reasons"] == ["low_valid_fraction"]


def test_calibrate_and_label(tmp_path, capsys):
    corr, truth, _ = random_rig_correspondences(200, seed=1)
    write_correspondences(tmp_path / "c.csv", corr)
    code, doc, _ = run(
        capsys, "--out", tmp_path / "calib.json", "calibrate", "--corr", tmp_path / "c.csv",
        "--cu", 320, "--cv", 240, "--f-init", 480, "--dmin-init", -3,
    )
    assert code == 0 and doc is None
    calib = json.loads((tmp_path / "calib.json").read_text())
    assert calib["calibration"]["f"] == pytest.approx(500.0, rel=1e-4)
    assert calib["stats"]["ransac_inliers"] == 200
    code, doc, _ = run(capsys, "label-motion", "--corr", tmp_path / "c.csv", "--calib", tmp_path / "calib.json")
    assert code == 0
    assert doc["stats"]["labels"]["static"] == 200


def test_calibrate_solver_failure(tmp_path, capsys):
    (tmp_path / "c.csv").write_text("u_t,v_t,u_t1,v_t1,d\n" + "1,1,1,1,1\n" * 20)
    code, doc, err = run(capsys, "calibrate", "--corr", tmp_path / "c.csv", "--cu", 0, "--cv", 0, "--f-init", 100)
    assert code == 3 and doc is None
    assert "ransac" in err.lower() or "consensus" in err.lower()


def test_bad_csv_and_bad_file(tmp_path, capsys):
    (tmp_path / "c.csv").write_text("a,b\n1,2\n")
    assert run(capsys, "calibrate", "--corr", tmp_path / "c.csv", "--cu", 0, "--cv", 0, "--f-init", 1)[0] == 2
    (tmp_path / "bad.pfm").write_bytes(b"PF\n1 1\n-1\n")
    assert run(capsys, "metrics", "--pred", tmp_path / "bad.pfm", "--gt", tmp_path / "bad.pfm")[0] == 2
    assert run(capsys, "metrics", "--pred", tmp_path / "none.pfm", "--gt", tmp_path / "none.pfm")[0] == 2


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 2


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "stereosup.cli", "selfcheck"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["command"] == "selfcheck"
