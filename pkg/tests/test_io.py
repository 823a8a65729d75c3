"""File formats and the JSON report."""

import io
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stereosup import io as sio
from stereosup.errors import BadHeader, BadImage, BadMagic, DimensionOverflow, FormatError, TruncatedFile
from stereosup.fields import MaskedField

finite32 = st.floats(-1e6, 1e6, width=32)


def test_flo_byte_layout():
    flow = np.zeros((1, 2, 2), np.float32)
    flow[0, :, 0] = [1, 2]
    flow[0, :, 1] = [3, 4]
    blob = sio.encode_flo(flow)
    assert len(blob) == 28
    assert blob == struct.pack("<fii4f", 202021.25, 2, 1, 1, 3, 2, 4)


def test_flo_file_roundtrip(tmp_path, rng):
    flow = rng.normal(size=(13, 17, 2)).astype(np.float32)
    sio.write_flo(tmp_path / "a.flo", flow)
    back = sio.read_flo(tmp_path / "a.flo")
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, flow)
    buf = io.BytesIO()
    sio.write_flo(buf, back)
    assert buf.getvalue() == (tmp_path / "a.flo").read_bytes()


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(2)), elements=finite32))
def test_flo_roundtrip_is_bit_identical(flow):
    blob = sio.encode_flo(flow)
    assert sio.encode_flo(sio.decode_flo(blob)) == blob


def test_flo_bad_magic():
    with pytest.raises(BadMagic):
        sio.decode_flo(struct.pack("<fii", 1.0, 1, 1) + b"\0" * 8)


def test_flo_dimension_overflow():
    with pytest.raises(DimensionOverflow):
        sio.decode_flo(struct.pack("<fii", 202021.25, 1 << 20, 1 << 20))
    with pytest.raises(DimensionOverflow):
        sio.decode_flo(struct.pack("<fii", 202021.25, -3, 4))


def test_pfm_single_value():
    blob = sio.encode_pfm(np.array([[0.5]], np.float32))
    assert blob == b"Pf\n1 1\n-1.0\n" + struct.pack("<f", 0.5)
    assert sio.decode_pfm(blob)[0, 0] == 0.5


def test_pfm_rows_are_bottom_up():
    grid = np.array([[1, 2], [3, 4]], np.float32)
    payload = sio.encode_pfm(grid)[len(b"Pf\n2 2\n-1.0\n") :]
    np.testing.assert_array_equal(np.frombuffer(payload, "<f4"), [3, 4, 1, 2])


def test_pfm_big_endian_input():
    grid = np.array([[1.5, -2.0, 7.0]], np.float32)
    blob = b"Pf\n3 1\n1.0\n" + grid[::-1].astype(">f4").tobytes()
    np.testing.assert_array_equal(sio.decode_pfm(blob), grid)


def test_pfm_keeps_nan_and_inf(tmp_path):
    grid = np.array([[np.nan, np.inf], [-np.inf, 1.0]], np.float32)
    sio.write_pfm(tmp_path / "x.pfm", grid)
    back = sio.read_pfm(tmp_path / "x.pfm")
    assert np.isnan(back[0, 0]) and back[0, 1] == np.inf and back[1, 0] == -np.inf


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=finite32))
def test_pfm_roundtrip_is_bit_identical(grid):
    blob = sio.encode_pfm(grid)
    assert sio.encode_pfm(sio.decode_pfm(blob)) == blob


def test_pfm_color_header_is_rejected():
    with pytest.raises(BadHeader):
        sio.decode_pfm(b"PF\n1 1\n-1.0\n" + b"\0" * 12)


@pytest.mark.parametrize("blob", [b"P6\n1 1\n255\n", b"Pf\n1 1\n0\n\0\0\0\0", b"hello world"])
def test_pfm_bad_headers(blob):
    with pytest.raises(BadHeader):
        sio.decode_pfm(blob)


def _flo_blob():
    return sio.encode_flo(np.random.default_rng(0).normal(size=(4, 5, 2)).astype(np.float32))


def _pfm_blob():
    return sio.encode_pfm(np.random.default_rng(0).normal(size=(4, 5)).astype(np.float32))


@pytest.mark.parametrize("make,decode", [(_flo_blob, sio.decode_flo), (_pfm_blob, sio.decode_pfm)])
def test_every_truncation_raises_truncated(make, decode):
    blob = make()
    for n in range(len(blob)):
        with pytest.raises(TruncatedFile):
            decode(blob[:n])


@settings(max_examples=300, deadline=None)
@given(data=st.data())
def test_fuzzed_bytes_never_crash(data):
    blob = bytearray(data.draw(st.sampled_from([_flo_blob(), _pfm_blob()])))
    cut = data.draw(st.integers(0, len(blob)))
    blob = blob[:cut]
    for _ in range(data.draw(st.integers(0, 4))):
        if blob:
            i = data.draw(st.integers(0, len(blob) - 1))
            blob[i] = data.draw(st.integers(0, 255))
    for decode in (sio.decode_flo, sio.decode_pfm):
        try:
            out = decode(bytes(blob))
        except FormatError:
            continue
        assert isinstance(out, np.ndarray)


def test_png16_conventions(tmp_path):
    from PIL import Image

    raw = np.array([[256, 0], [512, 65535]], np.uint16)
    Image.fromarray(raw).save(tmp_path / "d.png")
    field = sio.read_png16_disparity(tmp_path / "d.png")
    assert field.values[0, 0] == 1.0 and field.valid[0, 0]
    assert not field.valid[0, 1]
    assert field.values[1, 1] == pytest.approx(65535 / 256)


def test_png16_roundtrip_quantisation(tmp_path, rng):
    d = rng.uniform(0.1, 200, (10, 12))
    valid = rng.random((10, 12)) > 0.2
    sio.write_png16_disparity(tmp_path / "d.png", MaskedField(d, valid))
    back = sio.read_png16_disparity(tmp_path / "d.png")
    np.testing.assert_array_equal(back.valid, valid)
    assert np.abs(back.values[valid] - d[valid]).max() <= 1 / 512


def test_png16_rejects_8bit_and_garbage(tmp_path):
    from PIL import Image

    Image.fromarray(np.zeros((3, 3), np.uint8)).save(tmp_path / "e.png")
    with pytest.raises(BadImage):
        sio.read_png16_disparity(tmp_path / "e.png")
    (tmp_path / "g.png").write_bytes(b"\x89PNG garbage")
    with pytest.raises(BadImage):
        sio.read_png16_disparity(tmp_path / "g.png")


def test_report_has_every_key_and_strict_json():
    doc = sio.make_report("metrics", metrics={"mre": float("nan"), "n": np.int64(3)}, stats={"x": np.float32(0.5)})
    assert set(doc) == set(sio.REPORT_KEYS)
    assert doc["schema_version"] == "1"
    assert doc["metrics"] == {"mre": None, "n": 3}
    back = json.loads(sio.dump_report(doc))
    assert back == doc


def test_report_rejects_unknown_sections():
    with pytest.raises(ValueError):
        sio.make_report("x", bogus=1)
