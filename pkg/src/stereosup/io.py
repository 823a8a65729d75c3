"""File formats: Middlebury .flo, single-channel PFM, 16-bit PNG disparity, JSON reports.

Readers accept a path or a binary file object and raise a
:class:`~stereosup.errors.FormatError` subclass on any malformed or truncated
input. Writers are canonical: the same array always produces the same bytes.
"""

from __future__ import annotations

import io
import json
import math
import re
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np
from PIL import Image

from .errors import BadHeader, BadImage, BadMagic, DimensionOverflow, TruncatedFile
from .fields import MaskedField

PathOrFile = Union[str, Path, BinaryIO]

FLO_MAGIC = 202021.25
MAX_PIXELS = 1 << 28
SCHEMA_VERSION = "1"


def _read_all(src: PathOrFile) -> bytes:
    if isinstance(src, (str, Path)):
        return Path(src).read_bytes()
    return src.read()


def _write_all(dst: PathOrFile, payload: bytes) -> None:
    if isinstance(dst, (str, Path)):
        Path(dst).write_bytes(payload)
    else:
        dst.write(payload)


def _check_dims(w: int, h: int) -> None:
    if w <= 0 or h <= 0 or w * h > MAX_PIXELS:
        raise DimensionOverflow(f"implausible dimensions {w}x{h}")


# --------------------------------------------------------------------------
# .flo
# --------------------------------------------------------------------------

def encode_flo(flow) -> bytes:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    _check_dims(w, h)
    header = np.array([FLO_MAGIC], "<f4").tobytes() + np.array([w, h], "<i4").tobytes()
    return header + np.ascontiguousarray(flow, dtype="<f4").tobytes()


def decode_flo(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise TruncatedFile("missing .flo magic")
    if np.frombuffer(data[:4], "<f4")[0] != np.float32(FLO_MAGIC):
        raise BadMagic("not a Middlebury .flo file")
    if len(data) < 12:
        raise TruncatedFile("missing .flo dimensions")
    w, h = (int(x) for x in np.frombuffer(data[4:12], "<i4"))
    _check_dims(w, h)
    need = 12 + 8 * w * h
    if len(data) < need:
        raise TruncatedFile(f"expected {need} bytes, got {len(data)}")
    return np.frombuffer(data[12:need], "<f4").reshape(h, w, 2).astype(np.float32)


def write_flo(dst: PathOrFile, flow) -> None:
    """Write an (H, W, 2) flow as little-endian float32 with the .flo header."""
    _write_all(dst, encode_flo(flow))


def read_flo(src: PathOrFile) -> np.ndarray:
    """Read a .flo file into an (H, W, 2) float32 array."""
    return decode_flo(_read_all(src))


# --------------------------------------------------------------------------
# PFM
# --------------------------------------------------------------------------

_PFM_HEADER = re.compile(rb"(P[fF])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s")
_PFM_PARTIAL = re.compile(rb"(P(f(\s+(\d+(\s+(\d+(\s+([-+0-9.eE]+)?)?)?)?)?)?)?)?")


def encode_pfm(field) -> bytes:
    arr = np.asarray(field)
    if arr.ndim != 2:
        raise ValueError(f"PFM writer takes a single-channel (H, W) array, got {arr.shape}")
    h, w = arr.shape
    _check_dims(w, h)
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes()


def decode_pfm(data: bytes) -> np.ndarray:
    m = _PFM_HEADER.match(data)
    if m is None:
        if _PFM_PARTIAL.fullmatch(data):
            raise TruncatedFile("PFM header is incomplete")
        raise BadHeader("not a single-channel PFM header")
    if m.group(1) != b"Pf":
        raise BadHeader("only single-channel 'Pf' files are supported")
    w, h = int(m.group(2)), int(m.group(3))
    _check_dims(w, h)
    try:
        scale = float(m.group(4))
    except ValueError:
        raise BadHeader(f"bad scale {m.group(4)!r}") from None
    if scale == 0 or not math.isfinite(scale):
        raise BadHeader("PFM scale must be non-zero")
    dtype = "<f4" if scale < 0 else ">f4"
    start = m.end()
    need = start + 4 * w * h
    if len(data) < need:
        raise TruncatedFile(f"expected {need} bytes, got {len(data)}")
    rows = np.frombuffer(data[start:need], dtype).reshape(h, w)
    return rows[::-1].astype(np.float32)


def write_pfm(dst: PathOrFile, field) -> None:
    """Write a scalar grid as little-endian PFM (rows stored bottom-up)."""
    _write_all(dst, encode_pfm(field))


def read_pfm(src: PathOrFile) -> np.ndarray:
    """Read a single-channel PFM into a top-down (H, W) float32 array."""
    return decode_pfm(_read_all(src))


# --------------------------------------------------------------------------
# 16-bit PNG disparity
# --------------------------------------------------------------------------

def read_png16_disparity(src: PathOrFile, scale: float = 256.0) -> MaskedField:
    """Disparity stored as ``round(d * scale)`` in a 16-bit PNG; 0 marks invalid."""
    try:
        with Image.open(src if not isinstance(src, Path) else str(src)) as im:
            im.load()
            if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
                raise BadImage(f"expected a 16-bit single-channel PNG, got mode {im.mode}")
            raw = np.array(im)
    except BadImage:
        raise
    except (OSError, ValueError, SyntaxError) as exc:
        raise BadImage(str(exc)) from exc
    raw = raw.astype(np.int64)
    if raw.ndim != 2 or raw.min() < 0 or raw.max() > 65535:
        raise BadImage("pixel values outside the 16-bit range")
    valid = raw > 0
    return MaskedField(np.where(valid, raw / scale, np.nan), valid)


def write_png16_disparity(dst: PathOrFile, disparity, scale: float = 256.0) -> None:
    field = disparity if isinstance(disparity, MaskedField) else MaskedField.from_array(disparity)
    raw = np.zeros(field.shape, dtype=np.uint16)
    vals = np.rint(field.values[field.valid] * scale)
    raw[field.valid] = np.clip(vals, 1, 65535).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(raw).save(buf, format="PNG")
    _write_all(dst, buf.getvalue())


# --------------------------------------------------------------------------
# JSON report
# --------------------------------------------------------------------------

REPORT_KEYS = ("schema_version", "command", "accepted", "stats", "calibration", "metrics", "loss", "rejection_reasons")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def make_report(command: str, accepted: bool = True, **sections) -> dict:
    """Assemble a report document; every declared key is always present."""
    unknown = set(sections) - set(REPORT_KEYS)
    if unknown:
        raise ValueError(f"unknown report sections: {sorted(unknown)}")
    doc = {key: None for key in REPORT_KEYS}
    doc.update(schema_version=SCHEMA_VERSION, command=command, accepted=accepted, stats={}, rejection_reasons=[])
    doc.update({k: v for k, v in sections.items() if v is not None})
    return _clean(doc)


def dump_report(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False)
