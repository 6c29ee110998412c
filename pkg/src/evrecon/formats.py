"""Binary PGM frames and FLO2 flow fields."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

FLO2_MAGIC = b"FLO2"


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img):
    """Write a ``[0, 1]`` float image (or uint8) as binary P5, maxval 255."""
    arr = img if np.asarray(img).dtype == np.uint8 else to_uint8(img)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _pgm_tokens(data):
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path):
    """Read a binary P5 file as float64 in ``[0, 1]``."""
    data = Path(path).read_bytes()
    tokens, off = _pgm_tokens(data)
    if tokens[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ParseError(f"{path}: 16-bit PGM is not supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=off).reshape(h, w)
    return pix.astype(np.float64) / maxval


def write_flo2(path, flow):
    """``flow`` is ``(2, H, W)`` (u, v) in pixels."""
    flow = np.asarray(flow, dtype="<f4")
    _, h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLO2_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(flow.transpose(1, 2, 0)).tobytes())


def read_flo2(path):
    data = Path(path).read_bytes()
    if data[:4] != FLO2_MAGIC:
        raise ParseError(f"{path}: bad FLO2 magic")
    w, h = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 8 * w * h:
        raise ParseError(f"{path}: expected {w}x{h} flow, file size {len(data)}")
    uv = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2)
    return uv.transpose(2, 0, 1).astype(np.float64)
