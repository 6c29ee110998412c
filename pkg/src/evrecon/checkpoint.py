"""Named-tensor container files and model checkpoints.

Layout (little-endian): ``b"HE2V"``, u32 version (=1), u32 count, then per
tensor: u32 name length, UTF-8 name, u32 ndim, u32 dims[ndim], f32 data in
row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

MAGIC = b"HE2V"
VERSION = 1


def save_tensors(path, tensors):
    """Write a ``{name: array}`` mapping (insertion order is preserved)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ParseError(f"{path}: not a tensor container (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported container version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            if off + 4 * size > len(data):
                raise ParseError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).copy()
            off += 4 * size
    except struct.error:
        raise ParseError(f"{path}: truncated container") from None
    return out


def manifest_path(path):
    return Path(str(path) + ".manifest")


def save_model(path, model):
    save_tensors(path, model.state_dict())
    manifest_path(path).write_text(f"arch=hypere2vid bins={model.bins} base={model.base}\n", encoding="ascii")


def read_manifest(path):
    mp = manifest_path(path)
    if not mp.exists():
        raise ContractError(f"missing manifest {mp}")
    fields = dict(kv.split("=", 1) for kv in mp.read_text(encoding="ascii").split())
    if fields.get("arch") != "hypere2vid":
        raise ContractError(f"{mp}: unsupported arch {fields.get('arch')!r}")
    return fields


def load_model(path):
    from .net import HyperE2VID

    fields = read_manifest(path)
    model = HyperE2VID(bins=int(fields.get("bins", 5)), base=int(fields.get("base", 32)))
    model.load_state_dict(load_tensors(path))
    return model.eval()
