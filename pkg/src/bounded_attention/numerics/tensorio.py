"""Binary tensor dumps.

Layout of one dump::

    b"BATTNDMP" | u32 little-endian header length | UTF-8 JSON header | payload

The header is ``{"dtype": ..., "name": ..., "shape": [...]}`` with sorted
keys; the payload is the row-major little-endian array bytes.  Files may hold
several dumps back to back.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

MAGIC = b"BATTNDMP"

_DTYPES = {"f64": "<f8", "f32": "<f4", "i64": "<i8", "i32": "<i4", "u8": "|u1", "bool": "|b1"}
_NAMES = {(np.dtype(v).kind, np.dtype(v).itemsize): k for k, v in _DTYPES.items()}


def dtype_tag(dtype):
    dt = np.dtype(dtype)
    try:
        return _NAMES[(dt.kind, dt.itemsize)]
    except KeyError:
        raise ValueError(f"unsupported dtype {dtype}") from None


def write_tensor(fh, name, array):
    array = np.asarray(array)
    tag = dtype_tag(array.dtype)
    header = json.dumps({"dtype": tag, "name": name, "shape": list(array.shape)}, sort_keys=True)
    hbytes = header.encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(hbytes)))
    fh.write(hbytes)
    fh.write(np.ascontiguousarray(array, dtype=np.dtype(_DTYPES[tag])).tobytes())


def read_tensor(fh):
    """Read one dump; returns ``(name, array)`` or ``None`` at end of file."""
    magic = fh.read(len(MAGIC))
    if not magic:
        return None
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    (hlen,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(hlen).decode("utf-8"))
    dt = np.dtype(_DTYPES[header["dtype"]])
    shape = tuple(header["shape"])
    count = int(np.prod(shape)) if shape else 1
    buf = fh.read(count * dt.itemsize)
    if len(buf) != count * dt.itemsize:
        raise ValueError(f"truncated payload for {header['name']!r}")
    arr = np.frombuffer(buf, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return header["name"], arr


def save_tensors(path, tensors):
    """Write an ordered mapping of name -> array as concatenated dumps."""
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            write_tensor(fh, name, arr)


def load_tensors(path):
    out = {}
    with open(path, "rb") as fh:
        while (item := read_tensor(fh)) is not None:
            out[item[0]] = item[1]
    return out


def dumps(name, array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, name, array)
    return buf.getvalue()
