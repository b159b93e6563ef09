"""Named-tensor checkpoint files.

Layout (little-endian)::

    8s   magic b"MMAECKPT"
    u32  format version (=1)
    u32  metadata length, then that many bytes of UTF-8 JSON
    u32  tensor count
    per tensor:
        u16 name length, name (UTF-8)
        u8  dtype code (0=f32, 1=f64, 2=i64, 3=i32, 4=u8)
        u8  ndim, then ndim x u32 dims
        raw values, row-major
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MMAECKPT"
VERSION = 1
_DTYPES = [np.dtype("<f4"), np.dtype("<f8"), np.dtype("<i8"), np.dtype("<i4"), np.dtype("u1")]


class IncompatibleCheckpoint(ValueError):
    pass


def _code(arr: np.ndarray) -> int:
    for i, dt in enumerate(_DTYPES):
        if arr.dtype == dt.newbyteorder("="):
            return i
    raise TypeError(f"unsupported dtype {arr.dtype}")


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.array(arr, order="C", copy=True)  # ascontiguousarray would promote 0-d to 1-d
        code = _code(arr)
        raw_name = name.encode()
        buf.write(struct.pack("<H", len(raw_name)) + raw_name)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(_DTYPES[code], copy=False).tobytes())
    return buf.getvalue()


def loads(raw: bytes) -> tuple[dict, dict]:
    if raw[:8] != MAGIC:
        raise IncompatibleCheckpoint("not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise IncompatibleCheckpoint(f"checkpoint version {version} unsupported")
    off = 16
    meta = json.loads(raw[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(shape)
        off += n * dt.itemsize
        tensors[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    return tensors, meta


def save(path, tensors: dict, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict, dict]:
    return loads(Path(path).read_bytes())
