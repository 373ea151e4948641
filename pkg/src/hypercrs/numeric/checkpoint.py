"""Binary checkpoint format.

Layout (little-endian): magic ``MHIM``, u32 version, u32 tensor count, then
per tensor: u32 name length, UTF-8 name, u8 dtype code (0=f32, 1=f64),
u8 rank, u64 dims[rank], row-major payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MHIM"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def dumps(tensors):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        arr = np.asarray(getattr(arr, "data", arr))
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def loads(buf):
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            if code not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(buf):
                raise CheckpointError(f"{name}: truncated payload")
            arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
            out[name] = arr.reshape(dims).astype(dt.newbyteorder("="))
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save_checkpoint(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
