"""Binary checkpoint container.

Layout (all integers unsigned 64-bit little-endian)::

    b"DCGP"  version:u8
    config_len  config bytes (UTF-8 JSON)
    tensor_count
    per tensor: name_len name(UTF-8)  rank  dims[rank]  float64 data (C order, little-endian)
"""
import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"DCGP"
VERSION = 1
_U64 = struct.Struct("<Q")


def _pack_bytes(b):
    return _U64.pack(len(b)) + b


def dumps(config, tensors):
    """Serialize a JSON-able ``config`` dict and named float64 arrays."""
    out = [MAGIC, bytes([VERSION]), _pack_bytes(json.dumps(config, sort_keys=True).encode("utf-8"))]
    out.append(_U64.pack(len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        out.append(_pack_bytes(name.encode("utf-8")))
        out.append(_U64.pack(arr.ndim))
        out.extend(_U64.pack(d) for d in arr.shape)
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def loads(blob):
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a DCGP checkpoint (bad magic)")
    if len(view) < 5 or view[4] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {view[4] if len(view) > 4 else None}")
    pos = 5

    def u64():
        nonlocal pos
        if pos + 8 > len(view):
            raise CheckpointError("truncated checkpoint")
        (v,) = _U64.unpack_from(view, pos)
        pos += 8
        return v

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    config = json.loads(take(u64()).decode("utf-8"))
    tensors = {}
    for _ in range(u64()):
        name = take(u64()).decode("utf-8")
        dims = tuple(u64() for _ in range(u64()))
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return config, tensors


def save(path, config, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(config, tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
