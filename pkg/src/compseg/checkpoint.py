"""Named-tensor container used for model and optimizer checkpoints.

Layout: the magic ``b"CSEG1"``, then little-endian ``u32`` tensor count,
then per tensor ``u16`` name length, UTF-8 name, ``u8`` dtype code, ``u8``
rank, ``u32`` dims[rank] and the raw element bytes. Tensors are written in
lexicographic name order. Dtype codes: 0 = f32, 1 = f64, 2 = i64.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"CSEG1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if not buf.startswith(MAGIC):
        raise CheckpointError("not a CSEG1 checkpoint")
    off = len(MAGIC)
    try:
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            dt = DTYPES.get(code)
            if dt is None:
                raise CheckpointError(f"unknown dtype code {code} for {name}")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(buf):
                raise CheckpointError(f"truncated data for {name}")
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize,
                                      offset=off).reshape(dims).astype(dt.newbyteorder("="))
            off += nbytes
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if off != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(tensors))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
