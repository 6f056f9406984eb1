"""Binary PPM (P6) and PGM (P5) reading and writing, maxval 255 only."""

from __future__ import annotations

import os

import numpy as np


class NetpbmError(ValueError):
    pass


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` header tokens and the offset of the raster."""
    toks: list[bytes] = []
    i = 0
    n = len(buf)
    while len(toks) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise NetpbmError("truncated header")
        toks.append(buf[start:i])
    # exactly one whitespace byte separates maxval from the raster
    if i >= n or not buf[i:i + 1].isspace():
        raise NetpbmError("missing whitespace after header")
    return toks, i + 1


def decode(buf: bytes) -> np.ndarray:
    """Decode to uint8, (H, W, 3) for P6 and (H, W) for P5."""
    toks, off = _tokens(buf, 4)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise NetpbmError("malformed header") from exc
    if width < 1 or height < 1:
        raise NetpbmError(f"bad size {width}x{height}")
    if maxval != 255:
        raise NetpbmError(f"maxval must be 255, got {maxval}")
    chans = 3 if magic == b"P6" else 1
    need = width * height * chans
    raster = buf[off:off + need]
    if len(raster) != need:
        raise NetpbmError(f"raster has {len(raster)} bytes, expected {need}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    if chans == 3:
        return arr.reshape(height, width, 3).copy()
    return arr.reshape(height, width).copy()


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise NetpbmError("raster must be uint8")
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise NetpbmError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def read(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def write(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Quantise values in [0, 1] to 0..255 by rounding."""
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_ppm(path) -> np.ndarray:
    """RGB image as (3, H, W) float32 in [0, 1]."""
    arr = read(path)
    if arr.ndim != 3:
        raise NetpbmError(f"{path} is not a PPM image")
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) image with values in [0, 1]."""
    write(path, to_uint8(np.asarray(image).transpose(1, 2, 0)))


def read_mask(path) -> np.ndarray:
    """Binary mask PGM (values 0/255) as (1, H, W) uint8 in {0, 1}."""
    arr = read(path)
    if arr.ndim != 2:
        raise NetpbmError(f"{path} is not a PGM image")
    if not np.isin(arr, (0, 255)).all():
        raise NetpbmError(f"{path} is not a binary mask (values other than 0/255)")
    return (arr // 255)[None].astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask).reshape(np.asarray(mask).shape[-2:])
    write(path, (m.astype(np.uint8) * 255))
