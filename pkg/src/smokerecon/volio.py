"""Binary volume, ray and image file formats.

Volume files start with a 32-byte little-endian header::

    magic  b"SFVOL01\\0"    8 bytes
    nx ny nz               3 x u32
    channels               u32 (1 scalar, 3 staggered)
    h                      f32
    reserved               4 bytes

followed by float32 payload in x-fastest order; staggered components are
concatenated x, y, z.  Images reuse the format with ``nz == 1``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .grid import GridDims, StaggeredField

VOLUME_MAGIC = b"SFVOL01\0"
RAY_MAGIC = b"SFRAY01\0"
_HEADER = struct.Struct("<8s4If4x")


class FormatError(ValueError):
    pass


def _pack_array(a: np.ndarray) -> bytes:
    return np.asarray(a, dtype="<f4").ravel(order="F").tobytes()


def write_volume(path, data, h: float = 1.0) -> None:
    """Write a scalar array or a :class:`StaggeredField`."""
    if isinstance(data, StaggeredField):
        nx, ny, nz = data.dims.shape
        header = _HEADER.pack(VOLUME_MAGIC, nx, ny, nz, 3, data.dims.h)
        payload = b"".join(_pack_array(c) for c in data.components)
    else:
        a = np.asarray(data)
        if a.ndim == 2:
            a = a[:, :, None]
        nx, ny, nz = a.shape
        header = _HEADER.pack(VOLUME_MAGIC, nx, ny, nz, 1, h)
        payload = _pack_array(a)
    Path(path).write_bytes(header + payload)


def read_volume_header(buf: bytes) -> tuple[tuple[int, int, int], int, float]:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated volume header")
    magic, nx, ny, nz, channels, h = _HEADER.unpack_from(buf)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"bad volume magic {magic!r}")
    if channels not in (1, 3):
        raise FormatError(f"unsupported channel count {channels}")
    return (nx, ny, nz), channels, float(h)


def read_volume(path):
    """Return a float64 array (scalar volumes) or a :class:`StaggeredField`."""
    buf = Path(path).read_bytes()
    shape, channels, h = read_volume_header(buf)
    payload = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    if channels == 1:
        n = int(np.prod(shape))
        if payload.size != n:
            raise FormatError(f"payload holds {payload.size} values, expected {n}")
        return payload.reshape(shape, order="F")
    dims = GridDims(*shape, h=h)
    comps = []
    start = 0
    for s in dims.face_shapes:
        n = int(np.prod(s))
        comps.append(payload[start:start + n].reshape(s, order="F"))
        start += n
    if start != payload.size:
        raise FormatError("staggered payload size mismatch")
    return StaggeredField(dims, *comps)


def read_volume_h(path) -> float:
    with open(path, "rb") as f:
        return read_volume_header(f.read(_HEADER.size))[2]


def write_image(path, image: np.ndarray) -> None:
    """Store a 2-D image ``(width, height)`` as an ``nz == 1`` volume or PFM."""
    path = Path(path)
    if path.suffix == ".pfm":
        write_pfm(path, image)
    else:
        write_volume(path, np.asarray(image)[:, :, None])


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".pfm":
        return read_pfm(path)
    if path.suffix == ".pgm":
        return read_pgm(path)
    a = read_volume(path)
    if isinstance(a, StaggeredField) or a.shape[2] != 1:
        raise FormatError(f"{path} is not a single-slice image volume")
    return a[:, :, 0]


def write_pfm(path, image: np.ndarray) -> None:
    """Greyscale PFM; image indexed ``[x, y]`` with y up (PFM rows run bottom-up)."""
    img = np.asarray(image, dtype="<f4")
    w, hgt = img.shape
    header = f"Pf\n{w} {hgt}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + img.T.tobytes())


def read_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0].strip() != b"Pf":
        raise FormatError("only greyscale PFM is supported")
    w, hgt = (int(v) for v in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(parts[3], dtype=dtype, count=w * hgt)
    return data.reshape(hgt, w).T.astype(np.float64)


def write_pgm(path, image: np.ndarray, peak: float | None = None) -> None:
    """8-bit P5 preview, top row first."""
    img = np.asarray(image, dtype=float)
    peak = peak or (img.max() if img.max() > 0 else 1.0)
    q = np.clip(np.round(img / peak * 255), 0, 255).astype(np.uint8)
    w, hgt = q.shape
    rows = q.T[::-1]
    Path(path).write_bytes(f"P5\n{w} {hgt}\n255\n".encode("ascii") + rows.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos)
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise FormatError("only binary P5 PGM is supported")
    w, hgt, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = np.uint8 if maxval < 256 else ">u2"
    data = np.frombuffer(buf, dtype=dtype, offset=pos + 1, count=w * hgt)
    return (data.reshape(hgt, w)[::-1].T / maxval).astype(np.float64)


def write_rays(path, origins: np.ndarray, directions: np.ndarray) -> None:
    origins = np.asarray(origins, dtype="<f4").reshape(-1, 3)
    directions = np.asarray(directions, dtype="<f4").reshape(-1, 3)
    if origins.shape != directions.shape:
        raise FormatError("origin and direction counts differ")
    body = np.hstack([origins, directions]).astype("<f4").tobytes()
    Path(path).write_bytes(RAY_MAGIC + struct.pack("<I", origins.shape[0]) + body)


def read_rays(path) -> tuple[np.ndarray, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != RAY_MAGIC:
        raise FormatError(f"bad ray file magic {buf[:8]!r}")
    (n,) = struct.unpack_from("<I", buf, 8)
    data = np.frombuffer(buf, dtype="<f4", offset=12, count=6 * n).reshape(n, 6)
    return data[:, :3].astype(np.float64), data[:, 3:].astype(np.float64)
