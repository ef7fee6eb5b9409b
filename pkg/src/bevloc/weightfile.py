"""`BVW1` binary weight files: backbone blocks plus optional VLAD and PCA sections.

Layout (little-endian):
    b"BVW1", u32 block count,
    per block: u8 kind, u32 x 4 shape (unused dims 0), f32 data,
    u8 has_vlad [u32 K, u32 C, f32 centers K*C, f32 w K*C, f32 b K],
    u8 has_pca [u32 D, u32 out, f32 mean D, f32 components out*D, f32 ratios out],
    u32 CRC32 of everything before it.
"""
from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from .backbone import WeightSet
from .errors import FormatError
from .vlad import PcaProjection, VladParams

MAGIC = b"BVW1"


def _f32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def dumps_weights(w: WeightSet, include_vlad: bool = True, include_pca: bool = True) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(w.blocks)))
    for kind, arr in w.blocks:
        shape = list(arr.shape) + [0] * (4 - arr.ndim)
        buf.write(struct.pack("<B4I", kind, *shape))
        buf.write(_f32(arr))
    vlad = w.vlad if include_vlad else None
    if vlad is not None:
        buf.write(struct.pack("<BII", 1, vlad.k, vlad.dim))
        buf.write(_f32(vlad.centers) + _f32(vlad.w) + _f32(vlad.b))
    else:
        buf.write(b"\x00")
    pca = w.pca if include_pca else None
    if pca is not None:
        buf.write(struct.pack("<BII", 1, pca.components.shape[1], pca.out_dim))
        buf.write(_f32(pca.mean) + _f32(pca.components) + _f32(pca.explained_variance_ratio))
    else:
        buf.write(b"\x00")
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("weight blob truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, *shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)


def loads_weights(data: bytes, source: str = "<bytes>") -> WeightSet:
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError(f"{source}: missing BVW1 magic")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{source}: CRC mismatch, file is corrupt")
    r = _Reader(body)
    r.take(4)
    (count,) = r.unpack("<I")
    blocks = []
    for _ in range(count):
        kind, *shape = r.unpack("<B4I")
        shape = tuple(s for s in shape if s > 0)
        blocks.append((kind, r.floats(*shape)))
    vlad = pca = None
    (has_vlad,) = r.unpack("<B")
    if has_vlad:
        k, c = r.unpack("<II")
        vlad = VladParams(r.floats(k, c), r.floats(k, c), r.floats(k), provenance=f"loaded({source})")
    (has_pca,) = r.unpack("<B")
    if has_pca:
        d, out = r.unpack("<II")
        mean = r.floats(d).astype(np.float64)
        comps = r.floats(out, d).astype(np.float64)
        ratios = r.floats(out).astype(np.float64)
        pca = PcaProjection(mean, comps, ratios)
    if r.pos != len(body):
        raise FormatError(f"{source}: {len(body) - r.pos} trailing bytes")
    return WeightSet(blocks, provenance=f"loaded({source})", vlad=vlad, pca=pca)


def save_weights(w: WeightSet, path: str | Path) -> None:
    Path(path).write_bytes(dumps_weights(w))


def load_weights(path: str | Path) -> WeightSet:
    path = Path(path)
    return loads_weights(path.read_bytes(), str(path))
