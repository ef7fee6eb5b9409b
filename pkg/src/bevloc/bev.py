"""Normalized-density bird's-eye-view images.

Pixel convention: column u = floor((x + D) / g), row v = floor((D - y) / g),
so row 0 holds the largest y. Pixel (u, v) centre sits at
x = (u - c0) * g, y = (c0 - v) * g with c0 = (S - 1) / 2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError
from .geom import PointCloud


def image_size(g: float, d: float) -> int:
    # round first: 2 * 40 / 0.4 is not exactly 200 in binary
    return int(math.ceil(round(2.0 * d / g, 9)))


@dataclass(frozen=True)
class BevImage:
    pixels: np.ndarray  # (S, S) float32 in [0, 1]
    grid_size_g: float = 0.4
    half_extent_d: float = 40.0

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def pixel_to_xy(self, uv: np.ndarray) -> np.ndarray:
        """(N, 2) pixel (u, v) to metric (x, y) in the sensor frame."""
        uv = np.asarray(uv, dtype=np.float64)
        c0 = (self.size - 1) / 2.0
        return np.stack([(uv[:, 0] - c0) * self.grid_size_g, (c0 - uv[:, 1]) * self.grid_size_g], axis=1)

    def xy_to_pixel(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        c0 = (self.size - 1) / 2.0
        return np.stack([xy[:, 0] / self.grid_size_g + c0, c0 - xy[:, 1] / self.grid_size_g], axis=1)


def cell_counts(cloud: PointCloud, g: float, d: float) -> np.ndarray:
    """Integer per-cell point counts on the S x S grid."""
    s = image_size(g, d)
    counts = np.zeros((s, s), dtype=np.int64)
    if len(cloud) == 0:
        return counts
    x, y = cloud.xyz[:, 0], cloud.xyz[:, 1]
    inside = (np.abs(x) <= d) & (np.abs(y) <= d)
    u = np.clip(np.floor((x[inside] + d) / g).astype(np.int64), 0, s - 1)
    v = np.clip(np.floor((d - y[inside]) / g).astype(np.int64), 0, s - 1)
    np.add.at(counts, (v, u), 1)
    return counts


def project_bev(cloud: PointCloud, g: float = 0.4, d: float = 40.0, n_m: int = 10) -> BevImage:
    """I(u, v) = min(N_g, N_m) / N_m over the ground-plane grid."""
    if not g > 0 or not d > 0:
        raise ParameterError(f"g and d must be positive, got g={g}, d={d}")
    if n_m < 1:
        raise ParameterError(f"n_m must be >= 1, got {n_m}")
    counts = cell_counts(cloud, g, d)
    pixels = (np.minimum(counts, n_m) / float(n_m)).astype(np.float32)
    return BevImage(pixels, float(g), float(d))


def rasterize_pgm(img: BevImage | np.ndarray) -> bytes:
    """Binary P5 PGM of round(255 * I)."""
    pix = img.pixels if isinstance(img, BevImage) else np.asarray(img)
    h, w = pix.shape
    payload = np.rint(np.clip(pix.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + payload.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    """Parse a P5 PGM written by rasterize_pgm; returns float32 values in [0, 1]."""
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise FormatError("not a binary P5 PGM")
    w, h = (int(t) for t in parts[1].split())
    if int(parts[2]) != 255:
        raise FormatError("only maxval 255 supported")
    payload = parts[3]
    if len(payload) != w * h:
        raise FormatError(f"PGM payload has {len(payload)} bytes, expected {w * h}")
    return (np.frombuffer(payload, dtype=np.uint8).reshape(h, w) / 255.0).astype(np.float32)
