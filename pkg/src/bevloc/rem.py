"""Rotation-equivariant feature maps and keypoint descriptors.

The map is the element-wise max over rotations r of R_r^-1 phi(R_r I):
rotate the image, run the backbone, rotate the features back, then pool.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from .errors import ParameterError, RangeError

EPS = 1e-12


@dataclass(frozen=True)
class FeatureMap:
    tensor: np.ndarray  # (H', W', C) float32
    stride: int
    n_r: int

    @property
    def channels(self) -> int:
        return self.tensor.shape[2]


@dataclass(frozen=True)
class LocalDescriptor:
    vector: np.ndarray  # unit C-vector, or zeros when degenerate
    u: float
    v: float
    degenerate: bool = False


def rotation_angles(n_r: int) -> list[float]:
    return [2.0 * math.pi * i / n_r for i in range(n_r)]


def rem_forward(img, spec: bb.BackboneSpec, w: bb.WeightSet, n_r: int = 8) -> FeatureMap:
    if n_r < 1:
        raise ParameterError(f"n_r must be >= 1, got {n_r}")
    pixels = np.asarray(getattr(img, "pixels", img), dtype=bb.DTYPE)
    pooled = None
    for r in rotation_angles(n_r):
        feats = bb.forward(bb.rotate_tensor(pixels, r), spec, w)
        back = bb.rotate_tensor(feats, -r)
        pooled = back if pooled is None else np.maximum(pooled, back, out=pooled)
    return FeatureMap(pooled, spec.total_stride, n_r)


def pixel_to_cell(uv: np.ndarray, stride: int) -> np.ndarray:
    """Half-pixel-centred mapping: image centre lands on the feature-map centre."""
    return (np.asarray(uv, dtype=np.float64) + 0.5) / stride - 0.5


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalize rows; zero rows stay zero and are flagged."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    degenerate = norms <= EPS
    out = np.zeros_like(x)
    out[~degenerate] = x[~degenerate] / norms[~degenerate, None]
    return out, degenerate


def descriptors_at(fmap: FeatureMap, uv: np.ndarray, image_size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Unit descriptors (N, C) for BEV pixel coordinates (N, 2), plus degenerate flags."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    limit = image_size if image_size is not None else fmap.tensor.shape[0] * fmap.stride
    if np.any((uv < 0) | (uv > limit - 1)):
        raise RangeError(f"keypoint outside BEV bounds [0, {limit - 1}]")
    if len(uv) == 0:
        return np.zeros((0, fmap.channels)), np.zeros(0, dtype=bool)
    grid = np.clip(pixel_to_cell(uv, fmap.stride), 0.0, fmap.tensor.shape[0] - 1)
    raw = bb.bilinear_sample_many(fmap.tensor.astype(np.float64), grid)
    return normalize_rows(raw)


def descriptor_at(fmap: FeatureMap, u: float, v: float, image_size: int | None = None) -> LocalDescriptor:
    vec, deg = descriptors_at(fmap, np.array([[u, v]]), image_size)
    return LocalDescriptor(vec[0], float(u), float(v), bool(deg[0]))


def feature_distance_profile(img, spec: bb.BackboneSpec, w: bb.WeightSet, n_r: int, displacements, fmap: FeatureMap | None = None, margin: int | None = None) -> list[tuple[int, float]]:
    """Mean descriptor distance between (u, v) and (u + d, v + d) over interior pixels.

    Interior means at least `margin` pixels (default two strides) from the
    border after the largest displacement. The same base positions are used
    for every displacement so rows are comparable. Pairs where either
    descriptor is degenerate are skipped.
    """
    pixels = np.asarray(getattr(img, "pixels", img))
    size = pixels.shape[0]
    disp = [int(d) for d in displacements]
    if fmap is None:
        fmap = rem_forward(pixels, spec, w, n_r)
    dmax = max([abs(d) for d in disp] + [0])
    margin = fmap.stride * 2 if margin is None else int(margin)
    lo, hi = margin + dmax, size - 1 - margin - dmax
    if lo > hi:
        raise ParameterError(f"displacement {dmax} too large for a {size} px image")
    coords = np.arange(lo, hi + 1, dtype=np.float64)
    uu, vv = np.meshgrid(coords, coords)
    base_uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    base, base_deg = descriptors_at(fmap, base_uv, size)
    rows = []
    for d in disp:
        if d == 0:
            rows.append((d, 0.0))
            continue
        other, other_deg = descriptors_at(fmap, base_uv + d, size)
        ok = ~(base_deg | other_deg)
        dist = np.linalg.norm(base[ok] - other[ok], axis=1)
        rows.append((d, float(dist.mean()) if len(dist) else 0.0))
    return rows


def profile_csv(rows) -> str:
    lines = ["delta_px,mean_distance"]
    lines += [f"{d},{m:.9g}" for d, m in rows]
    return "\n".join(lines) + "\n"


def normalized_features(fmap: FeatureMap) -> np.ndarray:
    """Flattened (H'W', C) unit local features, the input to VLAD pooling."""
    return normalize_rows(fmap.tensor.reshape(-1, fmap.channels))[0]
