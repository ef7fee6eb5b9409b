"""Point clouds, planar poses, and cloud preprocessing.

Frame convention: right-handed, x right, y forward, z up. Poses are SE(2)
transforms acting on the ground plane; z is carried through untouched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

KITTI_RECORD = 16  # 4 x float32 little-endian


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w < 0.0:
        w += 2.0 * math.pi
    w -= math.pi
    # fmod rounding can land exactly on +pi
    return -math.pi if w >= math.pi else w


@dataclass(frozen=True)
class Se2Pose:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        vals = (float(self.x), float(self.y), float(self.yaw))
        if not all(math.isfinite(v) for v in vals):
            raise ParameterError(f"non-finite pose {vals}")
        object.__setattr__(self, "x", vals[0])
        object.__setattr__(self, "y", vals[1])
        object.__setattr__(self, "yaw", wrap_angle(vals[2]))

    @classmethod
    def identity(cls) -> "Se2Pose":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Se2Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def compose(self, other: "Se2Pose") -> "Se2Pose":
        """self * other, i.e. apply `other` first."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Se2Pose(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    __matmul__ = compose

    def inverse(self) -> "Se2Pose":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Se2Pose(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)

    def apply(self, xy: np.ndarray) -> np.ndarray:
        """Transform an (N, 2) array of planar points."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        xy = np.asarray(xy, dtype=np.float64)
        out = np.empty_like(xy)
        out[:, 0] = c * xy[:, 0] - s * xy[:, 1] + self.x
        out[:, 1] = s * xy[:, 0] + c * xy[:, 1] + self.y
        return out

    def translation_norm(self) -> float:
        return math.hypot(self.x, self.y)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """Immutable (N, 3) float64 points plus optional intensities in [0, 1]."""

    xyz: np.ndarray
    intensity: np.ndarray | None = field(default=None)

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64).reshape(-1, 3)
        bad = ~np.isfinite(xyz).all(axis=1)
        if bad.any():
            raise FormatError(f"non-finite coordinates at point index {int(np.flatnonzero(bad)[0])}")
        object.__setattr__(self, "xyz", _readonly(xyz))
        if self.intensity is not None:
            inten = np.clip(np.array(self.intensity, dtype=np.float64).reshape(-1), 0.0, 1.0)
            if len(inten) != len(xyz):
                raise FormatError("intensity length does not match point count")
            object.__setattr__(self, "intensity", _readonly(inten))

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))

    def subset(self, mask: np.ndarray) -> "PointCloud":
        inten = None if self.intensity is None else self.intensity[mask]
        return PointCloud(self.xyz[mask], inten)


def load_cloud(path: str | Path, fmt: str = "kitti_bin") -> PointCloud:
    path = Path(path)
    if fmt == "kitti_bin":
        raw = path.read_bytes()
        if len(raw) % KITTI_RECORD:
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of {KITTI_RECORD}")
        rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
        if not np.isfinite(rec[:, 3]).all():
            raise FormatError(f"{path}: non-finite intensity")
        return PointCloud(rec[:, :3], rec[:, 3])
    if fmt == "xyz_text":
        rows = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise FormatError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts] + ([] if len(parts) == 4 else [math.nan]))
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
        if not rows:
            return PointCloud.empty()
        arr = np.array(rows)
        has_i = ~np.isnan(arr[:, 3])
        inten = arr[:, 3] if has_i.all() else None
        return PointCloud(arr[:, :3], inten)
    raise ParameterError(f"unknown cloud format {fmt!r}")


def save_cloud(cloud: PointCloud, path: str | Path) -> None:
    """Write KITTI velodyne binary (intensity 0 if absent)."""
    rec = np.zeros((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.xyz
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    Path(path).write_bytes(rec.tobytes())


def voxel_filter(cloud: PointCloud, leaf: float) -> PointCloud:
    """Replace the points of every occupied leaf-sized cube by their centroid.

    Output is ordered by cell index, so it does not depend on input order
    beyond floating-point summation.
    """
    if not leaf > 0:
        raise ParameterError(f"leaf must be > 0, got {leaf}")
    if len(cloud) == 0:
        return cloud
    cells = np.floor(cloud.xyz / leaf).astype(np.int64)
    _, inv, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    n = len(counts)
    xyz = np.zeros((n, 3))
    for k in range(3):
        xyz[:, k] = np.bincount(inv, weights=cloud.xyz[:, k], minlength=n)
    xyz /= counts[:, None]
    inten = None
    if cloud.intensity is not None:
        inten = np.bincount(inv, weights=cloud.intensity, minlength=n) / counts
    return PointCloud(xyz, inten)


def crop_cloud(cloud: PointCloud, half_extent_d: float, z_min: float = -3.0, z_max: float = 10.0) -> PointCloud:
    """Keep points with |x| <= D, |y| <= D and z in [z_min, z_max]."""
    if not half_extent_d > 0:
        raise ParameterError(f"half_extent_d must be > 0, got {half_extent_d}")
    if z_min > z_max:
        raise ParameterError("z_min > z_max")
    p = cloud.xyz
    keep = (np.abs(p[:, 0]) <= half_extent_d) & (np.abs(p[:, 1]) <= half_extent_d)
    keep &= (p[:, 2] >= z_min) & (p[:, 2] <= z_max)
    return cloud.subset(keep)


def transform_cloud(cloud: PointCloud, pose: Se2Pose) -> PointCloud:
    if pose == Se2Pose.identity():
        return cloud
    xyz = cloud.xyz.copy()
    xyz[:, :2] = pose.apply(cloud.xyz[:, :2])
    return PointCloud(xyz, cloud.intensity)
