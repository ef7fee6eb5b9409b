"""Seeded synthetic worlds of vertical structures and the scans they produce."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .geom import PointCloud, Se2Pose

SENSOR_HEIGHT = 1.73
SURFACE_DENSITY = 50.0  # points per m^2 of structure surface


@dataclass(frozen=True)
class World:
    points: np.ndarray  # (N, 3) world-frame points, z relative to ground
    landmark_id: np.ndarray  # (N,) index of the structure each point belongs to
    centers: np.ndarray  # (L, 2) structure anchor positions


def _wall(rng, p0, p1, height):
    length = float(np.linalg.norm(p1 - p0))
    n = max(1, int(SURFACE_DENSITY * length * height))
    t = rng.random(n)
    z = rng.random(n) * height
    xy = p0[None, :] + t[:, None] * (p1 - p0)[None, :]
    return np.column_stack([xy, z])


def _pole(rng, c, radius, height):
    n = max(1, int(SURFACE_DENSITY * 2 * math.pi * radius * height))
    a = rng.random(n) * 2 * math.pi
    z = rng.random(n) * height
    return np.column_stack([c[0] + radius * np.cos(a), c[1] + radius * np.sin(a), z])


def _bush(rng, c, radius, height):
    n = max(1, int(SURFACE_DENSITY * 4 * radius * radius))
    xy = c[None, :] + rng.normal(scale=radius / 2, size=(n, 2))
    z = rng.random(n) * height
    return np.column_stack([xy, z])


def make_world(seed: int, area: float, n_landmarks: int) -> World:
    """Random poles, wall segments, box corners and bushes in a square of side `area`."""
    if n_landmarks < 1:
        raise ParameterError("n_landmarks must be >= 1")
    rng = np.random.default_rng(seed)
    chunks, ids, centers = [], [], []
    half = area / 2.0
    for i in range(n_landmarks):
        c = rng.uniform(-half, half, size=2)
        kind = rng.choice(4, p=[0.4, 0.25, 0.2, 0.15])
        if kind == 0:
            pts = _pole(rng, c, rng.uniform(0.1, 0.3), rng.uniform(2.0, 6.0))
        elif kind == 1:
            ang = rng.uniform(0, 2 * math.pi)
            length = rng.uniform(3.0, 12.0)
            d = np.array([math.cos(ang), math.sin(ang)]) * length / 2
            pts = _wall(rng, c - d, c + d, rng.uniform(2.0, 4.0))
        elif kind == 2:
            ang = rng.uniform(0, 2 * math.pi)
            a, b = rng.uniform(2.0, 7.0, size=2)
            d1 = np.array([math.cos(ang), math.sin(ang)])
            d2 = np.array([-d1[1], d1[0]])
            h = rng.uniform(2.0, 5.0)
            pts = np.vstack([_wall(rng, c, c + a * d1, h), _wall(rng, c, c + b * d2, h)])
        else:
            pts = _bush(rng, c, rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5))
        chunks.append(pts)
        ids.append(np.full(len(pts), i))
        centers.append(c)
    return World(np.vstack(chunks), np.concatenate(ids), np.array(centers))


def scan_world(world: World, pose: Se2Pose, d: float = 40.0, noise: float = 0.03, dropout: float = 0.0, rng: np.random.Generator | None = None) -> PointCloud:
    """Points within planar range d of the sensor, in the sensor frame."""
    local = pose.inverse().apply(world.points[:, :2])
    keep = np.hypot(local[:, 0], local[:, 1]) <= d
    xyz = np.column_stack([local[keep], world.points[keep, 2] - SENSOR_HEIGHT])
    if rng is not None:
        if dropout > 0:
            xyz = xyz[rng.random(len(xyz)) >= dropout]
        if noise > 0:
            xyz = xyz + rng.normal(scale=noise, size=xyz.shape)
    return PointCloud(xyz)


def visible_landmarks(world: World, pose: Se2Pose, d: float = 40.0) -> set[int]:
    local = pose.inverse().apply(world.points[:, :2])
    keep = np.hypot(local[:, 0], local[:, 1]) <= d
    return set(np.unique(world.landmark_id[keep]).tolist())


def gen_synthetic_scene(seed: int, area: float, n_landmarks: int, trajectory, d: float = 40.0, noise: float = 0.03, dropout: float = 0.0) -> list[tuple[PointCloud, Se2Pose]]:
    """One scan per trajectory pose.

    Per-frame noise is seeded from (seed, pose) so a frame revisiting the
    same pose yields the same cloud.
    """
    world = make_world(seed, area, n_landmarks)
    out = []
    for pose in trajectory:
        key = np.frombuffer(np.array([pose.x, pose.y, pose.yaw]).tobytes(), dtype=np.uint32)
        rng = np.random.default_rng([seed, *key.tolist()])
        out.append((scan_world(world, pose, d, noise, dropout, rng), pose))
    return out


# ---------------------------------------------------------------- trajectories


def grid_trajectory(n: int, spacing: float, seed: int = 0) -> list[Se2Pose]:
    """n places on a square grid centred at the origin, each with a random heading."""
    side = math.ceil(math.sqrt(n))
    rng = np.random.default_rng(seed)
    off = (side - 1) * spacing / 2.0
    return [Se2Pose(spacing * (i % side) - off, spacing * (i // side) - off, rng.uniform(-math.pi, math.pi))
            for i in range(n)]


def line_trajectory(n: int, step: float) -> list[Se2Pose]:
    """Straight drive along +y, never revisiting a place."""
    off = (n - 1) * step / 2.0
    return [Se2Pose(0.0, i * step - off, 0.0) for i in range(n)]


def loop_trajectory(n: int, step: float, revisit: int = 0) -> list[Se2Pose]:
    """A square circuit of n frames, then `revisit` extra frames retracing its start."""
    per_side = max(n // 4, 1)
    half = per_side * step / 2.0
    corners = [(-half, -half), (half, -half), (half, half), (-half, half)]
    poses = []
    for i in range(n + revisit):
        k = i % (4 * per_side)
        side, f = divmod(k, per_side)
        (x0, y0), (x1, y1) = corners[side], corners[(side + 1) % 4]
        t = f / per_side
        yaw = math.atan2(y1 - y0, x1 - x0) - math.pi / 2
        poses.append(Se2Pose(x0 + t * (x1 - x0), y0 + t * (y1 - y0), yaw))
    return poses


def world_extent(trajectory, d: float = 40.0) -> float:
    """Side of a square world that covers every scan around the trajectory."""
    xy = np.array([[p.x, p.y] for p in trajectory]).reshape(-1, 2)
    return float(2 * (np.abs(xy).max(initial=0.0) + d + 10.0))
