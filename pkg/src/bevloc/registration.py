"""Keypoints, descriptor matching and SE(2) estimation between BEV images.

Pixel transforms follow the form
    u' =  cos(t) u + sin(t) v + t_u
    v' = -sin(t) u + cos(t) v + t_v
in raw (column, row) coordinates, mapping query pixels onto the matched
image. Since rows grow downward, t is also the counter-clockwise yaw of the
corresponding metric transform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, NoConsensusError, ParameterError
from .geom import Se2Pose, wrap_angle

# 16-pixel Bresenham circle of radius 3, clockwise from the top, as (du, dv)
CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])
ARC = 9


@dataclass(frozen=True)
class Keypoint:
    u: float
    v: float
    score: float


def fast_scores(pixels: np.ndarray, arc: int = ARC) -> np.ndarray:
    """Largest threshold at which each pixel still passes the arc segment test.

    Border pixels (within 3 of the edge) score 0.
    """
    img = np.asarray(pixels, dtype=np.float64)
    h, w = img.shape
    scores = np.zeros((h, w))
    if h < 7 or w < 7:
        return scores
    centre = img[3 : h - 3, 3 : w - 3]
    ring = np.stack([img[3 + dv : h - 3 + dv, 3 + du : w - 3 + du] for du, dv in CIRCLE])
    best = np.full(centre.shape, -np.inf)
    for diff in (ring - centre, centre - ring):
        wrapped = np.concatenate([diff, diff[: arc - 1]])
        for start in range(16):
            best = np.maximum(best, wrapped[start : start + arc].min(axis=0))
    scores[3 : h - 3, 3 : w - 3] = np.maximum(best, 0.0)
    return scores


def detect_fast(img, threshold: float = 0.06, nms_radius: int = 3, max_kp: int = 500) -> list[Keypoint]:
    """FAST-9 corners with greedy radius NMS, ordered by score then row-major."""
    if not 0 < threshold <= 1:
        raise ParameterError(f"threshold must be in (0, 1], got {threshold}")
    pixels = np.asarray(getattr(img, "pixels", img))
    scores = fast_scores(pixels)
    vs, us = np.nonzero(scores > threshold)
    if len(vs) == 0:
        return []
    s = scores[vs, us]
    order = np.lexsort((us, vs, -s))
    taken = np.zeros(scores.shape, dtype=bool)
    h, w = scores.shape
    r = int(nms_radius)
    dv, du = np.mgrid[-r : r + 1, -r : r + 1]
    disk = (du * du + dv * dv) <= r * r
    out = []
    for idx in order:
        v, u = int(vs[idx]), int(us[idx])
        if taken[v, u]:
            continue
        out.append(Keypoint(float(u), float(v), float(s[idx])))
        if len(out) >= max_kp:
            break
        if r > 0:
            v0, v1, u0, u1 = max(v - r, 0), min(v + r + 1, h), max(u - r, 0), min(u + r + 1, w)
            taken[v0:v1, u0:u1] |= disk[v0 - v + r : v1 - v + r, u0 - u + r : u1 - u + r]
    return out


def keypoints_array(kps) -> np.ndarray:
    """(N, 3) rows of u, v, score."""
    return np.array([[k.u, k.v, k.score] for k in kps], dtype=np.float64).reshape(-1, 3)


def _as_matrix(descs) -> np.ndarray:
    if isinstance(descs, np.ndarray):
        return descs.astype(np.float64, copy=False)
    descs = list(descs)
    if not descs:
        return np.zeros((0, 0))
    return np.array([getattr(d, "vector", d) for d in descs], dtype=np.float64)


def pairwise_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def match_descriptors(q, db) -> list[tuple[int, int, float]]:
    """Mutual nearest neighbours under L2; ties go to the lower index."""
    a, b = _as_matrix(q), _as_matrix(db)
    if len(a) == 0 or len(b) == 0:
        return []
    if a.shape[1] != b.shape[1]:
        raise ParameterError(f"descriptor dims differ: {a.shape[1]} vs {b.shape[1]}")
    d2 = pairwise_sq_dist(a, b)
    fwd = d2.argmin(axis=1)
    back = d2.argmin(axis=0)
    pairs = []
    for i, j in enumerate(fwd):
        if back[j] == i:
            pairs.append((i, int(j), float(math.sqrt(d2[i, j]))))
    return pairs


# ---------------------------------------------------------------- RANSAC


@dataclass
class MatchSet:
    q_uv: np.ndarray  # (N, 2) query pixel coordinates
    db_uv: np.ndarray  # (N, 2) matched-image pixel coordinates
    distances: np.ndarray  # (N,) descriptor distances
    inliers: np.ndarray  # (N,) bool
    t_u: float = 0.0
    t_v: float = 0.0
    theta: float = 0.0
    image_size: int = 200
    iterations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.sum())

    def apply(self, uv: np.ndarray) -> np.ndarray:
        return apply_pixel_transform(self.t_u, self.t_v, self.theta, uv)


def apply_pixel_transform(t_u: float, t_v: float, theta: float, uv: np.ndarray) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    c, s = math.cos(theta), math.sin(theta)
    return np.stack([c * uv[:, 0] + s * uv[:, 1] + t_u, -s * uv[:, 0] + c * uv[:, 1] + t_v], axis=1)


def fit_rigid_2d(src: np.ndarray, dst: np.ndarray) -> tuple[float, float, float]:
    """Least-squares rotation + translation (no scale); returns (t_u, t_v, theta)."""
    sm, dm = src.mean(0), dst.mean(0)
    s, d = src - sm, dst - dm
    phi = math.atan2(float((s[:, 0] * d[:, 1] - s[:, 1] * d[:, 0]).sum()), float((s * d).sum()))
    theta = -phi  # the pixel-transform matrix is R(-theta)
    c, sn = math.cos(theta), math.sin(theta)
    t_u = dm[0] - (c * sm[0] + sn * sm[1])
    t_v = dm[1] - (-sn * sm[0] + c * sm[1])
    return float(t_u), float(t_v), wrap_angle(theta)


def _residuals(t_u, t_v, theta, src, dst):
    return np.linalg.norm(apply_pixel_transform(t_u, t_v, theta, src) - dst, axis=1)


def ransac_se2(pairs, inlier_tol: float = 2.0, max_iters: int = 1000, seed: int = 0, confidence: float = 0.99, min_inliers: int = 4, image_size: int = 200) -> MatchSet:
    """2-point RANSAC for a rigid pixel transform, then a Procrustes refit on inliers.

    `pairs` is either a (q_uv, db_uv[, distances]) tuple of arrays or a
    sequence of ((u, v), (u', v')[, dist]) entries. Iterations are drawn up
    front and scanned in order, so the adaptive stop is seed-deterministic.
    """
    src, dst, dist = _unpack_pairs(pairs)
    n = len(src)
    if n < 2:
        raise InsufficientDataError(f"RANSAC needs at least 2 pairs, got {n}")
    rng = np.random.default_rng(seed)

    # degenerate draws (points < 1 px apart) are discarded and redrawn
    chosen_i, chosen_j = [], []
    need = max_iters
    for _ in range(10):
        m = 2 * need + 16
        i = rng.integers(n, size=m)
        j = rng.integers(n - 1, size=m)
        j = j + (j >= i)
        ok = (np.linalg.norm(src[i] - src[j], axis=1) >= 1.0) & (np.linalg.norm(dst[i] - dst[j], axis=1) >= 1.0)
        chosen_i.append(i[ok][:need])
        chosen_j.append(j[ok][:need])
        need -= int(min(ok.sum(), need))
        if need == 0:
            break
    i, j = np.concatenate(chosen_i), np.concatenate(chosen_j)
    if len(i) == 0:
        raise NoConsensusError("all minimal samples are degenerate", 0)

    a, b = src[j] - src[i], dst[j] - dst[i]
    phi = np.arctan2(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0], (a * b).sum(1))
    theta = -phi
    c, s = np.cos(theta), np.sin(theta)
    t_u = dst[i, 0] - (c * src[i, 0] + s * src[i, 1])
    t_v = dst[i, 1] - (-s * src[i, 0] + c * src[i, 1])
    pu = c[:, None] * src[None, :, 0] + s[:, None] * src[None, :, 1] + t_u[:, None]
    pv = -s[:, None] * src[None, :, 0] + c[:, None] * src[None, :, 1] + t_v[:, None]
    counts = (np.hypot(pu - dst[None, :, 0], pv - dst[None, :, 1]) <= inlier_tol).sum(1)

    best_k, best_count, used = 0, -1, len(counts)
    log_fail = math.log(max(1.0 - confidence, 1e-12))
    for k, cnt in enumerate(counts):
        if cnt > best_count:
            best_k, best_count = k, int(cnt)
        ratio = best_count / n
        if ratio >= 1.0:
            used = k + 1
            break
        if ratio > 0:
            p_good = ratio * ratio
            required = log_fail / math.log(1.0 - p_good) if p_good < 1 else 1
            if k + 1 >= required:
                used = k + 1
                break
    if best_count < min_inliers:
        raise NoConsensusError(f"best model has {best_count} inliers (< {min_inliers})", best_count)

    model = (float(t_u[best_k]), float(t_v[best_k]), wrap_angle(float(theta[best_k])))
    mask = _residuals(*model, src, dst) <= inlier_tol
    for _ in range(10):
        model = fit_rigid_2d(src[mask], dst[mask])
        new_mask = _residuals(*model, src, dst) <= inlier_tol
        if new_mask.sum() < min_inliers or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    if mask.sum() < min_inliers:
        raise NoConsensusError(f"refit left {int(mask.sum())} inliers", int(mask.sum()))
    return MatchSet(src, dst, dist, mask, model[0], model[1], model[2], image_size, used)


def _unpack_pairs(pairs):
    if isinstance(pairs, tuple) and len(pairs) in (2, 3) and isinstance(pairs[0], np.ndarray):
        src = np.asarray(pairs[0], dtype=np.float64).reshape(-1, 2)
        dst = np.asarray(pairs[1], dtype=np.float64).reshape(-1, 2)
        dist = np.asarray(pairs[2], dtype=np.float64) if len(pairs) == 3 else np.zeros(len(src))
        return src, dst, dist
    pairs = list(pairs)
    src = np.array([p[0] for p in pairs], dtype=np.float64).reshape(-1, 2)
    dst = np.array([p[1] for p in pairs], dtype=np.float64).reshape(-1, 2)
    dist = np.array([p[2] if len(p) > 2 else 0.0 for p in pairs], dtype=np.float64)
    return src, dst, dist


# ---------------------------------------------------------------- poses


def recover_metric_pose(m: MatchSet, g: float) -> Se2Pose:
    """Metric transform taking query-sensor coordinates into the matched frame.

    With F = diag(1, -1) and c the image-centre pixel, pixel p relates to
    metric w by p = F w / g + c, so p' = A p + t becomes
    w' = R(theta) w + g F ((A - I) c + t).
    """
    c0 = (m.image_size - 1) / 2.0
    c, s = math.cos(m.theta), math.sin(m.theta)
    bu = (c - 1.0) * c0 + s * c0 + m.t_u
    bv = -s * c0 + (c - 1.0) * c0 + m.t_v
    return Se2Pose(g * bu, -g * bv, m.theta)


def compose_global(t_m: Se2Pose, t_mq: Se2Pose) -> Se2Pose:
    """Map-frame pose of the query: T_q = T_m T_mq."""
    return t_m.compose(t_mq)
