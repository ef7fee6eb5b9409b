"""Per-scan feature extraction shared by database building and localization."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter

from . import backbone as bb
from . import registration as reg
from .bev import BevImage, project_bev
from .config import RunConfig
from .geom import PointCloud, crop_cloud, voxel_filter
from .rem import FeatureMap, descriptors_at, normalize_rows, rem_forward
from .vlad import GlobalDescriptor, VladParams, pool_vlad


@dataclass
class ScanFeatures:
    bev: BevImage
    fmap: FeatureMap
    keypoints: np.ndarray  # (N, 3) u, v, score
    local: np.ndarray  # (N, C) unit descriptors

    @property
    def empty(self) -> bool:
        return not self.bev.pixels.any()


def preprocess(cloud: PointCloud, cfg: RunConfig) -> BevImage:
    """Voxel-downsample at the grid size, crop to the BEV window and rasterize."""
    cloud = voxel_filter(cloud, cfg.g) if len(cloud) else cloud
    cloud = crop_cloud(cloud, cfg.d, cfg.z_min, cfg.z_max)
    return project_bev(cloud, cfg.g, cfg.d, cfg.n_m)


@lru_cache(maxsize=8)
def _disk_mask(side: int) -> np.ndarray:
    c = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side]
    return (np.hypot(xx - c, yy - c) <= side / 2.0).ravel()


def pooling_features(fmap: FeatureMap, disk: bool = True) -> np.ndarray:
    """Unit local features that feed VLAD.

    With `disk` only cells inside the inscribed circle are kept: rotating the
    scan moves structure in and out of the square corners, and those cells
    would otherwise break rotation invariance of the pooled vector.
    """
    feats = normalize_rows(fmap.tensor.reshape(-1, fmap.channels))[0]
    return feats[_disk_mask(fmap.tensor.shape[0])] if disk else feats


def global_descriptor(fmap: FeatureMap, params: VladParams, disk: bool = True) -> GlobalDescriptor:
    return pool_vlad(pooling_features(fmap, disk), params)


def smooth(pixels: np.ndarray, sigma: float) -> np.ndarray:
    """Isotropic Gaussian blur with zero fill, applied before the backbone.

    Single-cell poles and walls alias differently at every heading; blurring
    lowers the orientation sensitivity of the random-weight features. The
    kernel is symmetric, so it commutes with quarter-turn rotations.
    """
    pixels = np.asarray(pixels, dtype=np.float32)
    if sigma <= 0:
        return pixels
    return gaussian_filter(pixels, sigma, mode="constant", truncate=4.0)


def feature_map(bev, spec: bb.BackboneSpec, w: bb.WeightSet, cfg: RunConfig) -> FeatureMap:
    return rem_forward(smooth(getattr(bev, "pixels", bev), cfg.blur_sigma), spec, w, cfg.n_r)


def extract(cloud_or_bev, spec: bb.BackboneSpec, w: bb.WeightSet, cfg: RunConfig) -> ScanFeatures:
    bev = cloud_or_bev if isinstance(cloud_or_bev, BevImage) else preprocess(cloud_or_bev, cfg)
    fmap = feature_map(bev, spec, w, cfg)
    kps = reg.keypoints_array(reg.detect_fast(bev, cfg.fast_threshold, cfg.nms_radius, cfg.max_keypoints))
    if len(kps):
        local, degenerate = descriptors_at(fmap, kps[:, :2], bev.size)
        kps, local = kps[~degenerate], local[~degenerate]
    else:
        local = np.zeros((0, fmap.channels))
    return ScanFeatures(bev, fmap, kps.reshape(-1, 3), local.astype(np.float32))


def candidate_pairs(q_local: np.ndarray, db_local: np.ndarray, k: int = 3):
    """Each query descriptor paired with its k nearest stored descriptors.

    Returns (query index, stored index, distance) arrays ordered by query
    index then rank; ties broken toward the lower stored index.
    """
    if len(q_local) == 0 or len(db_local) == 0:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    d2 = reg.pairwise_sq_dist(np.asarray(q_local, np.float64), np.asarray(db_local, np.float64))
    k = min(k, d2.shape[1])
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    qi = np.repeat(np.arange(len(q_local)), k)
    di = nn.ravel()
    return qi, di, np.sqrt(d2[qi, di])


def register_arrays(q_kps, q_local, db_kps, db_local, size: int, cfg: RunConfig) -> reg.MatchSet:
    """RANSAC pixel transform taking query keypoints onto the stored image."""
    qi, di, dist = candidate_pairs(q_local, db_local, cfg.match_candidates)
    pairs = (np.asarray(q_kps, np.float64)[qi, :2], np.asarray(db_kps, np.float64)[di, :2], dist)
    return reg.ransac_se2(pairs, cfg.ransac_tol, cfg.ransac_iters, cfg.ransac_seed, cfg.ransac_confidence,
                          cfg.min_inliers, size)


def register(q: ScanFeatures, db_kps: np.ndarray, db_local: np.ndarray, cfg: RunConfig) -> reg.MatchSet:
    return register_arrays(q.keypoints, q.local, db_kps, db_local, q.bev.size, cfg)
