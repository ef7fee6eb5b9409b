"""NetVLAD pooling, k-means cluster fitting, PCA compression and the lazy triplet loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, StructuralError

log = logging.getLogger(__name__)

DEFAULT_K = 64
DEFAULT_SHARPNESS = 30.0
DEFAULT_MARGIN = 0.3
MAX_KMEANS_SAMPLES = 100_000


@dataclass
class VladParams:
    centers: np.ndarray  # (K, C)
    w: np.ndarray  # (K, C) assignment weights
    b: np.ndarray  # (K,) assignment biases
    provenance: str = "kmeans_fit"
    inertia: list = field(default_factory=list)  # Lloyd history, not serialized

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float32)
        self.w = np.asarray(self.w, dtype=np.float32)
        self.b = np.asarray(self.b, dtype=np.float32).reshape(-1)
        k, c = self.centers.shape
        if k < 2:
            raise ParameterError(f"VLAD needs K >= 2 clusters, got {k}")
        if self.w.shape != (k, c) or self.b.shape != (k,):
            raise StructuralError("VLAD w/b shapes do not match centers")
        if not np.isfinite(self.centers).all():
            raise ParameterError("non-finite VLAD centers")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @classmethod
    def from_centers(cls, centers: np.ndarray, sharpness: float = DEFAULT_SHARPNESS, provenance: str = "kmeans_fit") -> "VladParams":
        """w_k = 2a c_k, b_k = -a |c_k|^2, so the softmax ranks clusters by distance."""
        centers = np.asarray(centers, dtype=np.float64)
        return cls(centers, 2.0 * sharpness * centers, -sharpness * (centers**2).sum(1), provenance)


@dataclass
class GlobalDescriptor:
    raw: np.ndarray  # (K*C,) unit vector (or zeros)
    reduced: np.ndarray | None = None  # (out_dim,) PCA coordinates
    raw_normalized: bool = True
    reduced_normalized: bool = False

    @property
    def vector(self) -> np.ndarray:
        return self.raw if self.reduced is None else self.reduced


@dataclass
class PcaProjection:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (out_dim, D), orthonormal rows
    explained_variance_ratio: np.ndarray  # (out_dim,)
    degenerate: bool = False

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.components + self.mean


def _unit(x: np.ndarray, axis: int = -1) -> np.ndarray:
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 1e-12)


def soft_assign(features: np.ndarray, params: VladParams) -> np.ndarray:
    logits = features @ params.w.T.astype(np.float64) + params.b.astype(np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def vlad_residuals(features: np.ndarray, params: VladParams) -> np.ndarray:
    """Unnormalized V_k = sum_i a_k(f_i) (f_i - c_k), shape (K, C)."""
    f = np.asarray(features, dtype=np.float64).reshape(-1, params.dim)
    a = soft_assign(f, params)
    return a.T @ f - a.sum(0)[:, None] * params.centers.astype(np.float64)


def pool_vlad(fmap, params: VladParams) -> GlobalDescriptor:
    """Intra-normalized, L2-normalized NetVLAD vector of a feature map or (N, C) list."""
    t = getattr(fmap, "tensor", fmap)
    t = np.asarray(t)
    if t.shape[-1] != params.dim:
        raise StructuralError(f"feature channels {t.shape[-1]} != VLAD dim {params.dim}")
    v = vlad_residuals(t.reshape(-1, params.dim), params)
    return GlobalDescriptor(_unit(_unit(v, axis=1).reshape(-1)))


def fit_kmeans(samples: np.ndarray, k: int = DEFAULT_K, seed: int = 0, iters: int = 50, sharpness: float = DEFAULT_SHARPNESS) -> VladParams:
    """k-means++ seeding followed by Lloyd iterations; deterministic for a seed.

    Empty clusters keep their previous centre, so inertia never increases.
    """
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(len(x), -1)
    n = len(x)
    if n < k:
        raise ParameterError(f"need at least k={k} samples, got {n}")
    rng = np.random.default_rng(seed)
    if n > MAX_KMEANS_SAMPLES:
        x = x[np.sort(rng.choice(n, MAX_KMEANS_SAMPLES, replace=False))]
        n = len(x)
    sq = (x * x).sum(1)

    def dist2(c):
        return np.maximum(sq[:, None] + (c * c).sum(1)[None, :] - 2.0 * x @ c.T, 0.0)

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = dist2(centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total) if total > 0 else rng.integers(n)
        centers[i] = x[idx]
        closest = np.minimum(closest, dist2(centers[i : i + 1])[:, 0])

    history = []
    labels = None
    for _ in range(max(iters, 1)):
        d = dist2(centers)
        new_labels = d.argmin(1)
        history.append(float(d[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled, None]
    params = VladParams.from_centers(centers, sharpness)
    params.inertia = history
    return params


def fit_pca(descriptors: np.ndarray, out_dim: int = 512) -> PcaProjection:
    """Top principal directions of the centred samples.

    With fewer samples than out_dim the output dimensionality is clipped to the
    sample count (a warning is logged).
    """
    x = np.asarray(descriptors, dtype=np.float64)
    n, d = x.shape
    if out_dim < 1 or out_dim > d:
        raise ParameterError(f"out_dim must be in [1, {d}], got {out_dim}")
    if n < out_dim:
        log.warning("PCA fit on %d samples; clipping output dimension %d -> %d", n, out_dim, n)
        out_dim = n
    mean = x.mean(0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    var = s**2
    total = var.sum()
    if total <= 1e-20:
        log.warning("PCA input has zero variance; using leading coordinate axes")
        return PcaProjection(mean, np.eye(out_dim, d), np.zeros(out_dim), degenerate=True)
    comps = vt[:out_dim]
    ratios = var[:out_dim] / total
    # fix sign so the largest-magnitude entry of each row is positive
    signs = np.sign(comps[np.arange(out_dim), np.abs(comps).argmax(1)])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    return PcaProjection(mean, comps, ratios)


def reduce_descriptor(desc: GlobalDescriptor, pca: PcaProjection, normalize: bool = False) -> GlobalDescriptor:
    """Attach PCA coordinates.

    They are left unnormalized by default: every fitted sample lies in the
    span of the components, so L2 distances to them differ from raw-space
    distances by a per-query constant and the ranking is preserved.
    Rescaling the centred coordinates to unit length would break that.
    """
    z = pca.project(desc.raw[None, :])[0]
    return GlobalDescriptor(desc.raw, _unit(z) if normalize else z, desc.raw_normalized, normalize)


def lazy_triplet_loss(query, positive, negatives, margin: float = DEFAULT_MARGIN) -> float:
    """max_j max(m + |q - p| - |q - n_j|, 0)."""
    negatives = list(negatives)
    if not negatives:
        raise ParameterError("lazy triplet loss needs at least one negative")
    q = np.asarray(getattr(query, "vector", query), dtype=np.float64)
    p = np.asarray(getattr(positive, "vector", positive), dtype=np.float64)
    negs = np.array([getattr(n, "vector", n) for n in negatives], dtype=np.float64)
    if p.shape != q.shape or negs.shape[1:] != q.shape:
        raise ParameterError("descriptor dimensionalities differ")
    d_pos = float(np.linalg.norm(q - p))
    d_neg = np.linalg.norm(negs - q[None, :], axis=1)
    return float(max(0.0, (margin + d_pos - d_neg).max()))


def hinge(x: float) -> float:
    return x if x > 0 else 0.0


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0 if na != nb else 1.0
