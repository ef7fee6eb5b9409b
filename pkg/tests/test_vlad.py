import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevloc.errors import ParameterError, StructuralError
from bevloc.rem import FeatureMap
from bevloc.vlad import (
    GlobalDescriptor,
    VladParams,
    cosine,
    fit_kmeans,
    fit_pca,
    lazy_triplet_loss,
    pool_vlad,
    reduce_descriptor,
)


def vlad_oracle(features, centers, w, b):
    """Soft-assigned residual sums, intra-normalized then L2-normalized, with explicit loops."""
    k_count, c = centers.shape
    blocks = np.zeros((k_count, c))
    for f in features:
        logits = [float(np.dot(w[k], f) + b[k]) for k in range(k_count)]
        top = max(logits)
        e = [math.exp(x - top) for x in logits]
        z = sum(e)
        for k in range(k_count):
            blocks[k] += (e[k] / z) * (f - centers[k])
    for k in range(k_count):
        n = np.linalg.norm(blocks[k])
        if n > 1e-12:
            blocks[k] /= n
    v = blocks.ravel()
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else v


def _params(rng, k, c, sharpness=5.0):
    return VladParams.from_centers(rng.normal(size=(k, c)), sharpness)


@pytest.mark.parametrize("seed", range(50))
def test_pooling_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    p = _params(rng, 3, 8)
    fmap = rng.normal(size=(4, 4, 8)).astype(np.float32)
    got = pool_vlad(fmap, p).raw
    want = vlad_oracle(fmap.reshape(-1, 8).astype(np.float64), p.centers.astype(np.float64),
                       p.w.astype(np.float64), p.b.astype(np.float64))
    assert np.abs(got - want).max() <= 1e-5


def test_feature_at_center_gives_zero_block():
    centers = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = VladParams.from_centers(centers, 1e4)
    d = pool_vlad(np.array([[1.0, 0.0], [0.0, 1.5]]), p).raw
    assert np.allclose(d[:2], 0.0)
    assert np.allclose(d[2:], [0.0, 1.0])


def test_identical_maps_identical_bits(rng):
    p = _params(rng, 4, 6)
    t = rng.normal(size=(5, 5, 6)).astype(np.float32)
    assert pool_vlad(FeatureMap(t, 8, 1), p).raw.tobytes() == pool_vlad(FeatureMap(t.copy(), 8, 1), p).raw.tobytes()


def test_channel_mismatch(rng):
    with pytest.raises(StructuralError):
        pool_vlad(np.zeros((3, 3, 5)), _params(rng, 2, 4))


def test_params_validation(rng):
    with pytest.raises(ParameterError):
        VladParams.from_centers(rng.normal(size=(1, 4)))
    with pytest.raises(StructuralError):
        VladParams(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(2))
    with pytest.raises(ParameterError):
        VladParams.from_centers(np.array([[np.nan, 0.0], [1.0, 1.0]]))


def test_assignment_convention(rng):
    c = rng.normal(size=(3, 4))
    p = VladParams.from_centers(c, 7.0)
    assert np.allclose(p.w, 14.0 * c, atol=1e-5)
    assert np.allclose(p.b, -7.0 * (c**2).sum(1), atol=1e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    p = _params(rng, 4, 6)
    feats = rng.normal(size=(40, 6))
    a = pool_vlad(feats, p).raw
    b = pool_vlad(feats[rng.permutation(40)], p).raw
    assert np.abs(a - b).max() <= 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pooled_descriptor_is_unit(seed):
    rng = np.random.default_rng(seed)
    d = pool_vlad(rng.normal(size=(30, 5)), _params(rng, 3, 5))
    assert np.linalg.norm(d.raw) == pytest.approx(1.0, abs=1e-5)


# ---------------------------------------------------------------- k-means


def test_kmeans_needs_enough_samples(rng):
    with pytest.raises(ParameterError):
        fit_kmeans(rng.normal(size=(3, 2)), k=4)


def test_kmeans_k_samples_are_the_centres(rng):
    x = rng.normal(size=(5, 3))
    p = fit_kmeans(x, k=5, seed=1)
    got = sorted(map(tuple, np.round(p.centers.astype(np.float64), 5)))
    want = sorted(map(tuple, np.round(x.astype(np.float32).astype(np.float64), 5)))
    assert got == want
    assert p.inertia[-1] == pytest.approx(0.0, abs=1e-12)


def test_kmeans_two_blobs(rng):
    a = rng.normal(loc=(-5, 0), scale=0.3, size=(200, 2))
    b = rng.normal(loc=(5, 1), scale=0.3, size=(200, 2))
    p = fit_kmeans(np.vstack([a, b]), k=2, seed=0)
    centres = sorted(map(tuple, p.centers.astype(np.float64)))
    assert np.allclose(centres[0], a.mean(0), atol=0.1)
    assert np.allclose(centres[1], b.mean(0), atol=0.1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_kmeans_inertia_never_increases(seed, k):
    rng = np.random.default_rng(seed)
    p = fit_kmeans(rng.normal(size=(60, 3)), k=k, seed=seed % 1000)
    assert all(b <= a + 1e-9 for a, b in zip(p.inertia, p.inertia[1:]))


def test_kmeans_deterministic(rng):
    x = rng.normal(size=(100, 4))
    assert np.array_equal(fit_kmeans(x, 5, seed=3).centers, fit_kmeans(x, 5, seed=3).centers)


# ---------------------------------------------------------------- PCA


def test_pca_rank_one_line(rng):
    direction = np.array([1.0, 2.0, -2.0, 0.5])
    direction /= np.linalg.norm(direction)
    x = rng.normal(size=(50, 1)) * direction + np.array([3.0, 0, 0, 1])
    pca = fit_pca(x, 1)
    angle = math.acos(min(1.0, abs(float(pca.components[0] @ direction))))
    assert angle <= 1e-4


def test_pca_isotropic_ratios(rng):
    pca = fit_pca(rng.normal(size=(20000, 6)), 6)
    assert np.all(np.abs(pca.explained_variance_ratio * 6 - 1.0) <= 0.2)


def test_pca_reconstruction_error_is_tail_mass(rng):
    x = rng.normal(size=(300, 10)) * np.linspace(3, 0.2, 10)
    pca = fit_pca(x, 4)
    err = ((x - pca.reconstruct(pca.project(x))) ** 2).sum() / len(x)
    centred = x - x.mean(0)
    eig = np.sort(np.linalg.eigvalsh(centred.T @ centred / len(x)))[::-1]
    assert err == pytest.approx(eig[4:].sum(), abs=1e-4)


def test_pca_rows_orthonormal(rng):
    pca = fit_pca(rng.normal(size=(80, 30)), 12)
    assert np.allclose(pca.components @ pca.components.T, np.eye(12), atol=1e-4)


def test_pca_clips_with_warning(rng, caplog):
    with caplog.at_level(logging.WARNING):
        pca = fit_pca(rng.normal(size=(5, 20)), 12)
    assert pca.out_dim == 5
    assert "clipping" in caplog.text


def test_pca_zero_variance_is_degenerate():
    pca = fit_pca(np.ones((10, 6)), 3)
    assert pca.degenerate
    assert np.array_equal(pca.components, np.eye(3, 6))


def test_pca_bad_dimension(rng):
    with pytest.raises(ParameterError):
        fit_pca(rng.normal(size=(10, 4)), 5)


def test_pca_keeps_nearest_neighbour(rng):
    """Top-1 retrieval on 100 descriptors survives the reduction."""
    p = _params(rng, 8, 16)
    base = rng.normal(size=(100, 30, 16))
    db = np.array([pool_vlad(f, p).raw for f in base])
    queries = np.array([pool_vlad(f + rng.normal(scale=0.3, size=f.shape), p).raw for f in base])
    pca = fit_pca(db, 64)
    zd = np.array([reduce_descriptor(GlobalDescriptor(v), pca).reduced for v in db])
    zq = np.array([reduce_descriptor(GlobalDescriptor(v), pca).reduced for v in queries])
    raw_nn = ((queries[:, None] - db[None]) ** 2).sum(-1).argmin(1)
    red_nn = ((zq[:, None] - zd[None]) ** 2).sum(-1).argmin(1)
    assert (raw_nn == red_nn).mean() >= 0.95


def test_reduce_normalized_flag(rng):
    pca = fit_pca(rng.normal(size=(20, 8)), 4)
    d = reduce_descriptor(GlobalDescriptor(rng.normal(size=8)), pca, normalize=True)
    assert d.reduced_normalized and np.linalg.norm(d.reduced) == pytest.approx(1.0)
    assert d.vector is d.reduced


# ---------------------------------------------------------------- triplet loss


def test_triplet_margin_satisfied():
    q = np.array([1.0, 0.0])
    assert lazy_triplet_loss(q, q, [np.array([0.0, 1.0])], 0.3) == 0.0


def test_triplet_hand_value():
    q = np.zeros(2)
    p = np.array([1.0, 0.0])
    negs = [np.array([0.0, 0.2]), np.array([0.0, 0.9])]
    assert lazy_triplet_loss(q, p, negs, 0.3) == pytest.approx(1.1)


def test_triplet_errors():
    with pytest.raises(ParameterError):
        lazy_triplet_loss(np.zeros(2), np.zeros(2), [])
    with pytest.raises(ParameterError):
        lazy_triplet_loss(np.zeros(2), np.zeros(3), [np.zeros(2)])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 2))
def test_triplet_non_negative(seed, margin):
    rng = np.random.default_rng(seed)
    q, p = rng.normal(size=4), rng.normal(size=4)
    negs = list(rng.normal(size=(int(rng.integers(1, 5)), 4)))
    assert lazy_triplet_loss(q, p, negs, margin) >= 0.0


def test_cosine_edge_cases():
    assert cosine(np.zeros(3), np.zeros(3)) == 1.0
    assert cosine(np.zeros(3), np.ones(3)) == 0.0
    assert cosine(np.array([1.0, 0]), np.array([2.0, 0])) == pytest.approx(1.0)
