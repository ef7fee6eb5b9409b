import math

import numpy as np
import pytest

from bevloc import backbone as bb
from bevloc import database as dbm
from bevloc.config import RunConfig
from bevloc.errors import BevlocError, ConfigMismatchError, FormatError, InsufficientDataError, ParameterError
from bevloc.geom import PointCloud, Se2Pose, save_cloud
from bevloc.synthetic import gen_synthetic_scene, grid_trajectory, world_extent

CFG = RunConfig(k=8, n_r=4)


@pytest.fixture(scope="module")
def scene():
    traj = grid_trajectory(5, 30.0, seed=2)
    area = world_extent(traj)
    return gen_synthetic_scene(5, area, round(0.009 * area * area), traj)


@pytest.fixture(scope="module")
def db(scene):
    return dbm.build_database(scene, CFG)


def _fake_db(rng, n, dim=6, ids=None):
    w = bb.WeightSet([], "none")
    db = dbm.PlaceDatabase(RunConfig(), w)
    ids = list(range(n)) if ids is None else ids
    for i, v in zip(ids, rng.normal(size=(n, dim))):
        db.entries.append(dbm.PlaceEntry(i, Se2Pose(), v, np.zeros((0, 3)), np.zeros((0, 4))))
    return db


@pytest.mark.parametrize("seed", range(50))
def test_query_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    db = _fake_db(rng, 500 if seed == 0 else int(rng.integers(1, 60)))
    q = rng.normal(size=6)
    k = int(rng.integers(1, 8))
    m = db.descriptor_matrix.astype(np.float64)
    brute = sorted(((math.dist(q, row), e.id) for row, e in zip(m, db.entries)))[:k]
    got = dbm.query(db, q, k)
    assert [i for i, _ in got] == [i for _, i in brute]
    assert [d for _, d in got] == pytest.approx([d for d, _ in brute], abs=1e-9)


def test_query_ties_prefer_lower_id(rng):
    db = _fake_db(rng, 3, ids=[7, 2, 5])
    for e in db.entries:
        e.descriptor = np.ones(6, np.float32)
    db._matrix = None
    assert [i for i, _ in dbm.query(db, np.zeros(6), 3)] == [2, 5, 7]


def test_query_edge_cases(rng):
    db = _fake_db(rng, 4)
    assert len(dbm.query(db, np.zeros(6), 10)) == 4
    assert dbm.query(_fake_db(rng, 0), np.zeros(6)) == []
    with pytest.raises(ParameterError):
        dbm.query(db, np.zeros(6), 0)
    with pytest.raises(ParameterError):
        dbm.query(db, np.zeros(5))


def test_built_database_shape(db):
    assert len(db) == 5
    # PCA output is clipped to the number of fitted descriptors
    assert db.descriptor_matrix.shape == (5, 5)
    assert db.weights.vlad.k == 8
    assert all(len(e.keypoints) == len(e.local) > 0 for e in db.entries)


def test_stored_descriptor_retrieves_itself(db):
    for e in db.entries:
        (hit, dist), = dbm.query(db, e.descriptor)
        assert hit == e.id and dist == 0.0


def test_self_localization_returns_stored_pose(db, scene):
    cloud, pose = scene[3]
    r = dbm.localize(db, cloud)
    assert r.status == "ok" and r.match_id == 3
    assert math.hypot(r.pose.x - pose.x, r.pose.y - pose.y) < 1e-6
    assert abs(math.remainder(r.pose.yaw - pose.yaw, 2 * math.pi)) < 1e-6
    assert r.retrieval_seconds < r.seconds


def test_empty_cloud_fails_cleanly(db):
    r = dbm.localize(db, PointCloud.empty())
    assert r.status == "failed" and r.pose is None


def test_config_mismatch_is_an_error(db, scene):
    with pytest.raises(ConfigMismatchError):
        dbm.localize(db, scene[0][0], CFG.replace(n_r=8))
    # matching-only settings are free to change
    assert dbm.localize(db, scene[0][0], CFG.replace(ransac_iters=500)).status == "ok"


def test_round_trip_is_byte_identical(db, tmp_path):
    blob = dbm.dumps_database(db)
    back = dbm.loads_database(blob)
    assert dbm.dumps_database(back) == blob
    assert back.config == db.config
    assert np.array_equal(back.descriptor_matrix, db.descriptor_matrix)
    path = tmp_path / "places.bvdb"
    dbm.save_database(db, path)
    assert dbm.load_database(path).entries[2].pgm == db.entries[2].pgm


def test_corrupt_database_rejected(db):
    blob = bytearray(dbm.dumps_database(db))
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(FormatError):
        dbm.loads_database(bytes(blob))
    with pytest.raises(FormatError):
        dbm.loads_database(b"BVDX" + bytes(blob[4:]))
    with pytest.raises(FormatError):
        dbm.loads_database(bytes(blob[:100]))


def test_build_is_deterministic(scene, db):
    again = dbm.build_database(scene, CFG)
    assert dbm.dumps_database(again) == dbm.dumps_database(db)


def test_append_uses_frozen_projection(scene):
    small = dbm.build_database(scene[:4], CFG)
    before = small.descriptor_matrix.copy()
    e = dbm.append(small, scene[4][0], scene[4][1])
    assert e.id == 4 and len(small) == 5
    assert np.array_equal(small.descriptor_matrix[:4], before)
    assert dbm.query(small, e.descriptor)[0][0] == 4
    with pytest.raises(ParameterError):
        dbm.append(small, scene[4][0], scene[4][1], entry_id=2)


def test_unreadable_scans_are_skipped(scene, tmp_path):
    good = tmp_path / "a.bin"
    save_cloud(scene[0][0], good)
    bad = tmp_path / "b.bin"
    bad.write_bytes(b"\x00" * 7)
    db = dbm.build_database([(good, scene[0][1]), (bad, scene[1][1]), (tmp_path / "missing.bin", scene[2][1])],
                            CFG.replace(k=2))
    assert db.report.built == [0]
    assert [i for i, _, _ in db.report.skipped] == [1, 2]
    assert "skipped: 2" in db.report.text()
    with pytest.raises(BevlocError):
        dbm.build_database([(bad, Se2Pose())], CFG)
    with pytest.raises(InsufficientDataError):
        dbm.build_database([], CFG)


def test_localize_many_keeps_order(db, scene, monkeypatch):
    monkeypatch.setenv("BEVLOC_THREADS", "3")
    clouds = [scene[i][0] for i in (4, 0, 2)]
    assert [r.match_id for r in dbm.localize_many(db, clouds)] == [4, 0, 2]
