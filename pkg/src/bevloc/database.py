"""Place database: build from posed scans, persist as `BVDB`, query and localize."""
from __future__ import annotations

import io
import logging
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone as bb
from .bev import rasterize_pgm
from .config import RunConfig, config_from_echo
from .errors import (BevlocError, ConfigMismatchError, FormatError, InsufficientDataError, NoConsensusError,
                     ParameterError)
from .geom import PointCloud, Se2Pose, load_cloud
from .pipeline import ScanFeatures, extract, global_descriptor, pooling_features, preprocess, register
from .registration import compose_global, recover_metric_pose
from .vlad import GlobalDescriptor, fit_kmeans, fit_pca, pool_vlad, reduce_descriptor
from .weightfile import dumps_weights, load_weights, loads_weights

log = logging.getLogger(__name__)

MAGIC = b"BVDB"
VERSION = 1


@dataclass
class PlaceEntry:
    id: int
    pose: Se2Pose
    descriptor: np.ndarray  # reduced global descriptor, float32
    keypoints: np.ndarray  # (N, 3) float32 u, v, score
    local: np.ndarray  # (N, C) float32 unit descriptors
    pgm: bytes = b""  # the stored BEV image

    def __post_init__(self):
        self.descriptor = np.asarray(self.descriptor, dtype=np.float32).reshape(-1)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float32).reshape(-1, 3)
        self.local = np.asarray(self.local, dtype=np.float32)
        if not np.isfinite([self.pose.x, self.pose.y, self.pose.yaw]).all():
            raise ParameterError(f"entry {self.id} has a non-finite pose")


@dataclass
class BuildReport:
    built: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (index, source, reason)

    def text(self) -> str:
        lines = [f"entries: {len(self.built)}", f"skipped: {len(self.skipped)}"]
        lines += [f"skipped {i} {src}: {why}" for i, src, why in self.skipped]
        return "\n".join(lines) + "\n"


@dataclass
class PlaceDatabase:
    config: RunConfig
    weights: bb.WeightSet  # backbone plus fitted VLAD and PCA
    entries: list = field(default_factory=list)
    spec: bb.BackboneSpec = field(default_factory=bb.default_spec)
    report: BuildReport = field(default_factory=BuildReport)
    _matrix: np.ndarray | None = field(default=None, repr=False)
    _ids: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def descriptor_matrix(self) -> np.ndarray:
        if self._matrix is None or len(self._matrix) != len(self.entries):
            dim = self.entries[0].descriptor.size if self.entries else 0
            self._matrix = np.array([e.descriptor for e in self.entries], dtype=np.float32).reshape(-1, dim)
            self._ids = np.array([e.id for e in self.entries], dtype=np.int64)
        return self._matrix

    def entry(self, entry_id: int) -> PlaceEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise KeyError(entry_id)

    def describe(self, feats: ScanFeatures) -> GlobalDescriptor:
        raw = global_descriptor(feats.fmap, self.weights.vlad, self.config.disk_pool)
        return reduce_descriptor(raw, self.weights.pca)


# ---------------------------------------------------------------- build


def resolve_weights(cfg: RunConfig, spec: bb.BackboneSpec) -> bb.WeightSet:
    w = load_weights(cfg.weights) if cfg.weights else bb.init_weights(spec, cfg.weight_seed)
    w.check(spec)
    return w


def load_scan(src) -> PointCloud:
    if isinstance(src, PointCloud):
        return src
    return load_cloud(src, "kitti_bin" if Path(src).suffix == ".bin" else "xyz_text")


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def build_database(scans, config: RunConfig | None = None, progress=None) -> PlaceDatabase:
    """Build from (cloud or path, Se2Pose) pairs; entry ids are input positions.

    Unreadable scans are skipped and listed in the build report. VLAD clusters
    and PCA come from the weight file when it carries them, otherwise they are
    fitted on this database.
    """
    cfg = config or RunConfig()
    spec = bb.default_spec()
    weights = resolve_weights(cfg, spec)
    scans = list(scans)
    if not scans:
        raise InsufficientDataError("build_database needs at least one scan")
    report = BuildReport()

    def work(item):
        idx, (src, pose) = item
        try:
            cloud = load_scan(src)
        except (OSError, FormatError, ParameterError) as exc:
            return idx, src, pose, None, str(exc)
        return idx, src, pose, extract(cloud, spec, weights, cfg), None

    results = []
    for idx, src, pose, feats, err in _map(work, list(enumerate(scans)), cfg.worker_count()):
        if feats is None:
            log.warning("skipping scan %d (%s): %s", idx, src, err)
            report.skipped.append((idx, str(src), err))
        else:
            if not np.isfinite([pose.x, pose.y, pose.yaw]).all():
                raise ParameterError(f"scan {idx} has a non-finite pose")
            results.append((idx, pose, feats))
            report.built.append(idx)
        if progress:
            progress(idx, len(scans), err)
    if not results:
        raise BevlocError("every scan failed to load; nothing to build")

    pooled = [pooling_features(f.fmap, cfg.disk_pool).astype(np.float32) for _, _, f in results]
    if weights.vlad is None:
        weights.vlad = fit_kmeans(np.vstack(pooled), cfg.k, cfg.kmeans_seed, cfg.kmeans_iters, cfg.sharpness)
    elif weights.vlad.k != cfg.k:
        raise ConfigMismatchError(f"weight file has K={weights.vlad.k}, config asks for K={cfg.k}")
    raws = [pool_vlad(p, weights.vlad) for p in pooled]
    if weights.pca is None:
        stack = np.array([r.raw for r in raws])
        # a small K can give raw vectors shorter than the requested output
        weights.pca = fit_pca(stack, min(cfg.pca_dim, stack.shape[1]))
    db = PlaceDatabase(cfg, weights, spec=spec, report=report)
    for (idx, pose, feats), raw in zip(results, raws):
        reduced = reduce_descriptor(raw, weights.pca).reduced
        db.entries.append(PlaceEntry(idx, pose, reduced, feats.keypoints, feats.local, rasterize_pgm(feats.bev)))
    return db


def append(db: PlaceDatabase, cloud: PointCloud, pose: Se2Pose, entry_id: int | None = None) -> PlaceEntry:
    """Add one scan using the frozen VLAD and PCA so existing descriptors stay valid."""
    feats = extract(cloud, db.spec, db.weights, db.config)
    if entry_id is None:
        entry_id = max((e.id for e in db.entries), default=-1) + 1
    if any(e.id == entry_id for e in db.entries):
        raise ParameterError(f"entry id {entry_id} already present")
    e = PlaceEntry(entry_id, pose, db.describe(feats).reduced, feats.keypoints, feats.local, rasterize_pgm(feats.bev))
    db.entries.append(e)
    db._matrix = None
    return e


# ---------------------------------------------------------------- query


def query(db: PlaceDatabase, q, top_k: int = 1) -> list[tuple[int, float]]:
    """Exact L2 k-nearest entries, ascending distance, ties to the lower id."""
    if top_k < 1:
        raise ParameterError("top_k must be >= 1")
    if not db.entries:
        return []
    m = db.descriptor_matrix
    v = np.asarray(getattr(q, "vector", q), dtype=np.float64).reshape(-1)
    if v.size != m.shape[1]:
        raise ParameterError(f"query dimension {v.size} != database dimension {m.shape[1]}")
    diff = m.astype(np.float64) - v
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.lexsort((db._ids, dist))[:top_k]
    return [(int(db._ids[i]), float(dist[i])) for i in order]


@dataclass
class LocalizeResult:
    status: str  # ok | retrieval_only | failed
    pose: Se2Pose | None = None
    match_id: int | None = None
    inliers: int = 0
    distance: float = float("nan")
    seconds: float = 0.0
    retrieval_seconds: float = 0.0
    message: str = ""


def localize(db: PlaceDatabase, cloud: PointCloud, config: RunConfig | None = None) -> LocalizeResult:
    """Retrieve the nearest place, register against it and compose the global pose."""
    t0 = time.perf_counter()
    cfg = config or db.config
    db.config.check_compatible(cfg)
    if not db.entries:
        raise InsufficientDataError("cannot localize against an empty database")
    bev = preprocess(cloud, cfg)
    if not bev.pixels.any():
        return LocalizeResult("failed", seconds=time.perf_counter() - t0, message="empty BEV image")
    feats = extract(bev, db.spec, db.weights, cfg)
    desc = db.describe(feats)
    t1 = time.perf_counter()
    (match_id, dist), = query(db, desc, 1)
    t_retrieval = time.perf_counter() - t1
    entry = db.entry(match_id)
    try:
        m = register(feats, entry.keypoints, entry.local, cfg)
    except (NoConsensusError, InsufficientDataError) as exc:
        inl = getattr(exc, "best_inliers", 0)
        return LocalizeResult("retrieval_only", entry.pose, match_id, inl, dist, time.perf_counter() - t0,
                              t_retrieval, str(exc))
    pose = compose_global(entry.pose, recover_metric_pose(m, cfg.g))
    return LocalizeResult("ok", pose, match_id, m.inlier_count, dist, time.perf_counter() - t0, t_retrieval)


def localize_many(db: PlaceDatabase, clouds, config: RunConfig | None = None) -> list[LocalizeResult]:
    """Parallel across queries; results keep input order."""
    cfg = config or db.config
    return _map(lambda c: localize(db, load_scan(c), cfg), list(clouds), cfg.worker_count())


# ---------------------------------------------------------------- persistence


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def dumps_database(db: PlaceDatabase) -> bytes:
    cfg = db.config
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", VERSION))
    buf.write(struct.pack("<ddIIIq", cfg.g, cfg.d, cfg.n_m, cfg.n_r, cfg.k, cfg.weight_seed))
    echo = cfg.echo().encode()
    buf.write(struct.pack("<I", len(echo)) + echo)
    blob = dumps_weights(db.weights)
    buf.write(struct.pack("<I", len(blob)) + blob)
    buf.write(struct.pack("<I", len(db.entries)))
    for e in db.entries:
        buf.write(struct.pack("<Q3d", e.id, e.pose.x, e.pose.y, e.pose.yaw))
        buf.write(struct.pack("<I", e.descriptor.size) + _f32(e.descriptor))
        c = e.local.shape[1] if e.local.ndim == 2 else 0
        buf.write(struct.pack("<II", len(e.keypoints), c) + _f32(e.keypoints) + _f32(e.local))
        buf.write(struct.pack("<I", len(e.pgm)) + e.pgm)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_database(db: PlaceDatabase, path: str | Path) -> None:
    Path(path).write_bytes(dumps_database(db))


def loads_database(data: bytes, source: str = "<bytes>") -> PlaceDatabase:
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError(f"{source}: not a BVDB database file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{source}: CRC mismatch, file is corrupt")
    f = io.BytesIO(body)

    def read(fmt):
        n = struct.calcsize(fmt)
        chunk = f.read(n)
        if len(chunk) != n:
            raise FormatError(f"{source}: truncated")
        return struct.unpack(fmt, chunk)

    def floats(*shape):
        n = int(np.prod(shape))
        chunk = f.read(4 * n)
        if len(chunk) != 4 * n:
            raise FormatError(f"{source}: truncated")
        return np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)

    f.read(4)
    (version,) = read("<I")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported BVDB version {version}")
    g, d, n_m, n_r, k, seed = read("<ddIIIq")
    (n,) = read("<I")
    cfg = config_from_echo(f.read(n).decode())
    if (cfg.g, cfg.d, cfg.n_m, cfg.n_r, cfg.k, cfg.weight_seed) != (g, d, n_m, n_r, k, seed):
        raise FormatError(f"{source}: config block disagrees with the config echo")
    (n,) = read("<I")
    weights = loads_weights(f.read(n), source)
    db = PlaceDatabase(cfg, weights)
    weights.check(db.spec)
    (count,) = read("<I")
    for _ in range(count):
        eid, x, y, yaw = read("<Q3d")
        (dim,) = read("<I")
        desc = floats(dim)
        n_kp, c = read("<II")
        kps = floats(n_kp, 3)
        local = floats(n_kp, c)
        (n,) = read("<I")
        db.entries.append(PlaceEntry(eid, Se2Pose(x, y, yaw), desc, kps, local, f.read(n)))
    if f.tell() != len(body):
        raise FormatError(f"{source}: trailing bytes")
    return db


def load_database(path: str | Path) -> PlaceDatabase:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read database {path}: {exc.strerror}") from None
    return loads_database(data, str(path))
