"""Retrieval and localization metrics, the loop-closure protocol and report files."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import database as dbm
from .bev import image_size
from .config import RunConfig
from .errors import InsufficientDataError, NoConsensusError
from .geom import Se2Pose, wrap_angle
from .pipeline import register_arrays
from .registration import compose_global, recover_metric_pose

POSITIVE_RADIUS = 5.0
SR_TRANSLATION = 2.0
SR_ROTATION_DEG = 5.0


@dataclass(frozen=True)
class EvalOutcome:
    query_id: int
    retrieved_id: int | None
    distance: float  # descriptor distance to the retrieved entry
    geo_distance: float  # metres between the query and retrieved ground-truth positions
    has_positive: bool  # some candidate lies within the positive radius
    gt_pose: Se2Pose | None = None
    est_pose: Se2Pose | None = None
    radius: float = POSITIVE_RADIUS

    @property
    def correct(self) -> bool:
        return self.retrieved_id is not None and self.geo_distance <= self.radius

    @property
    def label(self) -> str:
        """Label when every retrieval is accepted."""
        if self.correct:
            return "TP"
        if self.has_positive:
            return "FN"
        return "FP" if self.retrieved_id is not None else "TN"

    def pose_error(self) -> tuple[float, float] | None:
        """(metres, degrees) or None without an estimate."""
        if self.est_pose is None or self.gt_pose is None:
            return None
        e_t = math.hypot(self.est_pose.x - self.gt_pose.x, self.est_pose.y - self.gt_pose.y)
        e_r = math.degrees(abs(wrap_angle(self.est_pose.yaw - self.gt_pose.yaw)))
        return e_t, e_r


def recall_at_1(outcomes) -> float | None:
    """TP / (TP + FN) over queries that have an in-range positive; None if there are none."""
    scored = [o for o in outcomes if o.has_positive]
    if not scored:
        return None
    return sum(o.correct for o in scored) / len(scored)


@dataclass
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float | None
    max_f1: float
    max_recall_at_p1: float
    positives: int


def pr_curve(outcomes) -> PrCurve:
    """Sweep the acceptance threshold over every distinct descriptor distance.

    A query is accepted when its distance is at or below the threshold; accepted
    correct retrievals are TP, accepted wrong ones FP; recall divides by the
    number of queries that have a positive. AP is the right-continuous step
    area sum (R_i - R_{i-1}) P_i.
    """
    outcomes = [o for o in outcomes if o.retrieved_id is not None]
    positives = sum(o.has_positive for o in outcomes)
    if not outcomes:
        empty = np.zeros(0)
        return PrCurve(empty, empty, empty, None, 0.0, 0.0, 0)
    d = np.array([o.distance for o in outcomes], dtype=np.float64)
    ok = np.array([o.correct for o in outcomes])
    order = np.argsort(d, kind="stable")
    d, ok = d[order], ok[order]
    thresholds = np.unique(d)
    # cumulative counts at the last index holding each distinct distance
    ends = np.searchsorted(d, thresholds, side="right")
    tp = np.cumsum(ok)[ends - 1]
    fp = ends - tp
    precision = tp / (tp + fp)
    recall = tp / positives if positives else np.zeros(len(tp))
    f1 = np.where(precision + recall > 0, 2 * precision * recall / np.maximum(precision + recall, 1e-300), 0.0)
    perfect = recall[precision == 1.0]
    ap = None
    if positives:
        ap = float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))
    return PrCurve(thresholds, precision, recall, ap, float(f1.max()), float(perfect.max()) if len(perfect) else 0.0,
                   positives)


def pose_errors(outcomes) -> tuple[float | None, float | None, float | None]:
    """(mean e_t over TPs, mean e_r over TPs, success rate over all queries)."""
    outcomes = list(outcomes)
    if not outcomes:
        return None, None, None
    tp = [o.pose_error() for o in outcomes if o.correct and o.pose_error() is not None]
    mean_t = float(np.mean([e[0] for e in tp])) if tp else None
    mean_r = float(np.mean([e[1] for e in tp])) if tp else None
    hits = 0
    for o in outcomes:
        e = o.pose_error()
        if e is not None and e[0] <= SR_TRANSLATION and e[1] <= SR_ROTATION_DEG:
            hits += 1
    return mean_t, mean_r, hits / len(outcomes)


def loop_outcomes(descriptors, poses, exclusion: int = 100, radius: float = POSITIVE_RADIUS) -> list[EvalOutcome]:
    """Query frame i against frames [0, i - exclusion); empty candidate sets are skipped."""
    desc = np.asarray(descriptors, dtype=np.float64)
    xy = np.array([[p.x, p.y] for p in poses], dtype=np.float64).reshape(-1, 2)
    out = []
    for i in range(len(desc)):
        n = i - exclusion
        if n <= 0:
            continue
        dd = np.sqrt(((desc[:n] - desc[i]) ** 2).sum(1))
        j = int(np.argmin(dd))
        geo = np.hypot(*(xy[:n] - xy[i]).T)
        out.append(EvalOutcome(i, j, float(dd[j]), float(geo[j]), bool((geo <= radius).any()), poses[i], None, radius))
    return out


def loop_protocol(sequence, exclusion: int = 100, config: RunConfig | None = None, register_poses: bool = True):
    """Build descriptors for a posed sequence and run the loop-closure protocol.

    Each accepted retrieval is also registered against its match, so the
    outcomes carry estimated poses in the ground-truth frame.
    """
    cfg = config or RunConfig()
    sequence = list(sequence)
    poses = [p for _, p in sequence]
    if len(sequence) <= exclusion:
        return [], None
    db = dbm.build_database(sequence, cfg)
    outcomes = loop_outcomes(db.descriptor_matrix, poses, exclusion, cfg.positive_radius)
    if not register_poses:
        return outcomes, db
    size = image_size(cfg.g, cfg.d)
    with_pose = []
    for o in outcomes:
        q, m = db.entry(o.query_id), db.entry(o.retrieved_id)
        try:
            ms = register_arrays(q.keypoints, q.local, m.keypoints, m.local, size, cfg)
            est = compose_global(m.pose, recover_metric_pose(ms, cfg.g))
        except (NoConsensusError, InsufficientDataError):
            est = None
        with_pose.append(EvalOutcome(o.query_id, o.retrieved_id, o.distance, o.geo_distance, o.has_positive,
                                     o.gt_pose, est, o.radius))
    return with_pose, db


@dataclass
class EvalReport:
    queries: int
    skipped: int  # queries with no in-range positive (excluded from recall@1)
    recall_at_1: float | None
    curve: PrCurve
    mean_translation_error: float | None
    mean_rotation_error_deg: float | None
    success_rate: float | None
    config: RunConfig = field(default_factory=RunConfig)

    @classmethod
    def from_outcomes(cls, outcomes, config: RunConfig | None = None) -> "EvalReport":
        outcomes = list(outcomes)
        mt, mr, sr = pose_errors(outcomes)
        return cls(len(outcomes), sum(not o.has_positive for o in outcomes), recall_at_1(outcomes),
                   pr_curve(outcomes), mt, mr, sr, config or RunConfig())

    def text(self) -> str:
        c = self.curve
        rows = [
            ("queries", self.queries),
            ("positives", c.positives),
            ("skipped_without_positive", self.skipped),
            ("recall_at_1", self.recall_at_1),
            ("average_precision", c.ap),
            ("max_f1", c.max_f1),
            ("max_recall_at_precision_1", c.max_recall_at_p1),
            ("mean_translation_error_m", self.mean_translation_error),
            ("mean_rotation_error_deg", self.mean_rotation_error_deg),
            ("success_rate_2m_5deg", self.success_rate),
            ("pr_points", len(c.thresholds)),
        ]
        lines = [f"{k}: {_fmt(v)}" for k, v in rows]
        if c.positives == 0:
            lines.append("note: no query has a ground-truth positive; recall and AP are undefined")
        lines.append("[config]")
        return "\n".join(lines) + "\n" + self.config.echo()


def _fmt(v) -> str:
    if v is None:
        return "absent"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def pr_csv(curve: PrCurve) -> str:
    buf = io.StringIO()
    buf.write("threshold,precision,recall\n")
    for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
        buf.write(f"{float(t)!r},{float(p)!r},{float(r)!r}\n")
    return buf.getvalue()


def read_pr_csv(text: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = list(csv.DictReader(io.StringIO(text)))
    col = lambda k: np.array([float(r[k]) for r in rows], dtype=np.float64)
    return col("threshold"), col("precision"), col("recall")
