"""Command-line entry point: build, localize, loop-eval, analyze, synth, init-weights."""
from __future__ import annotations

import argparse
import logging
import math
import statistics
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import database as dbm
from . import eval as ev
from . import registration as reg
from . import synthetic as syn
from .bev import rasterize_pgm
from .config import RunConfig, field_types, load_config
from .errors import BevlocError, ConfigMismatchError, FormatError, InsufficientDataError, NoConsensusError, ParameterError
from .geom import Se2Pose, save_cloud
from .pipeline import extract, register
from .rem import feature_distance_profile, profile_csv
from .weightfile import save_weights

log = logging.getLogger("bevloc")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_CONFIG = 0, 1, 2, 3
SCAN_SUFFIXES = (".bin", ".xyz", ".txt")


# ---------------------------------------------------------------- inputs


def list_scans(path: str | Path) -> list[Path]:
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise FormatError(f"scan path not found: {p}")
    scans = sorted(f for f in p.iterdir() if f.suffix in SCAN_SUFFIXES and f.is_file())
    if not scans:
        raise FormatError(f"no scans (*.bin, *.xyz, *.txt) in {p}")
    return scans


def read_poses(path: str | Path) -> list[Se2Pose]:
    """One pose per line: `x y yaw`, or a 12-value KITTI 3x4 camera matrix.

    KITTI camera poses are projected to the ground plane as (z, -x) with the
    heading of the optical axis.
    """
    p = Path(path)
    try:
        text = p.read_text()
    except OSError:
        raise FormatError(f"cannot read poses file {p}") from None
    poses = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            vals = [float(v) for v in line.replace(",", " ").split()]
        except ValueError:
            raise FormatError(f"{p}:{lineno}: non-numeric pose") from None
        if len(vals) == 3:
            poses.append(Se2Pose(*vals))
        elif len(vals) == 12:
            m = np.array(vals).reshape(3, 4)
            poses.append(Se2Pose(m[2, 3], -m[0, 3], math.atan2(-m[0, 2], m[2, 2])))
        else:
            raise FormatError(f"{p}:{lineno}: expected 3 or 12 values, got {len(vals)}")
    return poses


def write_poses(poses, path: Path) -> None:
    path.write_text("".join(f"{p.x!r} {p.y!r} {p.yaw!r}\n" for p in poses))


def posed_scans(scans_arg, poses_arg):
    scans = list_scans(scans_arg)
    poses = read_poses(poses_arg)
    if len(poses) != len(scans):
        raise FormatError(f"{poses_arg}: {len(poses)} poses for {len(scans)} scans")
    return list(zip(scans, poses))


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def config_from_args(args) -> RunConfig:
    flags = {name: getattr(args, name, None) for name in field_types()}
    return load_config(args.config, **flags)


# ---------------------------------------------------------------- commands


def cmd_build(args) -> int:
    cfg = config_from_args(args)
    items = posed_scans(args.scans, args.poses)

    def progress(i, n, err):
        print(f"[{i + 1}/{n}] {items[i][0].name} {'skipped: ' + err if err else 'ok'}", file=sys.stderr)

    db = dbm.build_database(items, cfg, progress)
    dbm.save_database(db, args.out)
    report = db.report.text() + f"descriptor_dim: {db.descriptor_matrix.shape[1]}\n[config]\n" + cfg.echo()
    _emit(report, args.report)
    return EXIT_OK


def cmd_localize(args) -> int:
    db = dbm.load_database(args.db)
    cfg = config_from_args(args) if _has_overrides(args) else db.config
    db.config.check_compatible(cfg)
    scans = [s for path in args.scans for s in list_scans(path)]
    results = dbm.localize_many(db, scans, cfg)
    lines = ["id,status,match_id,x,y,yaw,inliers,ms"]
    for path, r in zip(scans, results):
        pose = r.pose
        xyz = ("", "", "") if pose is None else (f"{pose.x:.6f}", f"{pose.y:.6f}", f"{pose.yaw:.6f}")
        ms = "" if args.no_timing else f"{r.seconds * 1e3:.1f}"
        match = "" if r.match_id is None else str(r.match_id)
        lines.append(",".join([path.stem, r.status, match, *xyz, str(r.inliers), ms]))
    _emit("\n".join(lines) + "\n", args.out)
    if results and not args.no_timing:
        med = statistics.median(r.seconds for r in results) * 1e3
        print(f"median localize time: {med:.1f} ms over {len(results)} queries", file=sys.stderr)
    return EXIT_OK


def _has_overrides(args) -> bool:
    return bool(args.config) or any(getattr(args, n, None) is not None for n in field_types())


def cmd_loop_eval(args) -> int:
    cfg = config_from_args(args)
    items = posed_scans(args.scans, args.poses)
    outcomes, _ = ev.loop_protocol(items, cfg.loop_exclusion, cfg)
    report = ev.EvalReport.from_outcomes(outcomes, cfg)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.report.txt").write_text(report.text())
    Path(f"{prefix}.pr.csv").write_text(ev.pr_csv(report.curve))
    sys.stdout.write(report.text())
    return EXIT_OK


def montage(img_a: np.ndarray, img_b: np.ndarray, m: reg.MatchSet | None) -> np.ndarray:
    """Side-by-side images with inlier matches drawn as lines at mid grey."""
    h, w = img_a.shape
    canvas = np.hstack([img_a, img_b]).astype(np.float32)
    if m is not None:
        for (qu, qv), (du, dv) in zip(m.q_uv[m.inliers], m.db_uv[m.inliers]):
            n = int(max(abs(du + w - qu), abs(dv - qv))) + 1
            us = np.rint(np.linspace(qu, du + w, n)).astype(int)
            vs = np.rint(np.linspace(qv, dv, n)).astype(int)
            canvas[vs.clip(0, h - 1), us.clip(0, 2 * w - 1)] = 0.5
    return canvas


def cmd_analyze(args) -> int:
    cfg = config_from_args(args)
    spec = bb.default_spec()
    w = dbm.resolve_weights(cfg, spec)
    qa = extract(dbm.load_scan(args.scan), spec, w, cfg)
    qb = extract(dbm.load_scan(args.pair), spec, w, cfg) if args.pair else qa
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    disp = list(range(0, args.max_disp + 1, 2))
    rows = feature_distance_profile(qa.bev, spec, w, cfg.n_r, disp, fmap=qa.fmap)
    (out / "profile.csv").write_text(profile_csv(rows))
    try:
        m = register(qa, qb.keypoints, qb.local, cfg)
    except (NoConsensusError, InsufficientDataError) as exc:
        print(f"no geometric consensus: {exc}", file=sys.stderr)
        m = None
    (out / "montage.pgm").write_bytes(rasterize_pgm(montage(qa.bev.pixels, qb.bev.pixels, m)))
    lines = ["q_u,q_v,db_u,db_v,distance,inlier"]
    if m is not None:
        for (qu, qv), (du, dv), d, ok in zip(m.q_uv, m.db_uv, m.distances, m.inliers):
            lines.append(f"{qu:g},{qv:g},{du:g},{dv:g},{d:.6f},{int(ok)}")
    (out / "matches.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.trajectory == "grid":
        traj = syn.grid_trajectory(args.frames, args.spacing, args.seed)
    elif args.trajectory == "line":
        traj = syn.line_trajectory(args.frames, args.spacing)
    else:
        traj = syn.loop_trajectory(args.frames, args.spacing, args.revisit)
    area = syn.world_extent(traj, args.range)
    n_landmarks = max(1, round(args.density * area * area))
    scene = syn.gen_synthetic_scene(args.seed, area, n_landmarks, traj, args.range, args.noise, args.dropout)
    out = Path(args.out)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    for i, (cloud, _) in enumerate(scene):
        save_cloud(cloud, out / "scans" / f"{i:06d}.bin")
    write_poses(traj, out / "poses.txt")
    print(f"wrote {len(scene)} scans to {out / 'scans'}", file=sys.stderr)
    return EXIT_OK


def cmd_init_weights(args) -> int:
    w = bb.init_weights(bb.default_spec(), args.seed)
    save_weights(w, args.out)
    print(f"{args.out}: sha256 {w.checksum()}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline configuration (override --config)")
    g.add_argument("--config", help="key = value configuration file")
    for f in fields(RunConfig):
        kind = field_types()[f.name]
        conv = (lambda s: s.lower() in ("1", "true", "yes")) if kind is bool else kind
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=conv, default=None,
                       help=f"default {f.default}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bevloc", description="BEV LiDAR place recognition and global localization")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build a place database from posed scans")
    p.add_argument("--scans", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write the build report here instead of stdout")
    _config_flags(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("localize", help="localize scans against a database")
    p.add_argument("--db", required=True)
    p.add_argument("--scans", required=True, nargs="+")
    p.add_argument("--out")
    p.add_argument("--no-timing", action="store_true", help="leave the ms column empty (reproducible output)")
    _config_flags(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("loop-eval", help="loop-closure evaluation over a posed sequence")
    p.add_argument("--scans", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True, help="output prefix for .report.txt and .pr.csv")
    _config_flags(p)
    p.set_defaults(func=cmd_loop_eval)

    p = sub.add_parser("analyze", help="feature-distance profile and match montage")
    p.add_argument("--scan", required=True)
    p.add_argument("--pair", help="second scan to match against (default: the scan itself)")
    p.add_argument("--out", required=True)
    p.add_argument("--max-disp", type=int, default=20)
    _config_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synth", help="write a synthetic posed scan sequence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--trajectory", choices=("grid", "line", "loop"), default="grid")
    p.add_argument("--spacing", type=float, default=20.0, help="metres between places or frames")
    p.add_argument("--revisit", type=int, default=0, help="extra loop frames retracing the start")
    p.add_argument("--density", type=float, default=0.009, help="landmarks per square metre")
    p.add_argument("--range", type=float, default=40.0)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--dropout", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init-weights", help="write seeded random backbone weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_weights)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, ParameterError, InsufficientDataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BevlocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error code
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
