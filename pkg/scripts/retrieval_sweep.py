"""Recall@1 and success rate for re-visits of a place grid, across grid spacings.

Every place is scanned once for the database and once more from the same spot
with a fresh heading. Small place counts keep a sweep within minutes.
"""
import argparse
import math

import numpy as np

from bevloc import database as dbm
from bevloc import eval as ev
from bevloc.config import RunConfig
from bevloc.geom import Se2Pose
from bevloc.synthetic import gen_synthetic_scene, grid_trajectory, world_extent


def run(n, spacing, cfg, seed):
    places = grid_trajectory(n, spacing, seed)
    rng = np.random.default_rng(seed + 1)
    queries = [Se2Pose(p.x, p.y, rng.uniform(-math.pi, math.pi)) for p in places]
    area = world_extent(places)
    landmarks = round(0.009 * area * area)
    db = dbm.build_database(gen_synthetic_scene(seed, area, landmarks, places), cfg)
    results = dbm.localize_many(db, [c for c, _ in gen_synthetic_scene(seed, area, landmarks, queries)], cfg)
    outs = []
    for i, (q, r) in enumerate(zip(queries, results)):
        m = places[r.match_id]
        outs.append(ev.EvalOutcome(i, r.match_id, r.distance, math.hypot(m.x - q.x, m.y - q.y), True, q, r.pose))
    return ev.recall_at_1(outs), ev.pose_errors(outs)[2]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--places", type=int, default=49)
    ap.add_argument("--spacings", type=float, nargs="+", default=[10.0, 15.0, 20.0, 30.0])
    ap.add_argument("--sharpness", type=float, default=30.0)
    ap.add_argument("--blur", type=float, default=3.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = RunConfig(sharpness=args.sharpness, blur_sigma=args.blur)
    print("spacing_m,recall_at_1,success_rate")
    for s in args.spacings:
        rec, sr = run(args.places, s, cfg, args.seed)
        print(f"{s:g},{rec:.4f},{sr:.4f}", flush=True)


if __name__ == "__main__":
    main()
