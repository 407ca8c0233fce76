"""Command line: generate | run | bench | ate."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys

from .bench import bench_scaling, write_csv
from .io import load_world, save_world
from .pipeline import STAGES, PipelineConfig, run_pipeline
from .plot import write_svg
from .runtime import default_workers
from .trajectory import compute_ate, read_tum, write_tum
from .world import SHAPES, SyntheticWorldConfig, generate_world


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_generate(a) -> int:
    cfg = SyntheticWorldConfig(
        shape=a.shape, n_poses=a.poses, n_landmarks=a.landmarks, sigma_t=a.sigma_t,
        sigma_r=math.radians(a.sigma_r), bit_flip=a.bit_flip, seed=a.seed,
    )
    world = generate_world(cfg)
    save_world(world, a.out)
    print(f"wrote {a.out}: {len(world.keyframes)} keyframes, {len(world.map_points)} map points, "
          f"{len(world.loop_labels)} loop labels")
    return 0


def cmd_run(a) -> int:
    world = load_world(a.world)
    cfg = PipelineConfig(workers=a.workers or default_workers(), repeat=a.repeat, detect=not a.no_detect)
    res = run_pipeline(world, cfg)
    report = res.report()
    report["config"] = cfg.to_dict()
    with open(a.report, "w") as fh:
        json.dump(report, fh, indent=2)
    if a.trajectory:
        write_tum(a.trajectory, res.corrected)
    if a.plot:
        write_svg(a.plot, {"ground truth": world.ground_truth, "drifted": world.drifted, "corrected": res.corrected})
    print(f"loops closed: {len(res.loops)}  failures: {len(res.failures)}")
    for ev in res.loops:
        print(f"  keyframe {ev.detection.current_kf_id} -> {ev.detection.matched_kf_id} "
              f"({ev.detection.verified} verified matches)")
    print(f"ATE before {res.ate_before.rmse:.4f} m, after {res.ate_after.rmse:.4f} m")
    for s in STAGES:
        print(f"  {s:20s} {res.timing.mean(s):9.2f} ± {res.timing.std(s):7.2f} ms")
    return 0


def cmd_bench(a) -> int:
    rows = bench_scaling(_ints(a.sizes), _ints(a.workers), repeat=a.repeat, backend=a.backend)
    write_csv(rows, a.out if a.out != "-" else sys.stdout)
    return 0


def cmd_ate(a) -> int:
    _, est = read_tum(a.est)
    _, gt = read_tum(a.gt)
    res = compute_ate(est, gt, align=not a.no_align)
    print(f"{res.rmse:.9f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loopcloser", description="Loop closing on synthetic SLAM worlds.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic world to JSON")
    g.add_argument("--shape", choices=SHAPES, default="circle")
    g.add_argument("--poses", type=int, default=100)
    g.add_argument("--landmarks", type=int, default=None)
    g.add_argument("--sigma-t", type=float, default=0.01, help="translation noise per step (m)")
    g.add_argument("--sigma-r", type=float, default=0.5, help="rotation noise per step (degrees)")
    g.add_argument("--bit-flip", type=float, default=0.02)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run the loop-closing pipeline on a world")
    r.add_argument("--world", required=True)
    r.add_argument("--workers", type=int, default=None, help="default: LOOPCLOSER_WORKERS or core count")
    r.add_argument("--repeat", type=int, default=1)
    r.add_argument("--report", required=True)
    r.add_argument("--plot", default=None, help="SVG of ground truth, drifted and corrected trajectories")
    r.add_argument("--trajectory", default=None, help="write the corrected trajectory (TUM format)")
    r.add_argument("--no-detect", action="store_true", help="skip loop detection")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="scaling benchmark, CSV output")
    b.add_argument("--sizes", default="100,500,2000")
    b.add_argument("--workers", default="1,2,4,8")
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--backend", choices=("thread", "process"), default="thread")
    b.add_argument("--out", default="-")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("ate", help="absolute trajectory error between two TUM files")
    t.add_argument("--est", required=True)
    t.add_argument("--gt", required=True)
    t.add_argument("--no-align", action="store_true")
    t.set_defaults(func=cmd_ate)
    return p


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return a.func(a)


if __name__ == "__main__":
    sys.exit(main())
