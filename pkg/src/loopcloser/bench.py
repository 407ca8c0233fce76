"""Scaling benchmark for the two data-parallel stages: fusion planning and
pose-graph edge linearisation.

Workloads are built directly rather than through a full synthetic world so
that large sizes stay cheap to set up. A size ``n`` means ``n`` poses: the
pose graph gets about ``5 n`` edges and the fusion stage ``30 n`` loop points.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, SE3Pose, Sim3Transform, quat_from_rotvec
from .loop_correct import CorrectedPoseSet, plan_fusion
from .mapcore import DESCRIPTOR_BYTES, KeyFrame, Map, MapPoint
from .matching import FUSION
from .posegraph import PoseGraphEdge, PoseGraphVertex, linearize_edges
from .runtime import Runtime

BENCH_FIELDS = ("stage", "size", "workers", "ms", "speedup")
POINTS_PER_POSE = 30
EDGES_PER_POSE = 5


@dataclass
class FusionWorkload:
    map: Map
    window: list[int]
    loop_points: list[int]
    corrected: CorrectedPoseSet


def fusion_workload(n_points: int, n_keyframes: int = 8, seed: int = 0) -> FusionWorkload:
    """``n_keyframes`` cameras along a line, facing a slab of ``n_points`` points.

    Each keyframe observes a random third of the points (unassociated
    features), so planning runs a full projection search per keyframe.
    """
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    spacing = 0.5
    pts = np.column_stack([
        rng.uniform(-5.0, 5.0 + spacing * n_keyframes, n_points),
        rng.uniform(-3.5, 3.5, n_points),
        rng.uniform(6.0, 14.0, n_points),
    ])
    desc = rng.integers(0, 256, (n_points, DESCRIPTOR_BYTES), dtype=np.uint8)
    m = Map()
    ids = []
    for i in range(n_points):
        d = float(np.linalg.norm(pts[i]))
        m.add_map_point(MapPoint(i, pts[i], pts[i], d / 1.2**7, d, desc[i]))
        ids.append(i)
    window = []
    for k in range(n_keyframes):
        pose = SE3Pose(np.array([1.0, 0, 0, 0]), np.array([-spacing * k, 0.0, 0.0]))
        Pc = pts + pose.translation
        uv = np.column_stack([K.fx * Pc[:, 0] / Pc[:, 2] + K.cx, K.fy * Pc[:, 1] / Pc[:, 2] + K.cy])
        vis = (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
        sel = np.flatnonzero(vis & (rng.random(n_points) < 1 / 3))
        f_uv = uv[sel] + rng.normal(0, 0.5, (len(sel), 2))
        flips = np.packbits(rng.random((len(sel), 8 * DESCRIPTOR_BYTES)) < 0.02, axis=1, bitorder="little")
        kf = KeyFrame(1_000_000 + k, pose, K, f_uv, np.zeros(len(sel), dtype=np.int64), desc[sel] ^ flips)
        m.insert_keyframe(kf)
        window.append(kf.id)
    corrected = CorrectedPoseSet(window[-1])
    for k in window:
        S = m.keyframe(k).pose.to_sim3()
        corrected[k] = (S, S)
    return FusionWorkload(m, window, ids, corrected)


def graph_workload(n_vertices: int, seed: int = 0):
    """Noisy circle of ``n_vertices`` poses; each pose linked to its five predecessors."""
    rng = np.random.default_rng(seed)
    gt = []
    for k in range(n_vertices):
        a = 2 * math.pi * k / n_vertices
        q = quat_from_rotvec(np.array([0.0, a, 0.0]))
        gt.append(Sim3Transform(1.0, q, np.array([10 * math.cos(a), 0.0, 10 * math.sin(a)])))
    vertices = {}
    for k, S in enumerate(gt):
        noise = Sim3Transform.exp(np.r_[rng.normal(0, 0.05, 3), rng.normal(0, 0.01, 3), rng.normal(0, 0.01)])
        vertices[k] = PoseGraphVertex(k, S if k == 0 else noise * S, k == 0)
    edges = []
    for k in range(1, n_vertices):
        for d in range(1, EDGES_PER_POSE + 1):
            if k - d >= 0:
                j = k - d
                edges.append(PoseGraphEdge(k, j, gt[k] * gt[j].inverse(), "tree" if d == 1 else "covisibility"))
    return vertices, edges


def _time(fn, repeat: int) -> float:
    vals = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        vals.append(1e3 * (time.perf_counter() - t0))
    return statistics.median(vals)


def bench_scaling(sizes, workers, repeat: int = 3, seed: int = 0, backend: str = "thread") -> list[dict]:
    """Rows of ``(stage, size, workers, ms, speedup)`` with speedup against one worker."""
    sizes = [int(s) for s in sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    workers = sorted({int(w) for w in workers} | {1})
    rows = []
    for n in sizes:
        fw = fusion_workload(POINTS_PER_POSE * n, seed=seed)
        gv, ge = graph_workload(n, seed=seed)
        stages = {
            "fusion_plan": lambda rt: plan_fusion(fw.map, fw.window, fw.loop_points, fw.corrected, FUSION, rt),
            "edge_linearize": lambda rt: linearize_edges(gv, ge, rt),
        }
        for stage, fn in stages.items():
            base = None
            for w in workers:
                with Runtime(w, backend=backend) as rt:
                    fn(rt)  # warm-up: pool start and staging
                    ms = _time(lambda: fn(rt), repeat)
                if w == 1:
                    base = ms
                rows.append({"stage": stage, "size": n, "workers": w, "ms": ms, "speedup": base / ms if w != 1 else 1.0})
    return rows


def write_csv(rows, path_or_file):
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        wr = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        wr.writeheader()
        for r in rows:
            wr.writerow({**r, "ms": f"{r['ms']:.3f}", "speedup": f"{r['speedup']:.3f}"})
    finally:
        if own:
            fh.close()
