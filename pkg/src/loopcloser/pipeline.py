"""End-to-end loop closing over a synthetic sequence, with per-stage timing."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import SE3Pose
from .loop_correct import (
    FusionStats,
    apply_fusion,
    correction_window,
    loop_connections,
    plan_fusion,
    propagate_correction,
)
from .loop_detect import LoopDetectConfig, LoopDetection, detect_loop, window_points
from .mapcore import NO_POINT, KeyFrame, Map, MapConfig, MapPoint
from .matching import FUSION, ProjectionSearchParams, WordIndex
from .posegraph import LMConfig, build_essential_problem, optimize, recover
from .runtime import Runtime
from .trajectory import AteResult, compute_ate
from .world import SyntheticWorld

log = logging.getLogger(__name__)

STAGES = ("region_detection", "loop_fusion", "graph_optimization", "loop_correction", "loop_closing_total")


@dataclass
class PipelineConfig:
    workers: int = 1
    backend: str = "thread"
    detect: bool = True
    repeat: int = 1
    min_loop_gap: int = 10  # keyframes between two accepted loops
    use_loop_connections: bool = True
    map: MapConfig = field(default_factory=MapConfig)
    detection: LoopDetectConfig = field(default_factory=LoopDetectConfig)
    fusion: ProjectionSearchParams = FUSION
    lm: LMConfig = field(default_factory=LMConfig)

    def to_dict(self) -> dict:
        return {
            "workers": self.workers,
            "backend": self.backend,
            "detect": self.detect,
            "repeat": self.repeat,
            "min_loop_gap": self.min_loop_gap,
            "use_loop_connections": self.use_loop_connections,
            "detection": self.detection.to_dict(),
            "fusion": self.fusion.to_dict(),
        }


@dataclass
class StageTimingReport:
    runs: list[dict[str, float]]
    workers: int
    metadata: dict = field(default_factory=dict)

    def mean(self, stage: str) -> float:
        return float(np.mean([r[stage] for r in self.runs]))

    def std(self, stage: str) -> float:
        vals = [r[stage] for r in self.runs]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def consistent(self) -> bool:
        for r in self.runs:
            if r["loop_closing_total"] < r["loop_correction"]:
                return False
            if r["loop_correction"] < max(r["loop_fusion"], r["graph_optimization"]):
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "workers": self.workers,
            "stages_ms": {s: {"mean": self.mean(s), "std": self.std(s), "runs": [r[s] for r in self.runs]} for s in STAGES},
            "metadata": dict(self.metadata),
        }


@dataclass
class LoopEvent:
    detection: LoopDetection
    fusion: FusionStats
    chi2_initial: float
    chi2_final: float
    lm_iterations: int
    stop_reason: str

    def to_dict(self) -> dict:
        d = self.detection.to_record()
        d.update(
            fusion=self.fusion.to_dict(),
            chi2_initial=self.chi2_initial,
            chi2_final=self.chi2_final,
            lm_iterations=self.lm_iterations,
            stop_reason=self.stop_reason,
        )
        return d


@dataclass
class PipelineResult:
    corrected: list[SE3Pose]
    timing: StageTimingReport
    ate_before: AteResult
    ate_after: AteResult
    loops: list[LoopEvent]
    failures: list[dict]
    counters: dict
    map: Map

    def trajectory_bytes(self) -> bytes:
        return np.array([np.r_[p.rotation, p.translation] for p in self.corrected]).tobytes()

    def report(self) -> dict:
        return {
            "timing": self.timing.to_dict(),
            "ate_before": self.ate_before.to_dict(),
            "ate_after": self.ate_after.to_dict(),
            "loops": [ev.to_dict() for ev in self.loops],
            "failures": list(self.failures),
            "runtime": dict(self.counters),
        }


class _Anchor:
    """Carries a loop correction forward onto keyframes still arriving at dead-reckoned poses.

    With ``T_c`` the dead-reckoned and ``C_c`` the corrected pose of the last
    corrected keyframe, a later keyframe ``T_k`` becomes ``T_k T_c^-1 C_c`` and
    its new points move by ``C_c^-1 T_c``; relative odometry is unchanged.
    """

    def __init__(self):
        self.to_new = None  # SE3 world map: old drifted world -> corrected world

    def set(self, drifted: SE3Pose, corrected: SE3Pose):
        self.to_new = corrected.inverse() * drifted

    def pose(self, T: SE3Pose) -> SE3Pose:
        return T if self.to_new is None else T * self.to_new.inverse()

    def point(self, p: np.ndarray) -> np.ndarray:
        return p if self.to_new is None else self.to_new.act(p)


def _insert(map_: Map, world: SyntheticWorld, k: int, anchor: _Anchor, points_by_id: dict[int, MapPoint]):
    src = world.keyframes[k]
    assoc = src.associations.copy()
    used = set()
    for f, pid in enumerate(assoc):
        if pid == NO_POINT:
            continue
        pid = int(pid)
        if pid not in map_.points:
            p = points_by_id[pid]
            map_.add_map_point(MapPoint(pid, anchor.point(p.position), p.normal, p.d_min, p.d_max, p.descriptor.copy()))
        r = map_.resolve(pid)
        if r in used:
            assoc[f] = NO_POINT
        else:
            assoc[f] = r
            used.add(r)
    kf = KeyFrame(src.id, anchor.pose(src.pose), src.intrinsics, src.uv.copy(), src.octaves.copy(),
                  src.descriptors.copy(), assoc, src.angles.copy(), src.word_ids)
    map_.insert_keyframe(kf)


def _close_loop(map_: Map, det: LoopDetection, cfg: PipelineConfig, rt: Runtime, times: dict) -> LoopEvent:
    t0 = time.perf_counter()
    window = correction_window(map_, det.current_kf_id)
    matched_window = det.window
    before = {k: set(map_.covisible(k)) for k in window}
    corrected = propagate_correction(map_, det, window)
    loop_pts = window_points(map_, matched_window)
    t1 = time.perf_counter()
    plan = plan_fusion(map_, window, loop_pts, corrected, cfg.fusion, rt)
    stats = apply_fusion(map_, plan)
    t2 = time.perf_counter()
    extra = loop_connections(map_, window, before) if cfg.use_loop_connections else None
    vertices, edges = build_essential_problem(map_, corrected, det, extra)
    initial = {k: v.estimate for k, v in vertices.items()}
    res = optimize(vertices, edges, cfg.lm, rt)
    recover(map_, res.vertices, initial)
    map_.add_loop_edge(det.current_kf_id, det.matched_kf_id)
    t3 = time.perf_counter()
    times["loop_fusion"] += 1e3 * (t2 - t1)
    times["graph_optimization"] += 1e3 * (t3 - t2)
    times["loop_correction"] += 1e3 * (t3 - t0)
    return LoopEvent(det, stats, res.initial_chi2, res.final_chi2, res.accepted_iterations, res.stop_reason)


def _run_once(world: SyntheticWorld, cfg: PipelineConfig, rt: Runtime):
    map_ = Map(cfg.map)
    index = WordIndex()
    anchor = _Anchor()
    points_by_id = {p.id: p for p in world.map_points}
    times = {s: 0.0 for s in STAGES}
    loops: list[LoopEvent] = []
    failures: list[dict] = []
    last_loop = -math.inf
    for k in range(len(world.keyframes)):
        _insert(map_, world, k, anchor, points_by_id)
        kf_id = world.keyframes[k].id
        if cfg.detect and k - last_loop > cfg.min_loop_gap:
            t0 = time.perf_counter()
            try:
                det = detect_loop(map_, kf_id, index, cfg.detection, rt)
            except Exception as exc:  # recorded, the run goes on
                failures.append({"keyframe": kf_id, "stage": "region_detection", "error": repr(exc)})
                det = None
            times["region_detection"] += 1e3 * (time.perf_counter() - t0)
            if det is not None:
                try:
                    loops.append(_close_loop(map_, det, cfg, rt, times))
                    last_loop = k
                    anchor.set(world.drifted[k], map_.keyframe(kf_id).pose)
                except Exception as exc:
                    failures.append({"keyframe": kf_id, "stage": "loop_correction", "error": repr(exc)})
                    log.warning("loop correction failed at keyframe %d: %r", kf_id, exc)
        index.add(kf_id, world.keyframes[k].word_ids)
    times["loop_closing_total"] = times["region_detection"] + times["loop_correction"]
    corrected = [map_.keyframe(kf.id).pose for kf in world.keyframes]
    return corrected, times, loops, failures, map_


def run_pipeline(world: SyntheticWorld, config: PipelineConfig | None = None, runtime: Runtime | None = None) -> PipelineResult:
    """Insert keyframes in order, detecting and closing loops as they appear.

    With ``repeat > 1`` the whole sequence is processed again from scratch
    for the timing statistics; the trajectory of the first run is returned.
    """
    cfg = config or PipelineConfig()
    own = runtime is None
    rt = runtime or Runtime(cfg.workers, backend=cfg.backend)
    try:
        runs = []
        first = None
        for _ in range(max(1, cfg.repeat)):
            out = _run_once(world, cfg, rt)
            runs.append(out[1])
            if first is None:
                first = out
        corrected, _, loops, failures, map_ = first
        counters = rt.counters()
    finally:
        if own:
            rt.close()
    timing = StageTimingReport(
        runs, rt.workers,
        {"keyframes": len(world.keyframes), "shape": world.config.shape, "seed": world.config.seed, "repeat": len(runs)},
    )
    before = compute_ate(world.drifted, world.ground_truth, align=True)
    after = compute_ate(corrected, world.ground_truth, align=True)
    return PipelineResult(corrected, timing, before, after, loops, failures, counters, map_)
