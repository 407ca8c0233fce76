"""Loop correction: pose propagation through the current window and map-point fusion.

Fusion is split in two. :func:`plan_fusion` runs inside a read phase and is
data-parallel over window keyframes; it only reads snapshots and returns a
plan. :func:`apply_fusion` executes the plan sequentially under the mutation
phase, so the map result does not depend on how planning was scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .geometry import Sim3Transform
from .loop_detect import LoopDetection
from .mapcore import NO_POINT, Map
from .matching import FUSION, ProjectionSearchParams, projection_search
from .runtime import BatchJob, Runtime, sequential


class CorrectedPoseSet(dict):
    """keyframe id -> ``(S_old, S_corrected)``; ``S_old`` always has scale 1."""

    def __init__(self, current: int, items=()):
        super().__init__(items)
        self.current = current

    def corrected(self, kf_id: int) -> Sim3Transform:
        return self[kf_id][1]

    def initial_estimates(self) -> dict[int, Sim3Transform]:
        return {k: v[1] for k, v in self.items()}


class FusionEntry(NamedTuple):
    kf_id: int
    feature_index: int
    survivor: int
    replaced: int | None  # None: new association of ``survivor`` at the feature


@dataclass
class FusionPlan:
    entries: list[FusionEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def check(self):
        slots = set()
        for e in self.entries:
            key = (e.kf_id, e.feature_index)
            if key in slots:
                raise ValueError(f"duplicate fusion slot {key}")
            slots.add(key)
            if e.replaced is not None and e.replaced == e.survivor:
                raise ValueError(f"entry {e} replaces a point with itself")


@dataclass
class FusionStats:
    replaced: int = 0
    associated: int = 0
    skipped: int = 0
    touched_keyframes: list[int] = field(default_factory=list)
    changed_connections: int = 0

    def to_dict(self) -> dict:
        return {
            "replaced": self.replaced,
            "associated": self.associated,
            "skipped": self.skipped,
            "touched_keyframes": len(self.touched_keyframes),
            "changed_connections": self.changed_connections,
        }


def correction_window(map_: Map, current: int) -> list[int]:
    """The current keyframe and its connected neighbours, ascending."""
    return sorted({current, *map_.connected(current)})


def propagate_correction(map_: Map, detection: LoopDetection, window=None) -> CorrectedPoseSet:
    """Move the current window onto the loop-corrected pose of the current keyframe.

    Every window keyframe keeps its old pose relative to the current one. Each
    map point seen by the window is moved once, with the keyframe it is
    anchored to (its reference keyframe when that is in the window, else the
    lowest-id window observer), and tagged with that keyframe in
    ``corrected_by`` so a later :func:`recover` moves it consistently.
    """
    if not detection.accepted:
        raise ValueError("cannot correct with a detection that was not accepted")
    map_._mutating()
    cur = detection.current_kf_id
    win = sorted(set(window) | {cur}) if window is not None else correction_window(map_, cur)
    T_cw = map_.keyframe(cur).pose
    S_cw = detection.corrected_pose(map_.keyframe(detection.matched_kf_id).pose)
    T_wc = T_cw.inverse()
    out = CorrectedPoseSet(cur)
    for k in win:
        T_iw = map_.keyframe(k).pose
        S_ic = (T_iw * T_wc).to_sim3()
        out[k] = (T_iw.to_sim3(), S_ic * S_cw)

    inwin = set(win)
    done: set[int] = set()
    for k in win:
        for pid in sorted(map_.keyframe(k).associated_points()):
            if pid in done:
                continue
            done.add(pid)
            p = map_.point(pid)
            anchor = p.ref_kf if p.ref_kf in inwin else min(o for o in p.observations if o in inwin)
            S_old, S_new = out[anchor]
            pos = S_new.inverse().act(S_old.act(p.position))
            R_rel = S_new.rotation_matrix().T @ S_old.rotation_matrix()
            ratio = 1.0 / S_new.scale
            map_.set_point_geometry(pid, pos, R_rel @ p.normal, p.d_min * ratio, p.d_max * ratio)
            p.corrected_by = anchor
    for k in win:
        map_.set_pose(k, out[k][1].to_se3())
    return out


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


class _PlanKernel:
    """Partial plans for window keyframes ``lo..hi-1``."""

    def __init__(self, snaps, poses, points, n_obs, params):
        self.snaps = snaps
        self.poses = poses
        self.points = points
        self.n_obs = n_obs
        self.params = params

    def __call__(self, lo, hi):
        out = []
        for k in range(lo, hi):
            snap = self.snaps[k]
            present = set(int(p) for p in snap.associations if p != NO_POINT)
            partial = []
            for m in projection_search(snap, self.poses[k], self.points, self.params):
                pid = m.map_point_id
                if pid in present:
                    continue
                f = m.feature_index
                occ = int(snap.associations[f])
                if occ == NO_POINT:
                    partial.append(FusionEntry(snap.kf_id, f, pid, None))
                    continue
                a, b = self.n_obs[pid], self.n_obs[occ]
                if a > b or (a == b and pid < occ):
                    partial.append(FusionEntry(snap.kf_id, f, pid, occ))
                else:
                    partial.append(FusionEntry(snap.kf_id, f, occ, pid))
            out.append(partial)
        return out


def plan_fusion(
    map_: Map,
    window_kfs,
    loop_points,
    corrected: CorrectedPoseSet,
    params: ProjectionSearchParams = FUSION,
    runtime: Runtime | None = None,
) -> FusionPlan:
    """Match the loop-side points into every window keyframe at its corrected pose.

    Pure function of the map state: keyframes are processed independently and
    their partial plans concatenated in ascending keyframe order, keeping the
    first entry for each (keyframe, feature) slot.
    """
    rt = runtime or sequential()
    kfs = sorted(set(window_kfs))
    ids = sorted({map_.resolve(int(p)) for p in loop_points})
    with map_.read_phase():
        snaps = [map_.snapshot(k) for k in kfs]
        poses = [corrected.corrected(k) if k in corrected else map_.keyframe(k).pose.to_sim3() for k in kfs]
        points = map_.point_arrays(ids)
        n_obs = {pid: len(map_.point(pid).observations) for pid in ids}
        for s in snaps:
            for p in s.associations:
                if p != NO_POINT and int(p) not in n_obs:
                    n_obs[int(p)] = len(map_.point(int(p)).observations)
        kern = _PlanKernel(snaps, poses, points, n_obs, params)
        partials = rt.run_batch(BatchJob(len(kfs), kern, chunk_size=1, name="fusion_plan"))
    plan = FusionPlan()
    seen = set()
    for part in partials:
        for e in part:
            key = (e.kf_id, e.feature_index)
            if key not in seen:
                seen.add(key)
                plan.entries.append(e)
    return plan


def apply_fusion(map_: Map, plan: FusionPlan) -> FusionStats:
    """Execute a plan in order, following forwarding ids for entries that an
    earlier entry already invalidated, then refresh the touched connections."""
    map_._mutating()
    st = FusionStats()
    touched: set[int] = set()
    for e in plan:
        if e.kf_id not in map_.keyframes:
            st.skipped += 1
            continue
        kf = map_.keyframe(e.kf_id)
        s = map_.resolve(e.survivor)
        if e.replaced is None:
            occ = int(kf.associations[e.feature_index])
            if occ != NO_POINT or e.kf_id in map_.point(s).observations:
                st.skipped += 1
                continue
            map_.add_association(e.kf_id, e.feature_index, s)
            touched |= set(map_.point(s).observations)
            st.associated += 1
            continue
        v = map_.resolve(e.replaced)
        if v == s:
            st.skipped += 1
            continue
        touched |= set(map_.point(v).observations) | set(map_.point(s).observations)
        map_.replace_map_point(v, s)
        st.replaced += 1
    changed = set()
    for k in sorted(touched):
        changed |= map_.update_connections(k)
    st.touched_keyframes = sorted(touched)
    st.changed_connections = len(changed)
    return st


def loop_connections(map_: Map, window, before: dict[int, set[int]], min_weight: int | None = None) -> list[tuple[int, int]]:
    """Pairs that fusion newly connected between the corrected window and the rest.

    ``before`` holds each window keyframe's covisible set prior to fusion.
    """
    th = map_.config.covis_threshold if min_weight is None else min_weight
    win = set(window)
    out = set()
    for k in window:
        for j, w in map_.covisible(k).items():
            if j not in win and j not in before.get(k, ()) and w >= th:
                out.add((min(k, j), max(k, j)))
    return sorted(out)
