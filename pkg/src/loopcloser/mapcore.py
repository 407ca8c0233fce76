"""The shared map: keyframes, map points, covisibility and the spanning tree,
plus the immutable snapshot store every parallel stage reads from.

Mutation and reading alternate in phases. Inside ``with map.read_phase():``
any mutating call raises :class:`PhaseError`; snapshots and the frozen
arrays they hold are safe to hand to any number of workers.

Covisibility is kept in two layers:

* ``weight(i, j)`` is the exact number of points observed by both keyframes
  and is maintained incrementally on every observation change;
* ``connections`` is the thresholded edge view (``covis_threshold``, default
  15) that window construction uses. It is only refreshed by
  :meth:`Map.update_connections`, mirroring the explicit connection update
  step after fusion.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .geometry import CameraIntrinsics, SE3Pose

DESCRIPTOR_BYTES = 32
NO_POINT = -1


class PhaseError(RuntimeError):
    pass


class MapError(KeyError):
    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


@dataclass
class MapConfig:
    covis_threshold: int = 15
    essential_threshold: int = 100
    grid_cols: int = 64
    grid_rows: int = 48


class KeyPoint(NamedTuple):
    u: float
    v: float
    octave: int
    angle: float = 0.0


def _as_descriptors(d) -> np.ndarray:
    d = np.ascontiguousarray(d, dtype=np.uint8)
    if d.ndim != 2 or d.shape[1] != DESCRIPTOR_BYTES:
        raise ValueError(f"descriptors must be (n, {DESCRIPTOR_BYTES}) uint8, got {d.shape}")
    return d


@dataclass(eq=False)
class KeyFrame:
    """A keyframe. Features are stored column-wise (``uv[i]``, ``octaves[i]``,
    ``descriptors[i]``, ``associations[i]``); ``associations`` holds a map point
    id or ``-1``."""

    id: int
    pose: SE3Pose
    intrinsics: CameraIntrinsics
    uv: np.ndarray
    octaves: np.ndarray
    descriptors: np.ndarray
    associations: np.ndarray | None = None
    angles: np.ndarray | None = None
    word_ids: frozenset = frozenset()

    def __post_init__(self):
        self.id = int(self.id)
        self.uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)
        n = len(self.uv)
        self.octaves = np.asarray(self.octaves, dtype=np.int64).reshape(n)
        self.descriptors = _as_descriptors(self.descriptors)
        if len(self.descriptors) != n:
            raise ValueError("keypoints and descriptors differ in length")
        if self.associations is None:
            self.associations = np.full(n, NO_POINT, dtype=np.int64)
        else:
            self.associations = np.array(self.associations, dtype=np.int64).reshape(n)
        self.angles = np.zeros(n) if self.angles is None else np.asarray(self.angles, dtype=float).reshape(n)
        self.word_ids = frozenset(int(w) for w in self.word_ids)
        if np.any(self.octaves < 0):
            raise ValueError("negative octave")

    @property
    def n_features(self) -> int:
        return len(self.uv)

    @property
    def keypoints(self) -> list[KeyPoint]:
        return [KeyPoint(float(u), float(v), int(o), float(a)) for (u, v), o, a in zip(self.uv, self.octaves, self.angles)]

    def associated_points(self) -> set[int]:
        return {int(p) for p in self.associations if p != NO_POINT}


@dataclass(eq=False)
class MapPoint:
    id: int
    position: np.ndarray
    normal: np.ndarray
    d_min: float
    d_max: float
    descriptor: np.ndarray
    observations: dict[int, int] = field(default_factory=dict)
    replaced_by: int | None = None
    ref_kf: int | None = None
    corrected_by: int | None = None  # keyframe whose loop correction last moved it

    def __post_init__(self):
        self.id = int(self.id)
        self.position = np.array(self.position, dtype=float).reshape(3)
        nrm = np.array(self.normal, dtype=float).reshape(3)
        ln = np.linalg.norm(nrm)
        self.normal = nrm / ln if ln > 0 else nrm
        self.d_min = float(self.d_min)
        self.d_max = float(self.d_max)
        if not (0.0 < self.d_min <= self.d_max):
            raise ValueError(f"invalid distance range [{self.d_min}, {self.d_max}]")
        self.descriptor = np.array(self.descriptor, dtype=np.uint8).reshape(DESCRIPTOR_BYTES)
        self.observations = {int(k): int(v) for k, v in self.observations.items()}

    @property
    def is_bad(self) -> bool:
        return self.replaced_by is not None


@dataclass(frozen=True, eq=False)
class KeyFrameSnapshot:
    """Flat, read-only copy of a keyframe as staged at ``version``.

    ``grid_start``/``grid_index`` form a CSR index: the features in cell
    ``c = row * grid_cols + col`` are ``grid_index[grid_start[c]:grid_start[c+1]]``
    in ascending order.
    """

    kf_id: int
    version: int
    pose: SE3Pose
    intrinsics: CameraIntrinsics
    uv: np.ndarray
    octaves: np.ndarray
    descriptors: np.ndarray
    associations: np.ndarray
    grid_cols: int
    grid_rows: int
    grid_start: np.ndarray
    grid_index: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.uv)

    @property
    def cell_size(self) -> tuple[float, float]:
        return self.intrinsics.width / self.grid_cols, self.intrinsics.height / self.grid_rows

    def cell_of(self, uv) -> tuple[np.ndarray, np.ndarray]:
        cw, ch = self.cell_size
        uv = np.asarray(uv, dtype=float)
        col = np.clip(np.floor(uv[..., 0] / cw), 0, self.grid_cols - 1).astype(np.int64)
        row = np.clip(np.floor(uv[..., 1] / ch), 0, self.grid_rows - 1).astype(np.int64)
        return col, row


def _ro(a) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def build_snapshot(kf: KeyFrame, version: int, cols: int, rows: int) -> KeyFrameSnapshot:
    uv = _ro(kf.uv)
    cw, ch = kf.intrinsics.width / cols, kf.intrinsics.height / rows
    col = np.clip(np.floor(uv[:, 0] / cw), 0, cols - 1).astype(np.int64)
    row = np.clip(np.floor(uv[:, 1] / ch), 0, rows - 1).astype(np.int64)
    cell = row * cols + col
    order = np.argsort(cell, kind="stable")
    counts = np.bincount(cell, minlength=rows * cols)
    start = np.zeros(rows * cols + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    return KeyFrameSnapshot(
        kf_id=kf.id,
        version=version,
        pose=kf.pose,
        intrinsics=kf.intrinsics,
        uv=uv,
        octaves=_ro(kf.octaves),
        descriptors=_ro(kf.descriptors),
        associations=_ro(kf.associations),
        grid_cols=cols,
        grid_rows=rows,
        grid_start=_ro(start),
        grid_index=_ro(order.astype(np.int64)),
    )


def _pair(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


class Map:
    def __init__(self, config: MapConfig | None = None):
        self.config = config or MapConfig()
        self.keyframes: dict[int, KeyFrame] = {}
        self.points: dict[int, MapPoint] = {}
        self._weights: dict[int, dict[int, int]] = {}
        self.connections: dict[tuple[int, int], int] = {}
        self.parent: dict[int, int | None] = {}
        self.loop_edges: set[tuple[int, int]] = set()
        self._snapshots: dict[int, KeyFrameSnapshot] = {}
        self._versions: dict[int, int] = {}
        self._stale: set[int] = set()
        self.repacks = 0
        self._read_depth = 0
        self._lock = threading.RLock()
        self._next_point_id = 0

    # phases -----------------------------------------------------------------
    @contextlib.contextmanager
    def read_phase(self):
        with self._lock:
            self._read_depth += 1
        try:
            yield self
        finally:
            with self._lock:
                self._read_depth -= 1

    @property
    def in_read_phase(self) -> bool:
        return self._read_depth > 0

    def _mutating(self):
        if self._read_depth:
            raise PhaseError("map mutation attempted during a read phase")

    # lookup -----------------------------------------------------------------
    def keyframe(self, kf_id: int) -> KeyFrame:
        try:
            return self.keyframes[kf_id]
        except KeyError:
            raise MapError(f"unknown keyframe {kf_id}") from None

    def point(self, pid: int) -> MapPoint:
        try:
            return self.points[pid]
        except KeyError:
            raise MapError(f"unknown map point {pid}") from None

    def resolve(self, pid: int) -> int:
        """Follow forwarding ids to the live point."""
        p = self.point(pid)
        seen = 0
        while p.replaced_by is not None:
            p = self.point(p.replaced_by)
            seen += 1
            if seen > len(self.points):
                raise MapError(f"forwarding cycle at point {pid}")
        return p.id

    def live_points(self) -> list[int]:
        return sorted(pid for pid, p in self.points.items() if p.replaced_by is None)

    def keyframe_ids(self) -> list[int]:
        return sorted(self.keyframes)

    # observations ---------------------------------------------------------
    def _link(self, p: MapPoint, kf: KeyFrame, feat: int):
        for other in p.observations:
            if other != kf.id:
                self._bump(kf.id, other, 1)
        p.observations[kf.id] = feat
        kf.associations[feat] = p.id
        if p.ref_kf is None or p.ref_kf not in p.observations:
            p.ref_kf = min(p.observations)
        self._stale.add(kf.id)

    def _unlink(self, p: MapPoint, kf: KeyFrame):
        feat = p.observations.pop(kf.id)
        for other in p.observations:
            self._bump(kf.id, other, -1)
        if kf.associations[feat] == p.id:
            kf.associations[feat] = NO_POINT
        if p.ref_kf == kf.id:
            p.ref_kf = min(p.observations) if p.observations else None
        self._stale.add(kf.id)

    def _bump(self, a: int, b: int, d: int):
        wa = self._weights.setdefault(a, {})
        wb = self._weights.setdefault(b, {})
        w = wa.get(b, 0) + d
        if w < 0:
            raise AssertionError(f"negative covisibility weight between {a} and {b}")
        if w == 0:
            wa.pop(b, None)
            wb.pop(a, None)
        else:
            wa[b] = w
            wb[a] = w

    def add_map_point(self, point: MapPoint) -> int:
        """Register a point with no observations yet (links come from keyframes)."""
        self._mutating()
        if point.id in self.points:
            raise ValueError(f"duplicate map point id {point.id}")
        if point.observations:
            raise ValueError("new map points must start without observations")
        self.points[point.id] = point
        self._next_point_id = max(self._next_point_id, point.id + 1)
        return point.id

    def new_point_id(self) -> int:
        return self._next_point_id

    def add_association(self, kf_id: int, feat: int, pid: int):
        self._mutating()
        kf = self.keyframe(kf_id)
        p = self.point(pid)
        if p.is_bad:
            raise ValueError(f"point {pid} has been replaced")
        if kf.associations[feat] != NO_POINT:
            raise ValueError(f"feature {feat} of keyframe {kf_id} already associated")
        if kf_id in p.observations:
            raise ValueError(f"point {pid} already observed by keyframe {kf_id}")
        self._link(p, kf, int(feat))

    def remove_association(self, kf_id: int, feat: int):
        self._mutating()
        kf = self.keyframe(kf_id)
        pid = int(kf.associations[feat])
        if pid == NO_POINT:
            return
        self._unlink(self.point(pid), kf)

    # keyframes --------------------------------------------------------------
    def insert_keyframe(self, kf: KeyFrame) -> int:
        self._mutating()
        if kf.id in self.keyframes:
            raise ValueError(f"duplicate keyframe id {kf.id}")
        assoc = kf.associations.copy()
        seen: set[int] = set()
        for f, pid in enumerate(assoc):
            if pid == NO_POINT:
                continue
            p = self.point(int(pid))
            if p.is_bad:
                raise ValueError(f"keyframe {kf.id} references replaced point {pid}")
            if pid in seen:
                raise ValueError(f"keyframe {kf.id} associates point {pid} twice")
            seen.add(int(pid))
        self.keyframes[kf.id] = kf
        self._weights.setdefault(kf.id, {})
        kf.associations[:] = NO_POINT
        for f, pid in enumerate(assoc):
            if pid != NO_POINT:
                self._link(self.points[int(pid)], kf, f)
        w = self._weights[kf.id]
        if w:
            best = max(w.values())
            self.parent[kf.id] = min(j for j, v in w.items() if v == best)
        else:
            older = [k for k in self.keyframes if k < kf.id]
            others = [k for k in self.keyframes if k != kf.id]
            self.parent[kf.id] = max(older) if older else (min(others) if others else None)
        self._refresh_connections(kf.id)
        self._stale.discard(kf.id)
        self._stage(kf.id)
        return kf.id

    def set_pose(self, kf_id: int, pose: SE3Pose):
        self._mutating()
        self.keyframe(kf_id).pose = pose
        self._stale.add(kf_id)

    def set_point_geometry(self, pid: int, position, normal=None, d_min=None, d_max=None):
        self._mutating()
        p = self.point(pid)
        p.position = np.array(position, dtype=float).reshape(3)
        if normal is not None:
            n = np.asarray(normal, dtype=float).reshape(3)
            p.normal = n / np.linalg.norm(n)
        if d_min is not None:
            p.d_min, p.d_max = float(d_min), float(d_max)

    def add_loop_edge(self, a: int, b: int):
        self._mutating()
        self.keyframe(a), self.keyframe(b)
        if a == b:
            raise ValueError("loop edge needs two keyframes")
        self.loop_edges.add(_pair(a, b))

    # covisibility -----------------------------------------------------------
    def weight(self, a: int, b: int) -> int:
        return self._weights.get(a, {}).get(b, 0)

    def covisible(self, kf_id: int) -> dict[int, int]:
        """Exact covisibility weights of ``kf_id`` (all weights > 0)."""
        self.keyframe(kf_id)
        return dict(self._weights.get(kf_id, {}))

    def connected(self, kf_id: int) -> list[int]:
        """Neighbours in the thresholded connection view, strongest first."""
        self.keyframe(kf_id)
        out = []
        for (a, b), w in self.connections.items():
            if a == kf_id:
                out.append((w, b))
            elif b == kf_id:
                out.append((w, a))
        out.sort(key=lambda x: (-x[0], x[1]))
        return [j for _, j in out]

    def _recount(self, kf_id: int) -> dict[int, int]:
        counts: dict[int, int] = {}
        for pid in self.keyframes[kf_id].associated_points():
            for other in self.points[pid].observations:
                if other != kf_id:
                    counts[other] = counts.get(other, 0) + 1
        return counts

    def _strongest(self, weights: dict[int, int]) -> int | None:
        if not weights:
            return None
        best = max(weights.values())
        return min(j for j, v in weights.items() if v == best)

    def _keeps(self, a: int, b: int, w: int) -> bool:
        th = self.config.covis_threshold
        if w >= th:
            return True
        for x, y in ((a, b), (b, a)):
            wx = self._weights.get(x, {})
            if not any(v >= th for v in wx.values()) and self._strongest(wx) == y:
                return True
        return False

    def _refresh_connections(self, kf_id: int) -> set[tuple[int, int]]:
        weights = self._weights.get(kf_id, {})
        want = {}
        for j, w in weights.items():
            if self._keeps(kf_id, j, w):
                want[_pair(kf_id, j)] = w
        have = {e: w for e, w in self.connections.items() if kf_id in e}
        changed = {e for e in set(want) | set(have) if want.get(e) != have.get(e)}
        for e in have:
            if e not in want:
                del self.connections[e]
        self.connections.update(want)
        return changed

    def update_connections(self, kf_id: int) -> set[tuple[int, int]]:
        """Recount weights incident to ``kf_id`` and refresh its thresholded edges.

        Returns the set of connection pairs whose presence or weight changed.
        """
        self._mutating()
        self.keyframe(kf_id)
        counts = self._recount(kf_id)
        if counts != self._weights.get(kf_id, {}):
            raise AssertionError(f"incremental covisibility drifted for keyframe {kf_id}")
        return self._refresh_connections(kf_id)

    # points -----------------------------------------------------------------
    def replace_map_point(self, victim_id: int, survivor_id: int):
        self._mutating()
        if victim_id == survivor_id:
            raise ValueError("victim and survivor are the same point")
        victim, survivor = self.point(victim_id), self.point(survivor_id)
        if victim.is_bad or survivor.is_bad:
            raise ValueError("cannot replace an already replaced point")
        for kf_id, feat in sorted(victim.observations.items()):
            kf = self.keyframes[kf_id]
            self._unlink(victim, kf)
            if kf_id not in survivor.observations:
                self._link(survivor, kf, feat)
        victim.replaced_by = survivor_id
        victim.ref_kf = None

    # snapshots --------------------------------------------------------------
    def _stage(self, kf_id: int) -> KeyFrameSnapshot:
        v = self._versions.get(kf_id, 0) + 1
        snap = build_snapshot(self.keyframes[kf_id], v, self.config.grid_cols, self.config.grid_rows)
        self._versions[kf_id] = v
        self._snapshots[kf_id] = snap
        self.repacks += 1
        return snap

    def snapshot(self, kf_id: int) -> KeyFrameSnapshot:
        with self._lock:
            self.keyframe(kf_id)
            if kf_id in self._stale or kf_id not in self._snapshots:
                self._stale.discard(kf_id)
                return self._stage(kf_id)
            return self._snapshots[kf_id]

    def is_stale(self, kf_id: int) -> bool:
        return kf_id in self._stale

    def point_arrays(self, ids: Iterable[int]) -> dict[str, np.ndarray]:
        """Column arrays for a batch of points, in the given order."""
        ids = np.asarray(list(ids), dtype=np.int64)
        pts = [self.points[int(i)] for i in ids]
        n = len(pts)
        return {
            "ids": ids,
            "positions": np.array([p.position for p in pts]).reshape(n, 3),
            "normals": np.array([p.normal for p in pts]).reshape(n, 3),
            "d_min": np.array([p.d_min for p in pts], dtype=float),
            "d_max": np.array([p.d_max for p in pts], dtype=float),
            "descriptors": np.array([p.descriptor for p in pts], dtype=np.uint8).reshape(n, DESCRIPTOR_BYTES),
        }

    # essential graph --------------------------------------------------------
    def tree_edges(self) -> list[tuple[int, int]]:
        return sorted(_pair(k, p) for k, p in self.parent.items() if p is not None)

    def essential_edges(self) -> dict[str, list[tuple[int, int]]]:
        tree = self.tree_edges()
        skip = set(tree) | self.loop_edges
        th = self.config.essential_threshold
        covis = sorted(
            _pair(a, b)
            for a, nb in self._weights.items()
            for b, w in nb.items()
            if a < b and w >= th and _pair(a, b) not in skip
        )
        return {"tree": tree, "loop": sorted(self.loop_edges), "covisibility": covis}

    # audit ------------------------------------------------------------------
    def brute_force_covisibility(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for p in self.points.values():
            obs = sorted(p.observations)
            for i in range(len(obs)):
                for j in range(i + 1, len(obs)):
                    e = (obs[i], obs[j])
                    counts[e] = counts.get(e, 0) + 1
        return counts

    def tree_problems(self) -> list[str]:
        issues = []
        roots = [k for k, p in self.parent.items() if p is None]
        if self.keyframes and len(roots) != 1:
            issues.append(f"spanning tree has {len(roots)} roots")
        for k in self.keyframes:
            seen = set()
            cur = k
            while cur is not None:
                if cur in seen:
                    issues.append(f"cycle in spanning tree through {k}")
                    break
                seen.add(cur)
                if cur not in self.parent:
                    issues.append(f"keyframe {cur} missing from spanning tree")
                    break
                cur = self.parent[cur]
        return issues

    def audit(self) -> list[str]:
        issues: list[str] = []
        for kf in self.keyframes.values():
            for f, pid in enumerate(kf.associations):
                if pid == NO_POINT:
                    continue
                p = self.points.get(int(pid))
                if p is None:
                    issues.append(f"kf {kf.id} feature {f} references missing point {pid}")
                elif p.is_bad:
                    issues.append(f"kf {kf.id} feature {f} references replaced point {pid}")
                elif p.observations.get(kf.id) != f:
                    issues.append(f"kf {kf.id} feature {f} -> point {pid} not mirrored")
        for p in self.points.values():
            if p.is_bad and p.observations:
                issues.append(f"replaced point {p.id} still has observations")
            if not (0.0 < p.d_min <= p.d_max):
                issues.append(f"point {p.id} has invalid distance range")
            for kf_id, f in p.observations.items():
                kf = self.keyframes.get(kf_id)
                if kf is None:
                    issues.append(f"point {p.id} observed by missing keyframe {kf_id}")
                elif kf.associations[f] != p.id:
                    issues.append(f"point {p.id} observation ({kf_id}, {f}) not mirrored")
            if p.observations and p.ref_kf not in p.observations:
                issues.append(f"point {p.id} reference keyframe {p.ref_kf} does not observe it")
        brute = self.brute_force_covisibility()
        inc = {(a, b): w for a, nb in self._weights.items() for b, w in nb.items() if a < b}
        if brute != inc:
            bad = sorted(set(brute.items()) ^ set(inc.items()))[:5]
            issues.append(f"covisibility weights differ from recount: {bad}")
        for a, nb in self._weights.items():
            for b, w in nb.items():
                if self._weights.get(b, {}).get(a) != w:
                    issues.append(f"asymmetric weight {a}-{b}")
        issues.extend(self.tree_problems())
        for k, snap in self._snapshots.items():
            if k not in self._stale and snap.pose is not self.keyframes[k].pose:
                issues.append(f"snapshot of {k} is stale but not flagged")
        return issues
