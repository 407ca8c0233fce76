"""Descriptor distance, grid radius lookup, batched projection search and the
inverted word index used for candidate retrieval."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Iterable, Mapping, NamedTuple

import numpy as np

from .geometry import DEPTH_EPS, Sim3Transform
from .mapcore import DESCRIPTOR_BYTES, KeyFrameSnapshot
from .runtime import BatchJob, Runtime, sequential

WORD_BITS = 16


class MatchResult(NamedTuple):
    map_point_id: int
    feature_index: int
    hamming_distance: int


@dataclass(frozen=True)
class ProjectionSearchParams:
    radius_multiplier: float = 2.5
    max_hamming: int = 50
    octave_tolerance: int = 1
    check_view_angle: bool = True
    check_distance_range: bool = True
    scale_factor: float = 1.2
    n_levels: int = 8
    min_view_cos: float = 0.5

    def __post_init__(self):
        if not self.radius_multiplier > 0:
            raise ValueError("radius_multiplier must be positive")
        if not 0 < self.max_hamming <= 256:
            raise ValueError("max_hamming must lie in (0, 256]")
        if self.octave_tolerance < 0:
            raise ValueError("octave_tolerance must be >= 0")

    def with_(self, **kw) -> "ProjectionSearchParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


NARROW = ProjectionSearchParams(radius_multiplier=2.5, max_hamming=50)
WIDE = ProjectionSearchParams(radius_multiplier=7.5, max_hamming=100)
FUSION = ProjectionSearchParams(radius_multiplier=4.0, max_hamming=50)


# ---------------------------------------------------------------------------
# descriptors
# ---------------------------------------------------------------------------


def hamming(a, b) -> int:
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    return int(np.bitwise_count(np.bitwise_xor(a, b)).sum(dtype=np.int64))


def hamming_rows(A, B) -> np.ndarray:
    """Row-wise distances between equally long descriptor arrays."""
    return np.bitwise_count(np.bitwise_xor(A, B)).sum(axis=-1, dtype=np.int64)


def hamming_matrix(A, B) -> np.ndarray:
    A = np.asarray(A, dtype=np.uint8)
    B = np.asarray(B, dtype=np.uint8)
    return np.bitwise_count(A[:, None, :] ^ B[None, :, :]).sum(axis=-1, dtype=np.int64)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


def word_bit_positions(seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(8 * DESCRIPTOR_BYTES, size=WORD_BITS, replace=False))


def descriptor_words(descriptors, positions) -> np.ndarray:
    """Word id of every descriptor: bit ``j`` of the word is descriptor bit ``positions[j]``."""
    d = np.asarray(descriptors, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    positions = np.asarray(positions, dtype=np.int64)
    bits = (d[:, positions // 8] >> (positions % 8).astype(np.uint8)) & 1
    weights = np.left_shift(1, np.arange(len(positions), dtype=np.int64))
    return bits.astype(np.int64) @ weights


def assign_words(descriptors, positions) -> frozenset:
    return frozenset(int(w) for w in descriptor_words(descriptors, positions))


class WordIndex:
    """Inverted index word -> keyframe ids, mirrored by per-keyframe word sets."""

    def __init__(self):
        self.inverted: dict[int, list[int]] = {}
        self.words: dict[int, frozenset] = {}

    def add(self, kf_id: int, words: Iterable[int]):
        if kf_id in self.words:
            self.remove(kf_id)
        ws = frozenset(int(w) for w in words)
        self.words[kf_id] = ws
        for w in ws:
            self.inverted.setdefault(w, []).append(kf_id)

    def remove(self, kf_id: int):
        for w in self.words.pop(kf_id, frozenset()):
            lst = self.inverted[w]
            lst.remove(kf_id)
            if not lst:
                del self.inverted[w]

    def shared_counts(self, words: Iterable[int]) -> dict[int, int]:
        counts: dict[int, int] = {}
        for w in words:
            for k in self.inverted.get(int(w), ()):
                counts[k] = counts.get(k, 0) + 1
        return counts

    def consistent(self) -> bool:
        rebuilt: dict[int, set[int]] = {}
        for k, ws in self.words.items():
            for w in ws:
                rebuilt.setdefault(w, set()).add(k)
        return rebuilt == {w: set(v) for w, v in self.inverted.items()} and all(
            len(v) == len(set(v)) for v in self.inverted.values()
        )


def detect_candidates(
    index: WordIndex,
    query_id: int,
    query_words: Iterable[int],
    n: int,
    exclusion: Iterable[int] = (),
    neighbours: Callable[[int], Iterable[int]] | None = None,
    min_score: int = 1,
) -> list[int]:
    """Top ``n`` loop candidates for a query keyframe.

    Candidates are keyframes sharing at least ``min_score`` words, minus the
    query and ``exclusion``. Ranked by (score desc, id asc); a candidate is
    dropped when ``neighbours`` links it to an already kept, better candidate,
    so each covisible group contributes only its best member.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    excluded = set(int(e) for e in exclusion) | {int(query_id)}
    counts = index.shared_counts(query_words)
    ranked = sorted(
        ((s, k) for k, s in counts.items() if k not in excluded and s >= max(1, min_score)),
        key=lambda x: (-x[0], x[1]),
    )
    kept: list[int] = []
    blocked: set[int] = set()
    for _, k in ranked:
        if k in blocked:
            continue
        kept.append(k)
        if len(kept) == n:
            break
        if neighbours is not None:
            blocked.update(int(j) for j in neighbours(k))
    return kept


# ---------------------------------------------------------------------------
# grid lookup
# ---------------------------------------------------------------------------


def _gather(snap: KeyFrameSnapshot, u, v, r):
    """Candidate (query, feature) pairs from the grid cells covering each disc."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    r = np.asarray(r, dtype=float)
    cw, ch = snap.cell_size
    cols, rows = snap.grid_cols, snap.grid_rows
    c0 = np.clip(np.floor((u - r) / cw), 0, cols - 1).astype(np.int64)
    c1 = np.clip(np.floor((u + r) / cw), 0, cols - 1).astype(np.int64)
    r0 = np.clip(np.floor((v - r) / ch), 0, rows - 1).astype(np.int64)
    r1 = np.clip(np.floor((v + r) / ch), 0, rows - 1).astype(np.int64)
    nc = c1 - c0 + 1
    nr = r1 - r0 + 1
    ncell = nc * nr
    q_of_cell = np.repeat(np.arange(len(u)), ncell)
    local = np.arange(ncell.sum()) - np.repeat(np.cumsum(ncell) - ncell, ncell)
    cell = (r0[q_of_cell] + local // nc[q_of_cell]) * cols + (c0[q_of_cell] + local % nc[q_of_cell])
    lo = snap.grid_start[cell]
    cnt = snap.grid_start[cell + 1] - lo
    q = np.repeat(q_of_cell, cnt)
    off = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    feat = snap.grid_index[np.repeat(lo, cnt) + off]
    du = snap.uv[feat, 0] - u[q]
    dv = snap.uv[feat, 1] - v[q]
    inside = du * du + dv * dv <= r[q] * r[q]
    return q[inside], feat[inside]


def features_in_radius(snap: KeyFrameSnapshot, u: float, v: float, r: float, octave_range=None) -> list[int]:
    """Feature indices within ``r`` pixels of ``(u, v)``, ascending.

    ``octave_range`` is an inclusive ``(lo, hi)`` pair; ``None`` keeps all.
    """
    if not r > 0:
        raise ValueError("radius must be positive")
    if not (math.isfinite(u) and math.isfinite(v)):
        return []
    _, feat = _gather(snap, [u], [v], [r])
    if octave_range is not None:
        lo, hi = octave_range
        o = snap.octaves[feat]
        feat = feat[(o >= lo) & (o <= hi)]
    return sorted(int(f) for f in feat)


# ---------------------------------------------------------------------------
# projection search
# ---------------------------------------------------------------------------

POINT_FIELDS = ("ids", "positions", "normals", "d_min", "d_max", "descriptors")


def predict_octave(dist, d_max, params: ProjectionSearchParams) -> np.ndarray:
    ratio = np.asarray(d_max, dtype=float) / np.asarray(dist, dtype=float)
    o = np.round(np.log(ratio) / math.log(params.scale_factor))
    return np.clip(o, 0, params.n_levels - 1).astype(np.int64)


class _SearchKernel:
    """Per-point projection and best-candidate selection over ``[lo, hi)``.

    Returns ``(feature, hamming)`` per point, ``-1`` where nothing qualifies.
    """

    def __init__(self, snap, pose: Sim3Transform, points, params: ProjectionSearchParams):
        self.snap = snap
        self.params = params
        self.points = points
        self.sR = pose.scale * pose.rotation_matrix()
        self.t = np.asarray(pose.translation)
        self.center = pose.camera_center()

    def __call__(self, lo, hi):
        P = self.params
        K = self.snap.intrinsics
        X = self.points["positions"][lo:hi]
        n = hi - lo
        best_f = np.full(n, -1, dtype=np.int64)
        best_h = np.full(n, -1, dtype=np.int64)
        if n == 0:
            return best_f, best_h
        Pc = X @ self.sR.T + self.t
        z = Pc[:, 2]
        ok = z > DEPTH_EPS
        zs = np.where(ok, z, 1.0)
        u = K.fx * Pc[:, 0] / zs + K.cx
        v = K.fy * Pc[:, 1] / zs + K.cy
        ok &= (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        ray = X - self.center
        dist = np.linalg.norm(ray, axis=1)
        d_min = self.points["d_min"][lo:hi]
        d_max = self.points["d_max"][lo:hi]
        if P.check_distance_range:
            ok &= (dist >= 0.8 * d_min) & (dist <= 1.2 * d_max)
        if P.check_view_angle:
            cosv = np.einsum("ij,ij->i", ray, self.points["normals"][lo:hi]) / np.where(dist > 0, dist, 1.0)
            ok &= cosv >= P.min_view_cos
        ok &= dist > 0
        idx = np.flatnonzero(ok)
        if len(idx) == 0:
            return best_f, best_h
        octave = predict_octave(dist[idx], d_max[idx], P)
        radius = P.radius_multiplier * P.scale_factor ** octave.astype(float)
        q, feat = _gather(self.snap, u[idx], v[idx], radius)
        fo = self.snap.octaves[feat]
        keep = (fo >= octave[q] - P.octave_tolerance) & (fo <= octave[q] + P.octave_tolerance)
        q, feat = q[keep], feat[keep]
        if len(q) == 0:
            return best_f, best_h
        pdesc = self.points["descriptors"][lo:hi][idx[q]]
        ham = hamming_rows(pdesc, self.snap.descriptors[feat])
        order = np.lexsort((feat, ham, q))
        q, feat, ham = q[order], feat[order], ham[order]
        first = np.ones(len(q), dtype=bool)
        first[1:] = q[1:] != q[:-1]
        q, feat, ham = q[first], feat[first], ham[first]
        good = ham <= P.max_hamming
        best_f[idx[q[good]]] = feat[good]
        best_h[idx[q[good]]] = ham[good]
        return best_f, best_h


def resolve_conflicts(ids, feats, hams) -> list[MatchResult]:
    """One result per feature (lower hamming, then lower id), sorted by point id."""
    ids = np.asarray(ids, dtype=np.int64)
    feats = np.asarray(feats, dtype=np.int64)
    hams = np.asarray(hams, dtype=np.int64)
    m = feats >= 0
    ids, feats, hams = ids[m], feats[m], hams[m]
    order = np.lexsort((ids, hams, feats))
    ids, feats, hams = ids[order], feats[order], hams[order]
    first = np.ones(len(ids), dtype=bool)
    first[1:] = feats[1:] != feats[:-1]
    ids, feats, hams = ids[first], feats[first], hams[first]
    order = np.argsort(ids, kind="stable")
    return [MatchResult(int(i), int(f), int(h)) for i, f, h in zip(ids[order], feats[order], hams[order])]


def projection_search(
    snapshot: KeyFrameSnapshot,
    pose: Sim3Transform,
    points: Mapping[str, np.ndarray],
    params: ProjectionSearchParams = NARROW,
    runtime: Runtime | None = None,
    chunk_size: int | None = None,
) -> list[MatchResult]:
    """Project a batch of map points into ``snapshot`` under ``pose`` (world to
    camera) and return descriptor matches, one per feature, sorted by point id.

    ``points`` holds the columns named in ``POINT_FIELDS`` (a dict or a staged
    view). Each point is processed independently, so the result does not
    depend on how the runtime splits the batch.
    """
    rt = runtime or sequential()
    n = len(points["ids"])
    kernel = _SearchKernel(snapshot, pose, points, params)
    feats, hams = rt.run_batch(BatchJob(n, kernel, chunk_size=chunk_size, name="projection_search"))
    return resolve_conflicts(points["ids"], feats, hams)


def stage_points(runtime: Runtime | None, arrays: Mapping[str, np.ndarray], name: str = "points"):
    """Pack point columns into a reusable staging buffer of ``runtime``."""
    payload = {k: arrays[k] for k in POINT_FIELDS}
    if runtime is None:
        return payload
    return runtime.stage(name, payload)
