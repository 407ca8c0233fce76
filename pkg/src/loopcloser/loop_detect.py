"""Region detection: candidate retrieval, RANSAC Sim3 estimation, Sim3
refinement with the narrow/wide searches run as a task pair, and triple
keyframe verification as one batched job.

Transform naming: ``S_cm`` maps points from the matched keyframe's camera
frame into the current keyframe's camera frame, so the corrected current pose
is ``S_cm * T_mw``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import DEPTH_EPS, CameraIntrinsics, Sim3Transform, k_sim3_act, k_sim3_exp, k_sim3_inv, k_sim3_mul
from .mapcore import NO_POINT, KeyFrameSnapshot, Map
from .matching import (
    NARROW,
    WIDE,
    MatchResult,
    ProjectionSearchParams,
    WordIndex,
    _SearchKernel,
    detect_candidates,
    hamming_rows,
    predict_octave,
    projection_search,
    resolve_conflicts,
    stage_points,
)
from .runtime import BatchJob, Runtime, TaskPair, sequential


class RefineError(RuntimeError):
    pass


@dataclass
class LoopDetectConfig:
    n_candidates: int = 3
    min_shared_words: int = 30
    ps1_max_hamming: int = 50
    ransac_iterations: int = 300
    ransac_chi2: float = 9.21
    min_inliers: int = 20
    huber_px: float = 2.45
    stereo_bf: float = 250.0  # virtual right camera: focal length times baseline (px * m)
    refine_iterations: int = 10
    refine_tol: float = 1e-6
    accept_threshold: int = 100
    scale_factor: float = 1.2
    seed: int = 0
    narrow: ProjectionSearchParams = NARROW
    wide: ProjectionSearchParams = WIDE

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["narrow"] = self.narrow.to_dict()
        d["wide"] = self.wide.to_dict()
        return d


# ---------------------------------------------------------------------------
# closed-form similarity and RANSAC
# ---------------------------------------------------------------------------


def horn_similarity(A, B) -> Sim3Transform | None:
    """Least-squares ``S`` with ``A ~ S(B)`` via the quaternion eigenvector of
    Horn's 4x4 matrix; scale is the ratio of centred norms."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    a, b = A - ca, B - cb
    nb = np.sum(b * b)
    na = np.sum(a * a)
    if nb < 1e-18 or na < 1e-18:
        return None
    M = b.T @ a  # sum of b_i a_i^T
    Sxx, Sxy, Sxz = M[0]
    Syx, Syy, Syz = M[1]
    Szx, Szy, Szz = M[2]
    N = np.array(
        [
            [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
            [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
            [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
            [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
        ]
    )
    w, V = np.linalg.eigh(N)
    q = V[:, -1]
    s = math.sqrt(na / nb)
    S0 = Sim3Transform(s, q, np.zeros(3))
    t = ca - S0.act(cb)
    return Sim3Transform(s, q, t)


@dataclass
class Correspondences:
    """3D-3D matches between keyframes ``a`` and ``b`` in their camera frames,
    with the observed pixel and octave on each side."""

    xyz_a: np.ndarray
    xyz_b: np.ndarray
    uv_a: np.ndarray
    uv_b: np.ndarray
    octave_a: np.ndarray
    octave_b: np.ndarray

    def __post_init__(self):
        self.xyz_a = np.asarray(self.xyz_a, dtype=float).reshape(-1, 3)
        n = len(self.xyz_a)
        self.xyz_b = np.asarray(self.xyz_b, dtype=float).reshape(n, 3)
        self.uv_a = np.asarray(self.uv_a, dtype=float).reshape(n, 2)
        self.uv_b = np.asarray(self.uv_b, dtype=float).reshape(n, 2)
        self.octave_a = np.asarray(self.octave_a, dtype=np.int64).reshape(n)
        self.octave_b = np.asarray(self.octave_b, dtype=np.int64).reshape(n)

    def __len__(self):
        return len(self.xyz_a)


def _proj(K: CameraIntrinsics, P):
    z = P[:, 2]
    ok = z > DEPTH_EPS
    zs = np.where(ok, z, 1.0)
    uv = np.stack([K.fx * P[:, 0] / zs + K.cx, K.fy * P[:, 1] / zs + K.cy], axis=1)
    return uv, ok


def reprojection_inliers(S: Sim3Transform, corr: Correspondences, K_a, K_b, chi2: float = 9.21, scale_factor: float = 1.2):
    """Symmetric test: ``S(b)`` must reproject onto ``uv_a`` and ``S^-1(a)`` onto ``uv_b``."""
    uva, oka = _proj(K_a, S.act(corr.xyz_b))
    uvb, okb = _proj(K_b, S.inverse().act(corr.xyz_a))
    ea = np.sum((uva - corr.uv_a) ** 2, axis=1)
    eb = np.sum((uvb - corr.uv_b) ** 2, axis=1)
    ta = chi2 * scale_factor ** (2.0 * corr.octave_a)
    tb = chi2 * scale_factor ** (2.0 * corr.octave_b)
    return oka & okb & (ea < ta) & (eb < tb)


def _collinear(P) -> bool:
    u = P[1] - P[0]
    v = P[2] - P[0]
    c = np.linalg.norm(np.cross(u, v))
    return c <= 1e-9 * max(np.dot(u, u), np.dot(v, v), 1e-30)


def estimate_sim3_ransac(
    corr: Correspondences,
    K_a: CameraIntrinsics,
    K_b: CameraIntrinsics,
    config: LoopDetectConfig | None = None,
    seed: int | None = None,
):
    """RANSAC over minimal triples, then a refit on all inliers.

    Returns ``(S_ab, inlier_mask)`` with ``xyz_a ~ S_ab(xyz_b)``, or ``None``
    when fewer than ``min_inliers`` correspondences agree on any model.
    """
    cfg = config or LoopDetectConfig()
    n = len(corr)
    if n < 3:
        return None
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    best_S, best_mask, best_n = None, None, -1
    for _ in range(cfg.ransac_iterations):
        idx = rng.choice(n, 3, replace=False)
        if _collinear(corr.xyz_b[idx]) or _collinear(corr.xyz_a[idx]):
            continue
        S = horn_similarity(corr.xyz_a[idx], corr.xyz_b[idx])
        if S is None:
            continue
        mask = reprojection_inliers(S, corr, K_a, K_b, cfg.ransac_chi2, cfg.scale_factor)
        k = int(mask.sum())
        if k > best_n:
            best_S, best_mask, best_n = S, mask, k
            if k == n:
                break
    if best_S is None or best_n < max(cfg.min_inliers, 3):
        return None
    refit = horn_similarity(corr.xyz_a[best_mask], corr.xyz_b[best_mask])
    if refit is not None:
        mask = reprojection_inliers(refit, corr, K_a, K_b, cfg.ransac_chi2, cfg.scale_factor)
        if mask.sum() >= best_n:
            return refit, mask
    return best_S, best_mask


# ---------------------------------------------------------------------------
# Sim3 refinement
# ---------------------------------------------------------------------------


@dataclass
class RefineResult:
    S: Sim3Transform
    narrow: list[MatchResult]
    wide: list[MatchResult]
    iterations: int
    costs: list[float]


def _project_dual(K: CameraIntrinsics, P):
    x, y, z = P
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy


def _refine_terms(S: Sim3Transform, X_m, uv_c, w_c, X_c, uv_m, w_m, K_c, K_m, huber, bf, with_jac: bool):
    """Whitened two-view reprojection residuals at ``exp(delta) * S``.

    Each side has a left-image residual ``(u, v)`` and, when ``bf > 0``, a
    virtual right-image coordinate ``u - bf / z`` whose measurement uses the
    depth of the feature's own map point. Without it the scale of ``S`` is
    unobservable when the two cameras nearly coincide, which is the usual
    situation at a revisit.

    Returns the robust cost and, when ``with_jac``, the Gauss-Newton system.
    """
    if with_jac:
        d = ad.seed(np.zeros(7))
    else:
        d = [0.0] * 7
    Sd = k_sim3_mul(k_sim3_exp(tuple(d[:3]), tuple(d[3:6]), d[6]), S.components())
    Pc = k_sim3_act(Sd, tuple(X_m.T))
    uc, vc = _project_dual(K_c, Pc)
    Pm = k_sim3_act(k_sim3_inv(Sd), tuple(X_c.T))
    um, vm = _project_dual(K_m, Pm)
    sw_c = np.sqrt(w_c)
    sw_m = np.sqrt(w_m)
    sides = [
        [(uc - uv_c[:, 0]) * sw_c, (vc - uv_c[:, 1]) * sw_c],
        [(um - uv_m[:, 0]) * sw_m, (vm - uv_m[:, 1]) * sw_m],
    ]
    if bf > 0:
        sides[0].append(((uc - bf / Pc[2]) - (uv_c[:, 0] - bf / X_c[:, 2])) * sw_c)
        sides[1].append(((um - bf / Pm[2]) - (uv_m[:, 0] - bf / X_m[:, 2])) * sw_m)
    cost = 0.0
    H = np.zeros((7, 7))
    g = np.zeros(7)
    for rows in sides:
        rs = np.stack([ad.value(e) for e in rows], axis=1)
        e2 = np.sum(rs * rs, axis=1)
        e = np.sqrt(e2)
        robust = np.where(e <= huber, e2, 2.0 * huber * e - huber * huber)
        cost += float(robust.sum())
        if with_jac:
            wt = np.where(e <= huber, 1.0, huber / np.maximum(e, 1e-300))
            J = np.stack([r.der for r in rows], axis=1)  # (n, k, 7)
            Jw = J * wt[:, None, None]
            H += np.einsum("nki,nkj->ij", Jw, J)
            g += np.einsum("nki,nk->i", Jw, rs)
    return cost, H, g


def _gauss_newton(S0: Sim3Transform, data, cfg: LoopDetectConfig):
    S = S0
    cost, H, g = _refine_terms(S, *data, cfg.huber_px, cfg.stereo_bf, True)
    costs = [cost]
    increases = 0
    it = 0
    for it in range(1, cfg.refine_iterations + 1):
        try:
            delta = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError as exc:
            raise RefineError(f"singular Sim3 refinement system at iteration {it}") from exc
        S = Sim3Transform.exp(delta) * S
        cost, H, g = _refine_terms(S, *data, cfg.huber_px, cfg.stereo_bf, True)
        increases = increases + 1 if cost > costs[-1] else 0
        costs.append(cost)
        if increases >= 3:
            raise RefineError(f"Sim3 refinement diverged: cost rose 3 times in a row ({costs})")
        if np.linalg.norm(delta) < cfg.refine_tol:
            break
    return S, it, costs


def _side_b(points, matched_snap: KeyFrameSnapshot, match_rows, X_m, cfg):
    """Matched-view pixel and octave of each point: its observation in the
    matched keyframe if it has one, else its projection there."""
    uv_m, ok = _proj(matched_snap.intrinsics, X_m)
    dist = np.linalg.norm(X_m, axis=1)
    octv = predict_octave(np.maximum(dist, 1e-12), points["d_max"][match_rows], cfg.narrow)
    assoc = matched_snap.associations
    pid_to_feat = {int(p): i for i, p in enumerate(assoc) if p != NO_POINT}
    ids = points["ids"][match_rows]
    for r, pid in enumerate(ids):
        f = pid_to_feat.get(int(pid))
        if f is not None:
            uv_m[r] = matched_snap.uv[f]
            octv[r] = matched_snap.octaves[f]
    return uv_m, octv


def refine_sim3(
    current_snap: KeyFrameSnapshot,
    matched_snap: KeyFrameSnapshot,
    points,
    S0: Sim3Transform,
    current_xyz: dict[int, np.ndarray],
    config: LoopDetectConfig | None = None,
    runtime: Runtime | None = None,
    seed_matches: list[MatchResult] = (),
    concurrent: bool | None = None,
) -> RefineResult:
    """Refine ``S0`` (``S_cm``) from guided matches.

    The narrow (PS2a) and wide (PS2b) searches both run at ``S0`` as one task
    pair. Narrow matches, together with ``seed_matches``, drive a robust
    Gauss-Newton over two-view reprojection error: window points into the
    current view, and the current keyframe's own points (``current_xyz``,
    feature index -> world position) into the matched view. The wide matches
    are then filtered by reprojection under the refined transform.
    """
    cfg = config or LoopDetectConfig()
    rt = runtime or sequential()
    T_mw = matched_snap.pose.to_sim3()
    T_cw = current_snap.pose.to_sim3()
    pose0 = S0 * T_mw
    pair = TaskPair(
        a=lambda: projection_search(current_snap, pose0, points, cfg.narrow, rt),
        b=lambda: projection_search(current_snap, pose0, points, cfg.wide, rt),
    )
    narrow, wide = rt.run_pair(pair, concurrent=concurrent)

    # merge seeds that do not collide with narrow matches
    used_f = {m.feature_index for m in narrow}
    used_p = {m.map_point_id for m in narrow}
    merged = list(narrow)
    for m in seed_matches:
        if m.feature_index not in used_f and m.map_point_id not in used_p:
            merged.append(m)
            used_f.add(m.feature_index)
            used_p.add(m.map_point_id)
    merged.sort(key=lambda m: m.map_point_id)
    merged = [m for m in merged if int(m.feature_index) in current_xyz]
    if len(merged) < 3:
        raise RefineError(f"only {len(merged)} usable matches for Sim3 refinement")

    row_of = {int(p): i for i, p in enumerate(points["ids"])}
    rows = np.array([row_of[m.map_point_id] for m in merged], dtype=np.int64)
    feats = np.array([m.feature_index for m in merged], dtype=np.int64)
    X_m = T_mw.act(points["positions"][rows])
    X_c = T_cw.act(np.array([current_xyz[int(f)] for f in feats]))
    uv_c = current_snap.uv[feats]
    w_c = cfg.scale_factor ** (-2.0 * current_snap.octaves[feats])
    uv_m, oct_m = _side_b(points, matched_snap, rows, X_m, cfg)
    w_m = cfg.scale_factor ** (-2.0 * oct_m)
    data = (X_m, uv_c, w_c, X_c, uv_m, w_m, current_snap.intrinsics, matched_snap.intrinsics)
    S, iters, costs = _gauss_newton(S0, data, cfg)

    # keep narrow inliers under S
    uvp, ok = _proj(current_snap.intrinsics, S.act(X_m))
    e2c = np.sum((uvp - uv_c) ** 2, axis=1) * w_c
    uvq, okq = _proj(matched_snap.intrinsics, S.inverse().act(X_c))
    e2m = np.sum((uvq - uv_m) ** 2, axis=1) * w_m
    keep = ok & okq & (e2c < cfg.ransac_chi2) & (e2m < cfg.ransac_chi2)
    narrow_out = [m for m, k in zip(merged, keep) if k]

    # wide matches re-checked under the refined pose
    wide_out = []
    if wide:
        wr = np.array([row_of[m.map_point_id] for m in wide], dtype=np.int64)
        wf = np.array([m.feature_index for m in wide], dtype=np.int64)
        uvw, okw = _proj(current_snap.intrinsics, (S * T_mw).act(points["positions"][wr]))
        err = np.linalg.norm(uvw - current_snap.uv[wf], axis=1)
        radius = cfg.wide.radius_multiplier * cfg.scale_factor ** current_snap.octaves[wf].astype(float)
        keepw = okw & (err <= radius)
        wide_out = [m for m, k in zip(wide, keepw) if k]
    return RefineResult(S, narrow_out, wide_out, iters, costs)


# ---------------------------------------------------------------------------
# triple verification
# ---------------------------------------------------------------------------


class _TripleKernel:
    def __init__(self, kernels, n):
        self.kernels = kernels
        self.n = n

    def __call__(self, lo, hi):
        feats, hams = [], []
        for k, kern in enumerate(self.kernels):
            a = max(lo, k * self.n)
            b = min(hi, (k + 1) * self.n)
            if a < b:
                f, h = kern(a - k * self.n, b - k * self.n)
                feats.append(f)
                hams.append(h)
        if not feats:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        return np.concatenate(feats), np.concatenate(hams)


def verify_triple(
    snapshots: list[KeyFrameSnapshot],
    points,
    poses: list[Sim3Transform],
    params: ProjectionSearchParams = NARROW,
    runtime: Runtime | None = None,
    chunk_size: int | None = None,
) -> list[tuple[int, MatchResult]]:
    """Project ``points`` into three keyframes with one batched job.

    Returns ``(kf_id, match)`` pairs, keyframe by keyframe in the given order,
    unique per ``(kf_id, feature)``.
    """
    if len(snapshots) != 3 or len(poses) != 3:
        raise ValueError("verify_triple needs exactly three keyframes")
    rt = runtime or sequential()
    n = len(points["ids"])
    kernels = [_SearchKernel(s, p, points, params) for s, p in zip(snapshots, poses)]
    feats, hams = rt.run_batch(BatchJob(3 * n, _TripleKernel(kernels, n), chunk_size=chunk_size, name="verify_triple"))
    out: list[tuple[int, MatchResult]] = []
    seen = set()
    for k, snap in enumerate(snapshots):
        sl = slice(k * n, (k + 1) * n)
        for m in resolve_conflicts(points["ids"], feats[sl], hams[sl]):
            key = (snap.kf_id, m.feature_index)
            if key not in seen:
                seen.add(key)
                out.append((snap.kf_id, m))
    return out


# ---------------------------------------------------------------------------
# PS1: appearance matching between the current keyframe and a window
# ---------------------------------------------------------------------------


class _DescriptorKernel:
    def __init__(self, point_desc, feat_desc, max_hamming):
        self.pd = point_desc
        self.fd = feat_desc
        self.max_hamming = max_hamming

    def __call__(self, lo, hi):
        n = hi - lo
        if n == 0 or len(self.fd) == 0:
            return np.full(n, -1, dtype=np.int64), np.full(n, -1, dtype=np.int64)
        D = np.bitwise_count(self.pd[lo:hi, None, :] ^ self.fd[None, :, :]).sum(axis=-1, dtype=np.int64)
        f = np.argmin(D, axis=1)
        h = D[np.arange(n), f]
        bad = h > self.max_hamming
        f[bad] = -1
        h[bad] = -1
        return f.astype(np.int64), h


def descriptor_search(snap: KeyFrameSnapshot, points, max_hamming: int, runtime: Runtime | None = None) -> list[MatchResult]:
    """Best feature per point by descriptor alone (no geometry), one per feature."""
    rt = runtime or sequential()
    n = len(points["ids"])
    kern = _DescriptorKernel(points["descriptors"], snap.descriptors, max_hamming)
    feats, hams = rt.run_batch(BatchJob(n, kern, name="ps1"))
    return resolve_conflicts(points["ids"], feats, hams)


# ---------------------------------------------------------------------------
# pipeline entry
# ---------------------------------------------------------------------------


@dataclass
class LoopDetection:
    current_kf_id: int
    matched_kf_id: int
    S_cm: Sim3Transform
    verified: int
    accepted: bool
    window: list[int] = field(default_factory=list)
    matches: list[tuple[int, MatchResult]] = field(default_factory=list)
    narrow: list[MatchResult] = field(default_factory=list)
    wide: list[MatchResult] = field(default_factory=list)
    triple: list[int] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def corrected_pose(self, T_mw) -> Sim3Transform:
        return self.S_cm * T_mw.to_sim3()

    def to_record(self) -> dict:
        return {
            "current": self.current_kf_id,
            "matched": self.matched_kf_id,
            "S_cm": [float(x) for x in self.S_cm.as_vector8()],
            "verified": self.verified,
            "accepted": self.accepted,
            "narrow_matches": len(self.narrow),
            "wide_matches": len(self.wide),
            "window": list(self.window),
            "timings_ms": dict(self.timings),
        }


def loop_window(map_: Map, matched: int, current: int) -> list[int]:
    excluded = set(map_.covisible(current)) | {current}
    window = [matched] + [k for k in map_.connected(matched) if k not in excluded]
    return sorted(set(window))


def window_points(map_: Map, window) -> list[int]:
    ids = set()
    for k in window:
        ids |= map_.keyframe(k).associated_points()
    return sorted(ids)


def triple_keyframes(map_: Map, current: int, window) -> list[int]:
    """The current keyframe and its two most recent connected keyframes."""
    win = set(window)
    nb = sorted((k for k in map_.connected(current) if k not in win and k < current), reverse=True)
    if len(nb) < 2:
        nb = sorted((k for k in map_.covisible(current) if k not in win and k < current), reverse=True)
    return [current] + nb[:2]


def _current_xyz(map_: Map, snap: KeyFrameSnapshot) -> dict[int, np.ndarray]:
    return {i: map_.point(int(p)).position for i, p in enumerate(snap.associations) if p != NO_POINT}


def evaluate_candidate(map_: Map, current: int, matched: int, config: LoopDetectConfig, runtime: Runtime):
    """Run PS1, RANSAC, refinement and verification for one candidate.

    Must run inside a read phase. Returns a :class:`LoopDetection` (possibly
    not accepted) or ``None`` when an earlier stage rejects the candidate.
    """
    cfg = config
    t = {}
    t0 = time.perf_counter()
    cur = map_.snapshot(current)
    mat = map_.snapshot(matched)
    window = loop_window(map_, matched, current)
    ids = window_points(map_, window)
    if len(ids) < cfg.min_inliers:
        return None
    points = stage_points(runtime, map_.point_arrays(ids), "window_points")
    cur_xyz = _current_xyz(map_, cur)

    ps1 = descriptor_search(cur, points, cfg.ps1_max_hamming, runtime)
    ps1 = [m for m in ps1 if m.feature_index in cur_xyz]
    t["ps1"] = 1e3 * (time.perf_counter() - t0)
    if len(ps1) < cfg.min_inliers:
        return None

    T_mw = mat.pose.to_sim3()
    T_cw = cur.pose.to_sim3()
    row_of = {int(p): i for i, p in enumerate(points["ids"])}
    rows = np.array([row_of[m.map_point_id] for m in ps1])
    feats = np.array([m.feature_index for m in ps1])
    X_m = T_mw.act(points["positions"][rows])
    X_c = T_cw.act(np.array([cur_xyz[int(f)] for f in feats]))
    uv_m, oct_m = _side_b(points, mat, rows, X_m, cfg)
    corr = Correspondences(X_c, X_m, cur.uv[feats], uv_m, cur.octaves[feats], oct_m)
    t1 = time.perf_counter()
    est = estimate_sim3_ransac(corr, cur.intrinsics, mat.intrinsics, cfg, seed=cfg.seed + 7919 * current + matched)
    t["ransac"] = 1e3 * (time.perf_counter() - t1)
    if est is None:
        return None
    S0, mask = est
    seeds = [m for m, k in zip(ps1, mask) if k]

    t2 = time.perf_counter()
    try:
        ref = refine_sim3(cur, mat, points, S0, cur_xyz, cfg, runtime, seed_matches=seeds)
    except RefineError:
        return None
    t["refine"] = 1e3 * (time.perf_counter() - t2)
    if len(ref.narrow) < cfg.min_inliers:
        return None

    t3 = time.perf_counter()
    triple = triple_keyframes(map_, current, window)
    S_cw = ref.S * T_mw
    T_cw_inv = cur.pose.inverse().to_sim3()
    snaps = [map_.snapshot(k) for k in triple]
    poses = [s.pose.to_sim3() * T_cw_inv * S_cw for s in snaps]
    while len(snaps) < 3:  # fewer neighbours than needed: repeat the current view, deduplicated on merge
        snaps.append(cur)
        poses.append(S_cw)
    merged = verify_triple(snaps, points, poses, cfg.narrow, runtime)
    t["verify"] = 1e3 * (time.perf_counter() - t3)
    return LoopDetection(
        current_kf_id=current,
        matched_kf_id=matched,
        S_cm=ref.S,
        verified=len(merged),
        accepted=len(merged) >= cfg.accept_threshold,
        window=window,
        matches=merged,
        narrow=ref.narrow,
        wide=ref.wide,
        triple=triple,
        timings=t,
    )


def detect_loop(
    map_: Map,
    current: int,
    index: WordIndex,
    config: LoopDetectConfig | None = None,
    runtime: Runtime | None = None,
) -> LoopDetection | None:
    """First accepted loop for ``current`` in candidate rank order, else ``None``."""
    cfg = config or LoopDetectConfig()
    rt = runtime or sequential()
    kf = map_.keyframe(current)
    with map_.read_phase():
        exclusion = set(map_.covisible(current))
        cands = detect_candidates(
            index, current, kf.word_ids, cfg.n_candidates, exclusion,
            neighbours=map_.connected, min_score=cfg.min_shared_words,
        )
        for m in cands:
            det = evaluate_candidate(map_, current, m, cfg, rt)
            if det is not None and det.accepted:
                return det
    return None
