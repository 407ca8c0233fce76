import math

import numpy as np
import pytest

from loopcloser.geometry import CameraIntrinsics, SE3Pose, Sim3Transform, quat_from_rotvec
from loopcloser.loop_detect import (
    Correspondences,
    LoopDetectConfig,
    RefineError,
    detect_loop,
    estimate_sim3_ransac,
    horn_similarity,
    refine_sim3,
    verify_triple,
)
from loopcloser.mapcore import KeyFrame, build_snapshot
from loopcloser.matching import NARROW, MatchResult, WordIndex, projection_search
from loopcloser.runtime import Runtime

from conftest import random_sim3

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def pinhole(P):
    P = np.atleast_2d(P)
    return np.column_stack([K.fx * P[:, 0] / P[:, 2] + K.cx, K.fy * P[:, 1] / P[:, 2] + K.cy])


def correspondences(S, xyz_b, outliers=None, rng=None):
    xyz_a = S.act(xyz_b)
    xyz_b = xyz_b.copy()
    if outliers is not None:
        for i in np.flatnonzero(outliers):
            while True:
                cand = np.array([rng.uniform(-3, 3), rng.uniform(-2, 2), rng.uniform(5, 12)])
                if np.linalg.norm(pinhole(S.act(cand)) - pinhole(xyz_a[i])) > 30:
                    xyz_b[i] = cand
                    break
    z = np.zeros(len(xyz_b), dtype=np.int64)
    return Correspondences(xyz_a, xyz_b, pinhole(xyz_a), pinhole(xyz_b), z, z)


def scene_points(rng, n):
    return np.column_stack([rng.uniform(-3, 3, n), rng.uniform(-2, 2, n), rng.uniform(5, 12, n)])


# --- closed form and RANSAC ------------------------------------------------------------


def test_horn_recovers_similarity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        S = random_sim3(rng)
        B = rng.normal(size=(10, 3)) * 3
        assert horn_similarity(S.act(B), B).allclose(S, 1e-9)


def test_ransac_identity():
    rng = np.random.default_rng(1)
    corr = correspondences(Sim3Transform.identity(), scene_points(rng, 40))
    S, mask = estimate_sim3_ransac(corr, K, K)
    assert S.allclose(Sim3Transform.identity(), 1e-9)
    assert mask.all()


def yaw_case():
    return Sim3Transform(1.3, quat_from_rotvec(np.array([0.0, math.radians(10), 0.0])), np.array([1.0, 2.0, 3.0]))


def test_ransac_recovers_known_transform():
    rng = np.random.default_rng(2)
    S_true = yaw_case()
    corr = correspondences(S_true, scene_points(rng, 50))
    S, mask = estimate_sim3_ransac(corr, K, K)
    assert S.allclose(S_true, 1e-9)
    assert mask.all()


@pytest.mark.parametrize("seed", range(20))
def test_ransac_with_outliers(seed):
    rng = np.random.default_rng(seed)
    S_true = yaw_case()
    out = np.zeros(50, dtype=bool)
    out[rng.choice(50, 15, replace=False)] = True
    corr = correspondences(S_true, scene_points(rng, 50), out, rng)
    S, mask = estimate_sim3_ransac(corr, K, K, seed=seed)
    np.testing.assert_array_equal(mask, ~out)
    assert S.allclose(S_true, 1e-6)


def test_ransac_too_few():
    rng = np.random.default_rng(3)
    corr = correspondences(yaw_case(), scene_points(rng, 10))
    assert estimate_sim3_ransac(corr, K, K) is None  # below min_inliers
    assert estimate_sim3_ransac(corr, K, K, LoopDetectConfig(min_inliers=5)) is not None


# --- refinement scene -------------------------------------------------------------------


class RefineScene:
    """Matched keyframe observing every point exactly; a current keyframe whose
    stored pose is drifted but whose features are the exact images under the
    true corrected pose."""

    def __init__(self, seed=0, n=150):
        rng = np.random.default_rng(seed)
        self.T_m = SE3Pose(quat_from_rotvec(rng.normal(0, 0.05, 3)), rng.normal(0, 0.2, 3))
        X_cam = scene_points(rng, n)
        X = self.T_m.inverse().act(X_cam)
        self.S_cm = Sim3Transform(1.05, quat_from_rotvec(rng.normal(0, 0.02, 3)), rng.normal(0, 0.1, 3))
        S_cw = self.S_cm * self.T_m.to_sim3()
        self.T_c = SE3Pose(quat_from_rotvec(rng.normal(0, 0.05, 3)), rng.normal(0, 0.3, 3))
        desc = rng.integers(0, 256, (n, 32), dtype=np.uint8)
        ids = np.arange(n, dtype=np.int64) + 500
        mat = KeyFrame(1, self.T_m, K, pinhole(X_cam), np.zeros(n), desc, ids)
        cur = KeyFrame(2, self.T_c, K, pinhole(S_cw.act(X)), np.zeros(n), desc)
        self.mat = build_snapshot(mat, 1, 64, 48)
        self.cur = build_snapshot(cur, 1, 64, 48)
        self.current_xyz = {i: self.T_c.inverse().act(S_cw.act(X[i])) for i in range(n)}
        ray = X - self.T_m.camera_center()
        d = np.linalg.norm(ray, axis=1)
        self.points = {
            "ids": ids,
            "positions": X,
            "normals": ray / d[:, None],
            "d_min": d / 4,
            "d_max": d,
            "descriptors": desc,
        }
        self.matches = [MatchResult(int(ids[i]), i, 0) for i in range(n)]


def test_refine_at_optimum_stays_put():
    sc = RefineScene()
    res = refine_sim3(sc.cur, sc.mat, sc.points, sc.S_cm, sc.current_xyz, seed_matches=sc.matches)
    assert res.S.allclose(sc.S_cm, 1e-9)
    assert res.iterations == 1
    assert res.costs[0] < 1e-18


@pytest.mark.parametrize("seed", range(5))
def test_refine_from_perturbed_start(seed):
    sc = RefineScene(seed)
    rng = np.random.default_rng(seed + 100)
    d = rng.normal(size=7)
    d *= 0.05 / np.linalg.norm(d)
    S0 = Sim3Transform.exp(d) * sc.S_cm
    res = refine_sim3(sc.cur, sc.mat, sc.points, S0, sc.current_xyz, seed_matches=sc.matches)
    err = (res.S * sc.S_cm.inverse()).log().as_vector()
    assert np.linalg.norm(err) < 1e-4
    assert len(res.narrow) == len(sc.matches)


def test_refine_concurrent_equals_sequential():
    with Runtime(1) as seq, Runtime(2) as par:
        for seed in range(20):
            sc = RefineScene(seed % 4)
            rng = np.random.default_rng(seed)
            S0 = Sim3Transform.exp(rng.normal(0, 0.003, 7)) * sc.S_cm
            seeds = sc.matches[: 10 * (seed % 5)]
            a = refine_sim3(sc.cur, sc.mat, sc.points, S0, sc.current_xyz, runtime=seq, seed_matches=seeds, concurrent=False)
            b = refine_sim3(sc.cur, sc.mat, sc.points, S0, sc.current_xyz, runtime=par, seed_matches=seeds, concurrent=True)
            np.testing.assert_array_equal(a.S.as_vector8(), b.S.as_vector8())
            assert a.narrow == b.narrow and a.wide == b.wide and a.costs == b.costs


def test_refine_without_matches_fails():
    sc = RefineScene()
    far = Sim3Transform(1.0, quat_from_rotvec(np.array([0.0, 2.0, 0.0])), np.zeros(3)) * sc.S_cm
    with pytest.raises(RefineError):
        refine_sim3(sc.cur, sc.mat, sc.points, far, sc.current_xyz)


# --- verify_triple ------------------------------------------------------------------------


def triple_scene(rng, per=40):
    """Three keyframes; keyframe k carries features only for points 40k..40k+39."""
    n = 3 * per
    X = np.column_stack([rng.uniform(-4, 4, n), rng.uniform(-3, 3, n), rng.uniform(6, 12, n)])
    desc = rng.integers(0, 256, (n, 32), dtype=np.uint8)
    snaps, poses = [], []
    for k in range(3):
        T = SE3Pose(quat_from_rotvec(np.array([0.0, 0.02 * k, 0.0])), np.array([0.1 * k, 0.0, 0.0]))
        sel = slice(k * per, (k + 1) * per)
        uv = pinhole(T.act(X[sel]))
        kf = KeyFrame(10 + k, T, K, uv, np.zeros(per), desc[sel])
        snaps.append(build_snapshot(kf, 1, 64, 48))
        poses.append(T.to_sim3())
    ray = X - np.zeros(3)
    d = np.linalg.norm(ray, axis=1)
    pts = {"ids": np.arange(n, dtype=np.int64), "positions": X, "normals": ray / d[:, None],
           "d_min": d / 4, "d_max": d, "descriptors": desc}
    return snaps, pts, poses


def test_verify_triple_constructed_visibility():
    snaps, pts, poses = triple_scene(np.random.default_rng(0))
    merged = verify_triple(snaps, pts, poses)
    assert len(merged) == 120
    assert {k for k, _ in merged} == {10, 11, 12}


def test_verify_triple_no_points():
    snaps, pts, poses = triple_scene(np.random.default_rng(1))
    empty = {k: v[:0] for k, v in pts.items()}
    assert verify_triple(snaps, empty, poses) == []


def test_verify_triple_batched_equals_three_calls():
    with Runtime(4) as par:
        for seed in range(50):
            rng = np.random.default_rng(seed)
            snaps, pts, poses = triple_scene(rng)
            poses = [Sim3Transform.exp(rng.normal(0, 0.002, 7)) * p for p in poses]
            seq = []
            seen = set()
            for s, p in zip(snaps, poses):
                for m in projection_search(s, p, pts, NARROW):
                    if (s.kf_id, m.feature_index) not in seen:
                        seen.add((s.kf_id, m.feature_index))
                        seq.append((s.kf_id, m))
            assert verify_triple(snaps, pts, poses, NARROW, par, chunk_size=int(rng.integers(1, 100))) == seq


def test_verify_triple_needs_three():
    snaps, pts, poses = triple_scene(np.random.default_rng(2))
    with pytest.raises(ValueError):
        verify_triple(snaps[:2], pts, poses[:2])


# --- detect_loop on generated worlds -------------------------------------------------------


def test_detect_loop_within_ground_truth_window(loop_scenario):
    det = loop_scenario.detection
    w = loop_scenario.world
    assert det.accepted and det.verified >= LoopDetectConfig().accept_threshold
    assert w.in_loop_window(det.current_kf_id, det.matched_kf_id)
    rec = det.to_record()
    assert rec["current"] == 85 and rec["accepted"]


def test_detect_loop_accuracy(loop_scenario):
    det = loop_scenario.detection
    w = loop_scenario.world
    T_mw = loop_scenario.map.keyframe(det.matched_kf_id).pose
    # the matched keyframe sits at the start of the sequence where drift is still zero
    assert np.allclose(T_mw.camera_center(), w.ground_truth[det.matched_kf_id].camera_center(), atol=1e-9)
    corrected = det.corrected_pose(T_mw)
    err = np.linalg.norm(corrected.camera_center() - w.ground_truth[det.current_kf_id].camera_center())
    assert err < 0.05


def test_no_revisit_gives_none(circle_world):
    m = circle_world.build_map(60)
    idx = WordIndex()
    for kf in circle_world.keyframes[:59]:
        idx.add(kf.id, kf.word_ids)
    for current in (40, 59):
        assert detect_loop(m, current, idx) is None
