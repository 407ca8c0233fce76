import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import logm

from loopcloser.geometry import Sim3Transform
from loopcloser.linalg import NotPositiveDefinite, ldlt_factor, ldlt_solve, solve_spd
from loopcloser.loop_correct import propagate_correction
from loopcloser.posegraph import (
    LMConfig,
    PoseGraphEdge,
    PoseGraphVertex,
    build_essential_problem,
    edge_jacobians,
    edge_residual,
    linearize_edges,
    optimize,
    recover,
    total_chi2,
)
from loopcloser.runtime import Runtime

from conftest import random_sim3


def consistent_edge(S_iw, S_jw, kind="tree"):
    return PoseGraphEdge(1, 2, S_iw * S_jw.inverse(), kind)


def log_by_matrix(M):
    """Tangent ``(rho, phi, sigma)`` read off the matrix logarithm."""
    A = np.real(logm(M))
    top = A[:3, :3]
    sigma = np.trace(top) / 3
    W = top - sigma * np.eye(3)
    return np.r_[A[:3, 3], W[2, 1], W[0, 2], W[1, 0], sigma]


# --- residual ------------------------------------------------------------------------


def test_consistent_edge_has_zero_residual():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = random_sim3(rng), random_sim3(rng)
        np.testing.assert_allclose(edge_residual(consistent_edge(a, b), a, b), 0, atol=1e-12)


def test_small_perturbation_gives_first_order_residual():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = random_sim3(rng), random_sim3(rng)
        d = rng.normal(size=7)
        d *= 1e-6 / np.linalg.norm(d)
        e = edge_residual(consistent_edge(a, b), Sim3Transform.exp(d) * a, b)
        assert np.linalg.norm(e) == pytest.approx(1e-6, rel=0.01)


def test_residual_matches_matrix_compose_then_log():
    rng = np.random.default_rng(2)
    for _ in range(30):
        a, b, m = (random_sim3(rng, angle=1.5) for _ in range(3))
        edge = PoseGraphEdge(1, 2, m)
        M = m.matrix() @ b.matrix() @ np.linalg.inv(a.matrix())
        np.testing.assert_allclose(edge_residual(edge, a, b), log_by_matrix(M), atol=1e-8)


def test_identity_jacobians():
    I = Sim3Transform.identity()
    Ji, Jj = edge_jacobians(PoseGraphEdge(1, 2, I), I, I)
    np.testing.assert_allclose(Ji, -np.eye(7), atol=1e-12)
    np.testing.assert_allclose(Jj, np.eye(7), atol=1e-12)


def test_jacobians_match_central_differences():
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(10):
        a, b, m = (random_sim3(rng, angle=1.2) for _ in range(3))
        edge = PoseGraphEdge(1, 2, m)
        Ji, Jj = edge_jacobians(edge, a, b)
        for c in range(7):
            d = np.zeros(7)
            d[c] = h
            fd_i = (edge_residual(edge, Sim3Transform.exp(d) * a, b) - edge_residual(edge, Sim3Transform.exp(-d) * a, b)) / (2 * h)
            fd_j = (edge_residual(edge, a, Sim3Transform.exp(d) * b) - edge_residual(edge, a, Sim3Transform.exp(-d) * b)) / (2 * h)
            np.testing.assert_allclose(Ji[:, c], fd_i, atol=1e-6)
            np.testing.assert_allclose(Jj[:, c], fd_j, atol=1e-6)


@given(st.integers(0, 10_000))
def test_gauge_invariance(seed):
    # re-expressing the whole graph in another world frame leaves every residual alone
    rng = np.random.default_rng(seed)
    a, b, m, G = (random_sim3(rng) for _ in range(4))
    edge = PoseGraphEdge(1, 2, m)
    np.testing.assert_allclose(edge_residual(edge, a * G, b * G), edge_residual(edge, a, b), atol=1e-8)


def test_edge_validation():
    with pytest.raises(ValueError):
        PoseGraphEdge(1, 1, Sim3Transform.identity())
    with pytest.raises(ValueError):
        PoseGraphEdge(1, 2, Sim3Transform.identity(), "odometry")


def test_linearize_edges_batch_matches_single():
    rng = np.random.default_rng(4)
    verts = {k: PoseGraphVertex(k, random_sim3(rng)) for k in range(6)}
    edges = [PoseGraphEdge(i, j, random_sim3(rng)) for i, j in [(0, 1), (1, 2), (2, 3), (0, 5), (4, 2)]]
    with Runtime(3) as rt:
        e, Ji, Jj = linearize_edges(verts, edges, rt, chunk_size=2)
    for k, ed in enumerate(edges):
        np.testing.assert_allclose(e[k], edge_residual(ed, verts[ed.i].estimate, verts[ed.j].estimate), atol=1e-12)
        a, b = edge_jacobians(ed, verts[ed.i].estimate, verts[ed.j].estimate)
        np.testing.assert_allclose(Ji[k], a, atol=1e-12)
        np.testing.assert_allclose(Jj[k], b, atol=1e-12)


# --- optimisation ----------------------------------------------------------------------


def test_fixed_vertex_never_moves():
    rng = np.random.default_rng(5)
    verts = {0: PoseGraphVertex(0, random_sim3(rng), fixed=True), 1: PoseGraphVertex(1, random_sim3(rng))}
    res = optimize(verts, [PoseGraphEdge(0, 1, random_sim3(rng))])
    assert res.vertices[0].estimate.as_vector8().tobytes() == verts[0].estimate.as_vector8().tobytes()
    assert res.final_chi2 < 1e-18


def test_consistent_graph_needs_no_iterations():
    rng = np.random.default_rng(6)
    poses = [random_sim3(rng) for _ in range(5)]
    verts = {k: PoseGraphVertex(k, p, fixed=(k == 0)) for k, p in enumerate(poses)}
    edges = [PoseGraphEdge(k, k + 1, poses[k] * poses[k + 1].inverse()) for k in range(4)]
    res = optimize(verts, edges)
    assert res.initial_chi2 < 1e-20 and res.final_chi2 <= res.initial_chi2
    for k, p in enumerate(poses):
        assert res.vertices[k].estimate.allclose(p, 1e-12)


def test_exactly_zero_problem_takes_no_step():
    I = Sim3Transform.identity()
    verts = {k: PoseGraphVertex(k, I, fixed=(k == 0)) for k in range(4)}
    edges = [PoseGraphEdge(k, k + 1, I) for k in range(3)]
    res = optimize(verts, edges)
    assert res.accepted_iterations == 0 and res.stop_reason == "zero_residual"


def test_all_fixed_is_nothing_to_optimize():
    I = Sim3Transform.identity()
    verts = {0: PoseGraphVertex(0, I, True), 1: PoseGraphVertex(1, I, True)}
    res = optimize(verts, [PoseGraphEdge(0, 1, Sim3Transform.exp(np.full(7, 0.1)))])
    assert res.stop_reason == "nothing_to_optimize" and res.trace == []


def test_chi2_is_monotone_over_accepted_steps():
    rng = np.random.default_rng(7)
    poses = [random_sim3(rng) for _ in range(8)]
    verts = {k: PoseGraphVertex(k, Sim3Transform.exp(rng.normal(0, 0.2, 7)) * p, fixed=(k == 0)) for k, p in enumerate(poses)}
    pairs = [(k, k + 1) for k in range(7)] + [(0, 7), (2, 5)]
    edges = [PoseGraphEdge(i, j, poses[i] * poses[j].inverse()) for i, j in pairs]
    res = optimize(verts, edges, LMConfig(max_iterations=100))
    chi = [res.initial_chi2] + [t.candidate_chi2 for t in res.trace if t.accepted]
    assert all(b < a for a, b in zip(chi, chi[1:]))
    assert res.final_chi2 == pytest.approx(total_chi2(res.vertices, edges), rel=1e-9, abs=1e-20)
    assert res.final_chi2 < 1e-12


def essential_setup(scenario):
    m = scenario.fresh_map()
    corrected = propagate_correction(m, scenario.detection)
    return m, corrected


def test_essential_edge_count(loop_scenario):
    m, corrected = essential_setup(loop_scenario)
    det = loop_scenario.detection
    verts, edges = build_essential_problem(m, corrected, det)
    n = len(verts)
    tree = {(min(a, b), max(a, b)) for a, b in ((e.i, e.j) for e in edges if e.kind == "tree")}
    assert len(tree) == n - 1
    loop_pair = (min(det.current_kf_id, det.matched_kf_id), max(det.current_kf_id, det.matched_kf_id))
    strong = [p for p, w in m.brute_force_covisibility().items() if w >= m.config.essential_threshold]
    extra = [p for p in strong if p not in tree and p != loop_pair]
    assert len(edges) == (n - 1) + 1 + len(extra)
    assert [v for v in verts.values() if v.fixed] == [verts[det.matched_kf_id]]


def test_optimisation_is_worker_independent(loop_scenario):
    m, corrected = essential_setup(loop_scenario)
    verts, edges = build_essential_problem(m, corrected, loop_scenario.detection)
    with Runtime(1) as a, Runtime(8) as b:
        r1 = optimize(verts, edges, LMConfig(chunk_size=7), a)
        r8 = optimize(verts, edges, LMConfig(chunk_size=7), b)
    assert [(t.chi2, t.candidate_chi2, t.lam, t.step_norm, t.accepted) for t in r1.trace] == \
        [(t.chi2, t.candidate_chi2, t.lam, t.step_norm, t.accepted) for t in r8.trace]
    for k in r1.vertices:
        assert r1.vertices[k].estimate.as_vector8().tobytes() == r8.vertices[k].estimate.as_vector8().tobytes()
    assert r1.final_chi2 < r1.initial_chi2


# --- recover --------------------------------------------------------------------------------


def test_recover_identity_changes_nothing(small_world):
    m = small_world.build_map()
    before = {pid: m.point(pid).position.copy() for pid in m.live_points()}
    poses = {k: m.keyframe(k).pose for k in m.keyframe_ids()}
    recover(m, {k: PoseGraphVertex(k, T.to_sim3()) for k, T in poses.items()})
    for pid, p in before.items():
        np.testing.assert_array_equal(m.point(pid).position, p)
    for k, T in poses.items():
        assert m.keyframe(k).pose.allclose(T, 1e-12)
    assert m.audit() == []


def test_recover_moves_points_with_their_anchor(small_world):
    m = small_world.build_map()
    old = {k: m.keyframe(k).pose.to_sim3() for k in m.keyframe_ids()}
    cam = {}
    for pid in m.live_points():
        p = m.point(pid)
        cam[pid] = (p.ref_kf, old[p.ref_kf].act(p.position))
    D = Sim3Transform(2.0, np.array([1.0, 0, 0, 0]), np.array([0.3, 0.0, 0.0]))
    new = {k: PoseGraphVertex(k, D * S) for k, S in old.items()}
    recover(m, new, initial=old)
    for pid, (k, x) in cam.items():
        # in its anchor camera the point looks the same, expressed in the new world
        np.testing.assert_allclose(new[k].estimate.act(m.point(pid).position), x, atol=1e-9)
    assert m.audit() == []


# --- dense LDL^T --------------------------------------------------------------------------


@pytest.mark.parametrize("n,block", [(1, 64), (7, 64), (50, 8), (130, 64), (200, 17)])
def test_ldlt_matches_numpy(n, block):
    rng = np.random.default_rng(n)
    A = rng.normal(size=(n, n))
    H = A @ A.T + n * np.eye(n)
    b = rng.normal(size=n)
    L, d = ldlt_factor(H, block=block)
    np.testing.assert_allclose(L @ np.diag(d) @ L.T, H, atol=1e-9 * n)
    np.testing.assert_allclose(ldlt_solve(L, d, b), np.linalg.solve(H, b), rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(solve_spd(H, b), np.linalg.solve(H, b), rtol=1e-9, atol=1e-12)


def test_ldlt_reports_indefinite_pivot():
    H = np.diag([1.0, 2.0, -1.0, 4.0])
    with pytest.raises(NotPositiveDefinite) as info:
        ldlt_factor(H)
    assert info.value.index == 2
