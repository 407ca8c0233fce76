"""Essential-graph Sim3 optimisation.

Residual of an edge ``(i, j)`` with measurement ``S_ij`` (maps camera ``j``
into camera ``i``) is ``e = log(S_ij * S_jw * S_iw^-1)``; estimates are
perturbed on the left, ``S <- exp(delta) * S``. Jacobians come from one
forward-mode pass with 14 seed directions (7 per endpoint), evaluated for a
whole chunk of edges at once.

Edges are linearised in parallel; the normal equations are accumulated in
ascending edge order and solved with a dense LDL^T, so the result does not
depend on the worker count.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import SE3Pose, Sim3Transform, k_sim3_exp, k_sim3_inv, k_sim3_log, k_sim3_mul
from .linalg import NotPositiveDefinite, ldlt_factor, ldlt_solve
from .mapcore import Map
from .runtime import BatchJob, Runtime, sequential

EDGE_KINDS = ("tree", "loop", "covisibility")


class PoseGraphError(RuntimeError):
    pass


@dataclass
class PoseGraphVertex:
    id: int
    estimate: Sim3Transform
    fixed: bool = False


@dataclass
class PoseGraphEdge:
    i: int
    j: int
    S_ij: Sim3Transform
    kind: str = "tree"
    information: np.ndarray | None = None  # 7x7; identity when None

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("edge endpoints must differ")
        if self.kind not in EDGE_KINDS:
            raise ValueError(f"unknown edge kind {self.kind!r}")


@dataclass
class LMConfig:
    lambda0: float = 1e-4
    lambda_min: float = 1e-12
    lambda_max: float = 1e8
    max_iterations: int = 50
    step_tol: float = 1e-8
    rel_chi2_tol: float = 1e-10
    chunk_size: int | None = None


@dataclass
class LMIteration:
    iteration: int
    chi2: float
    candidate_chi2: float
    lam: float
    step_norm: float
    accepted: bool


@dataclass
class OptimizeResult:
    vertices: dict[int, PoseGraphVertex]
    trace: list[LMIteration]
    initial_chi2: float
    final_chi2: float
    stop_reason: str
    linearize_ms: float = 0.0
    solve_ms: float = 0.0

    @property
    def accepted_iterations(self) -> int:
        return sum(1 for t in self.trace if t.accepted)


# ---------------------------------------------------------------------------
# residual and Jacobians
# ---------------------------------------------------------------------------


def _cols(transforms) -> np.ndarray:
    """(n, 8) array of ``(s, qw, qx, qy, qz, tx, ty, tz)``."""
    return np.array([T.as_vector8() for T in transforms], dtype=float).reshape(-1, 8)


def _split8(a):
    return a[0], (a[1], a[2], a[3], a[4]), (a[5], a[6], a[7])


def _residual_kernel(meas, si, sj):
    r = k_sim3_mul(k_sim3_mul(meas, sj), k_sim3_inv(si))
    rho, phi, sigma = k_sim3_log(*r)
    return (*rho, *phi, sigma)


def edge_residual(edge: PoseGraphEdge, S_iw: Sim3Transform, S_jw: Sim3Transform) -> np.ndarray:
    """``log(S_ij * S_jw * S_iw^-1)`` as ``(rho, phi, sigma)``."""
    return (edge.S_ij * S_jw * S_iw.inverse()).log().as_vector()


def _perturbed(delta, S):
    return k_sim3_mul(k_sim3_exp(tuple(delta[:3]), tuple(delta[3:6]), delta[6]), S)


class _LinearizeKernel:
    """Residuals and both 7x7 Jacobian blocks for edges ``lo..hi-1``."""

    def __init__(self, meas: np.ndarray, est_i: np.ndarray, est_j: np.ndarray, jacobians: bool = True):
        self.meas = meas
        self.est_i = est_i
        self.est_j = est_j
        self.jacobians = jacobians

    def __call__(self, lo, hi):
        n = hi - lo
        if n == 0:
            return np.zeros((0, 7)), np.zeros((0, 7, 7)), np.zeros((0, 7, 7))
        meas = _split8(self.meas[lo:hi].T)
        si = _split8(self.est_i[lo:hi].T)
        sj = _split8(self.est_j[lo:hi].T)
        if not self.jacobians:
            e = np.stack(_residual_kernel(meas, si, sj), axis=1)
            return e, np.zeros((n, 7, 7)), np.zeros((n, 7, 7))
        d = ad.seed([np.zeros(n)] * 14)
        out = _residual_kernel(meas, _perturbed(d[:7], si), _perturbed(d[7:], sj))
        e = np.stack([ad.value(c) for c in out], axis=1)
        J = np.stack([c.der for c in out], axis=1)  # (n, 7, 14)
        return e, np.ascontiguousarray(J[:, :, :7]), np.ascontiguousarray(J[:, :, 7:])


def edge_jacobians(edge: PoseGraphEdge, S_iw: Sim3Transform, S_jw: Sim3Transform):
    """``(J_i, J_j)``: derivatives of the residual w.r.t. left perturbations."""
    k = _LinearizeKernel(_cols([edge.S_ij]), _cols([S_iw]), _cols([S_jw]))
    _, Ji, Jj = k(0, 1)
    return Ji[0], Jj[0]


# ---------------------------------------------------------------------------
# problem assembly
# ---------------------------------------------------------------------------


class _Problem:
    def __init__(self, vertices: dict[int, PoseGraphVertex], edges: list[PoseGraphEdge]):
        self.ids = sorted(vertices)
        self.pos = {v: k for k, v in enumerate(self.ids)}
        self.free = [v for v in self.ids if not vertices[v].fixed]
        self.col = {v: k for k, v in enumerate(self.free)}
        if len(self.free) == len(self.ids) and self.ids:
            raise PoseGraphError("optimisation needs at least one fixed vertex")
        for e in edges:
            if e.i not in vertices or e.j not in vertices:
                raise PoseGraphError(f"edge ({e.i}, {e.j}) references a missing vertex")
        self.edges = edges
        self.ei = np.array([self.pos[e.i] for e in edges], dtype=np.int64)
        self.ej = np.array([self.pos[e.j] for e in edges], dtype=np.int64)
        self.meas = _cols([e.S_ij for e in edges])
        self.info = None
        if any(e.information is not None for e in edges):
            self.info = np.array([np.eye(7) if e.information is None else np.asarray(e.information, float) for e in edges])
        fc = np.array([self.col.get(v, -1) for v in self.ids], dtype=np.int64)
        self.ci = fc[self.ei] if len(edges) else np.zeros(0, np.int64)
        self.cj = fc[self.ej] if len(edges) else np.zeros(0, np.int64)

    def linearize(self, est: np.ndarray, rt: Runtime, chunk, jacobians=True):
        kern = _LinearizeKernel(self.meas, est[self.ei], est[self.ej], jacobians)
        return rt.run_batch(BatchJob(len(self.edges), kern, chunk_size=chunk, name="edge_linearize"))

    def chi2(self, e: np.ndarray) -> float:
        if self.info is None:
            return float(np.sum(e * e))
        return float(np.einsum("ni,nij,nj->", e, self.info, e))

    def normal_equations(self, e, Ji, Jj):
        """Sum per-edge blocks in ascending edge order."""
        n = 7 * len(self.free)
        H = np.zeros((n, n))
        b = np.zeros(n)
        if self.info is None:
            WJi, WJj = Ji, Jj
        else:
            WJi = np.einsum("nij,njk->nik", self.info, Ji)
            WJj = np.einsum("nij,njk->nik", self.info, Jj)
        Hii = np.einsum("nki,nkj->nij", Ji, WJi)
        Hjj = np.einsum("nki,nkj->nij", Jj, WJj)
        Hij = np.einsum("nki,nkj->nij", Ji, WJj)
        bi = np.einsum("nki,nk->ni", WJi, e)
        bj = np.einsum("nki,nk->ni", WJj, e)
        for k in range(len(self.edges)):
            a, c = self.ci[k], self.cj[k]
            if a >= 0:
                sa = slice(7 * a, 7 * a + 7)
                H[sa, sa] += Hii[k]
                b[sa] += bi[k]
            if c >= 0:
                sc = slice(7 * c, 7 * c + 7)
                H[sc, sc] += Hjj[k]
                b[sc] += bj[k]
            if a >= 0 and c >= 0:
                H[sa, sc] += Hij[k]
                H[sc, sa] += Hij[k].T
        return H, b


def linearize_edges(vertices, edges, runtime: Runtime | None = None, chunk_size: int | None = None):
    """Residuals ``(m, 7)`` and Jacobian blocks ``(m, 7, 7)`` for every edge."""
    if not isinstance(vertices, dict):
        vertices = {v.id: v for v in vertices}
    fixed = {k: PoseGraphVertex(k, v.estimate, True) for k, v in vertices.items()}
    prob = _Problem(fixed, list(edges))
    return prob.linearize(_estimates(vertices, prob.ids), runtime or sequential(), chunk_size)


def _estimates(vertices, ids) -> np.ndarray:
    return _cols([vertices[v].estimate for v in ids])


def _apply(est: np.ndarray, problem: _Problem, delta: np.ndarray) -> np.ndarray:
    """Left-multiply ``exp(delta)`` onto every free vertex, all at once."""
    out = est.copy()
    if not problem.free:
        return out
    rows = np.array([problem.pos[v] for v in problem.free])
    d = delta.reshape(-1, 7).T
    upd = k_sim3_mul(k_sim3_exp(tuple(d[:3]), tuple(d[3:6]), d[6]), _split8(est[rows].T))
    s, q, t = upd
    new = np.column_stack([s, *q, *t])
    new[new[:, 1] < 0, 1:5] *= -1.0  # keep w >= 0
    out[rows] = new
    return out


def optimize(
    vertices,
    edges: list[PoseGraphEdge],
    config: LMConfig | None = None,
    runtime: Runtime | None = None,
) -> OptimizeResult:
    """Levenberg-Marquardt over the free vertices.

    Damping is ``lambda * diag(H)``. A step is accepted only if chi2 drops
    (then ``lambda /= 2``), otherwise ``lambda *= 4``. Stops on a step norm
    below ``step_tol``, a relative chi2 change below ``rel_chi2_tol``, or
    ``max_iterations``.
    """
    cfg = config or LMConfig()
    rt = runtime or sequential()
    if not isinstance(vertices, dict):
        vertices = {v.id: v for v in vertices}
    prob = _Problem(vertices, edges)
    est = _estimates(vertices, prob.ids)
    lam = cfg.lambda0
    trace: list[LMIteration] = []
    lin_ms = solve_ms = 0.0

    t0 = time.perf_counter()
    e, Ji, Jj = prob.linearize(est, rt, cfg.chunk_size)
    lin_ms += 1e3 * (time.perf_counter() - t0)
    chi2 = prob.chi2(e)
    initial = chi2
    reason = "max_iterations"
    if not prob.free or not edges:
        reason = "nothing_to_optimize"
    elif chi2 == 0.0:
        reason = "zero_residual"
    else:
        H, b = prob.normal_equations(e, Ji, Jj)
        for it in range(1, cfg.max_iterations + 1):
            t1 = time.perf_counter()
            diag = np.diag(H).copy()
            while True:
                A = H.copy()
                A[np.diag_indices_from(A)] += lam * diag
                try:
                    L, d = ldlt_factor(A)
                    break
                except NotPositiveDefinite as exc:
                    if lam >= cfg.lambda_max:
                        raise PoseGraphError(f"LDLT failed at lambda={lam:g}: {exc}") from exc
                    lam = min(lam * 4.0, cfg.lambda_max)
            delta = ldlt_solve(L, d, -b)
            solve_ms += 1e3 * (time.perf_counter() - t1)
            step = float(np.linalg.norm(delta))
            cand = _apply(est, prob, delta)
            t2 = time.perf_counter()
            e_new, _, _ = prob.linearize(cand, rt, cfg.chunk_size, jacobians=False)
            lin_ms += 1e3 * (time.perf_counter() - t2)
            chi2_new = prob.chi2(e_new)
            accepted = chi2_new < chi2
            trace.append(LMIteration(it, chi2, chi2_new, lam, step, accepted))
            if accepted:
                rel = (chi2 - chi2_new) / chi2
                est = cand
                chi2 = chi2_new
                lam = max(lam / 2.0, cfg.lambda_min)
                if step < cfg.step_tol:
                    reason = "small_step"
                    break
                if rel < cfg.rel_chi2_tol or chi2 == 0.0:
                    reason = "small_chi2_change"
                    break
                t3 = time.perf_counter()
                e, Ji, Jj = prob.linearize(est, rt, cfg.chunk_size)
                lin_ms += 1e3 * (time.perf_counter() - t3)
                H, b = prob.normal_equations(e, Ji, Jj)
            else:
                if step < cfg.step_tol:
                    reason = "small_step"
                    break
                if lam >= cfg.lambda_max:
                    reason = "lambda_max"
                    break
                lam = min(lam * 4.0, cfg.lambda_max)

    out = {}
    for v in prob.ids:
        src = vertices[v]
        out[v] = PoseGraphVertex(v, Sim3Transform.from_vector8(est[prob.pos[v]]), src.fixed)
    return OptimizeResult(out, trace, initial, chi2, reason, lin_ms, solve_ms)


def total_chi2(vertices, edges) -> float:
    if not isinstance(vertices, dict):
        vertices = {v.id: v for v in vertices}
    return float(sum(np.sum(edge_residual(e, vertices[e.i].estimate, vertices[e.j].estimate) ** 2) for e in edges))


# ---------------------------------------------------------------------------
# essential graph from the map
# ---------------------------------------------------------------------------


def _connected(ids, edges, root) -> set[int]:
    adj: dict[int, list[int]] = {v: [] for v in ids}
    for e in edges:
        adj[e.i].append(e.j)
        adj[e.j].append(e.i)
    seen = {root}
    q = deque([root])
    while q:
        v = q.popleft()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                q.append(w)
    return seen


def build_essential_problem(map_: Map, corrected, detection, loop_connections=None):
    """Vertices and edges for the essential graph after a loop correction.

    ``corrected`` maps keyframe id to ``(S_old, S_corrected)``. Edge
    measurements come from the pre-correction poses, except the new loop edge
    (``detection.S_cm``) and the optional ``loop_connections`` pairs, which are
    measured between corrected poses.
    """
    cur, mat = detection.current_kf_id, detection.matched_kf_id
    old: dict[int, Sim3Transform] = {}
    new: dict[int, Sim3Transform] = {}
    for k in map_.keyframe_ids():
        if k in corrected:
            old[k], new[k] = corrected[k]
        else:
            old[k] = new[k] = map_.keyframe(k).pose.to_sim3()
    vertices = {k: PoseGraphVertex(k, new[k], fixed=(k == mat)) for k in map_.keyframe_ids()}

    def rel(i, j, table):
        return table[i] * table[j].inverse()

    ess = map_.essential_edges()
    loop_pair = (min(cur, mat), max(cur, mat))
    edges: list[PoseGraphEdge] = []
    for i, j in ess["tree"]:
        edges.append(PoseGraphEdge(j, i, rel(j, i, old), "tree"))
    for i, j in ess["loop"]:
        if (i, j) != loop_pair:
            edges.append(PoseGraphEdge(i, j, rel(i, j, old), "loop"))
    edges.append(PoseGraphEdge(cur, mat, detection.S_cm, "loop"))
    taken = set(ess["tree"]) | set(ess["loop"]) | {loop_pair}
    # pairs joined by fusion straddle the loop: their old relative pose holds the drift
    for i, j in sorted({(min(i, j), max(i, j)) for i, j in loop_connections or ()}):
        if (i, j) not in taken:
            taken.add((i, j))
            edges.append(PoseGraphEdge(i, j, rel(i, j, new), "loop"))
    for i, j in ess["covisibility"]:
        if (i, j) not in taken:
            edges.append(PoseGraphEdge(i, j, rel(i, j, old), "covisibility"))
    reach = _connected(list(vertices), edges, mat)
    if len(reach) != len(vertices):
        missing = sorted(set(vertices) - reach)[:10]
        raise PoseGraphError(f"essential graph is disconnected; unreachable keyframes {missing}")
    return vertices, edges


def recover(map_: Map, optimized, initial: dict[int, Sim3Transform] | None = None):
    """Write optimised poses back and move every point with its anchor keyframe.

    A point is re-expressed through ``p' = S_new^-1(S_old(p))`` using the
    keyframe that last corrected it (``corrected_by``) or else its reference
    keyframe. ``S_old`` is that keyframe's entry in ``initial`` (the estimates
    the optimisation started from), defaulting to its current pose.
    """
    if not isinstance(optimized, dict):
        optimized = {v.id: v for v in optimized}
    map_._mutating()
    groups: dict[int, list[int]] = {}
    for pid in map_.live_points():
        p = map_.point(pid)
        anchor = p.corrected_by if p.corrected_by in optimized else p.ref_kf
        p.corrected_by = None
        if anchor is not None and anchor in optimized:
            groups.setdefault(anchor, []).append(pid)
    for k in sorted(groups):
        S_old = initial[k] if initial is not None and k in initial else map_.keyframe(k).pose.to_sim3()
        S_new = optimized[k].estimate
        if S_old.allclose(S_new, atol=0.0):
            continue
        # p -> S_new^-1 (S_old p) = a R p + t
        R_rel = S_new.rotation_matrix().T @ S_old.rotation_matrix()
        a = S_old.scale / S_new.scale
        t = S_new.rotation_matrix().T @ (S_old.translation - S_new.translation) / S_new.scale
        ids = groups[k]
        pts = [map_.point(pid) for pid in ids]
        P = np.array([p.position for p in pts]) @ (a * R_rel).T + t
        N = np.array([p.normal for p in pts]) @ R_rel.T
        for p, pos, nrm in zip(pts, P, N):
            map_.set_point_geometry(p.id, pos, nrm, p.d_min * a, p.d_max * a)
    for k, v in optimized.items():
        pose = v.estimate.to_se3()
        cur = map_.keyframe(k).pose
        if not (np.array_equal(pose.rotation, cur.rotation) and np.array_equal(pose.translation, cur.translation)):
            map_.set_pose(k, pose)
