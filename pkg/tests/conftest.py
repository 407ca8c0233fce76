import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from loopcloser.geometry import SE3Pose, Sim3Transform, quat_from_rotvec
from loopcloser.world import SyntheticWorldConfig, generate_world

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_sim3(rng, t_scale=2.0, angle=2.5, log_s=0.7) -> Sim3Transform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    phi = axis * rng.uniform(0, angle)
    return Sim3Transform(math.exp(rng.uniform(-log_s, log_s)), quat_from_rotvec(phi), rng.normal(size=3) * t_scale)


def random_se3(rng, t_scale=2.0, angle=2.5) -> SE3Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return SE3Pose(quat_from_rotvec(axis * rng.uniform(0, angle)), rng.normal(size=3) * t_scale)


@pytest.fixture(scope="session")
def circle_world():
    return generate_world(SyntheticWorldConfig(shape="circle", seed=0))


@pytest.fixture(scope="session")
def figure_eight_world():
    return generate_world(SyntheticWorldConfig(shape="figure-eight", seed=0))


@pytest.fixture(scope="session")
def small_world():
    return generate_world(SyntheticWorldConfig(shape="circle", n_poses=40, seed=3))


# --- shared scenarios -----------------------------------------------------------


class LoopScenario:
    """Circle world map up to keyframe ``current`` with an accepted detection."""

    def __init__(self, world, current):
        from loopcloser.loop_detect import detect_loop
        from loopcloser.matching import WordIndex

        self.world = world
        self.current = current
        self.map = world.build_map(current + 1)
        self.index = WordIndex()
        for kf in world.keyframes[:current]:
            self.index.add(kf.id, kf.word_ids)
        self.detection = detect_loop(self.map, current, self.index)

    def fresh_map(self):
        return self.world.build_map(self.current + 1)


@pytest.fixture(scope="session")
def loop_scenario(circle_world):
    sc = LoopScenario(circle_world, 85)
    assert sc.detection is not None and sc.detection.accepted
    return sc


def _fuzz_keyframe(rng, kf_id, live, K, n_feat=12):
    from loopcloser.mapcore import DESCRIPTOR_BYTES, NO_POINT, KeyFrame

    assoc = np.full(n_feat, NO_POINT, dtype=np.int64)
    if live:
        k = int(rng.integers(0, min(n_feat, len(live)) + 1))
        chosen = rng.choice(sorted(live), size=k, replace=False)
        slots = rng.choice(n_feat, size=k, replace=False)
        assoc[slots] = chosen
    uv = rng.uniform([0, 0], [K.width, K.height], (n_feat, 2))
    desc = rng.integers(0, 256, (n_feat, DESCRIPTOR_BYTES), dtype=np.uint8)
    return KeyFrame(kf_id, SE3Pose(np.array([1.0, 0, 0, 0]), rng.normal(size=3)), K, uv, np.zeros(n_feat), desc, assoc)


def map_fuzz(seed: int, n_ops: int = 1000, check=None):
    """Random operation sequence over the map core.

    ``check(map)`` runs after every fusion application; returns the op counts.
    """
    from loopcloser.geometry import CameraIntrinsics
    from loopcloser.loop_correct import FusionEntry, FusionPlan, apply_fusion
    from loopcloser.mapcore import DESCRIPTOR_BYTES, NO_POINT, Map, MapConfig, MapPoint

    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    m = Map(MapConfig(covis_threshold=2, essential_threshold=3))
    counts = {}

    def live():
        return [p.id for p in m.points.values() if not p.is_bad]

    def new_point():
        pid = m.new_point_id()
        m.add_map_point(MapPoint(pid, rng.normal(size=3), rng.normal(size=3), 0.5, 5.0,
                                 rng.integers(0, 256, DESCRIPTOR_BYTES, dtype=np.uint8)))
        return pid

    for _ in range(5):
        new_point()
    next_kf = 0
    ops = ["point", "point", "keyframe", "associate", "dissociate", "fusion", "fusion", "connections", "loop_edge"]
    for _ in range(n_ops):
        op = ops[int(rng.integers(len(ops)))] if m.keyframes else "keyframe"
        counts[op] = counts.get(op, 0) + 1
        if op == "point":
            new_point()
        elif op == "keyframe":
            m.insert_keyframe(_fuzz_keyframe(rng, next_kf, live(), K))
            next_kf += 1
        elif op == "associate":
            kf = m.keyframe(int(rng.choice(list(m.keyframes))))
            free = np.flatnonzero(kf.associations == NO_POINT)
            cands = [p for p in live() if kf.id not in m.point(p).observations]
            if len(free) and cands:
                m.add_association(kf.id, int(rng.choice(free)), int(rng.choice(cands)))
        elif op == "dissociate":
            kf = m.keyframe(int(rng.choice(list(m.keyframes))))
            used = np.flatnonzero(kf.associations != NO_POINT)
            if len(used):
                m.remove_association(kf.id, int(rng.choice(used)))
        elif op == "fusion":
            entries = []
            pts = live()
            kfs = sorted(m.keyframes)
            for _ in range(int(rng.integers(1, 8))):
                kf = m.keyframe(int(rng.choice(kfs)))
                f = int(rng.integers(kf.n_features))
                occ = int(kf.associations[f])
                s = int(rng.choice(pts))
                # plans may hold stale ids; apply_fusion has to resolve or skip them
                if occ == NO_POINT:
                    entries.append(FusionEntry(kf.id, f, s, None))
                elif occ != s:
                    entries.append(FusionEntry(kf.id, f, s, occ))
            apply_fusion(m, FusionPlan(entries))
            if check is not None:
                check(m)
        elif op == "connections":
            m.update_connections(int(rng.choice(list(m.keyframes))))
        elif op == "loop_edge" and len(m.keyframes) >= 2:
            a, b = rng.choice(sorted(m.keyframes), size=2, replace=False)
            m.add_loop_edge(int(a), int(b))
    return m, counts
