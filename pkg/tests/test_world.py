import math

import numpy as np
import pytest

from loopcloser.world import SHAPES, SyntheticWorldConfig, generate_world


def tiny(**kw):
    kw.setdefault("n_poses", 30)
    return generate_world(SyntheticWorldConfig(**kw))


def test_noise_free_drift_equals_ground_truth():
    w = tiny(sigma_t=0.0, sigma_r=0.0)
    for a, b in zip(w.drifted, w.ground_truth):
        assert a.allclose(b, 1e-9)


def test_same_seed_same_world():
    a, b = tiny(seed=5), tiny(seed=5)
    for ka, kb in zip(a.keyframes, b.keyframes):
        assert ka.uv.tobytes() == kb.uv.tobytes()
        assert ka.descriptors.tobytes() == kb.descriptors.tobytes()
    assert tiny(seed=6).keyframes[3].uv.tobytes() != a.keyframes[3].uv.tobytes()


@pytest.mark.parametrize("shape", SHAPES)
def test_every_shape_generates_a_consistent_map(shape):
    w = tiny(shape=shape, n_poses=60)
    m = w.build_map()
    assert m.audit() == []
    assert m.tree_problems() == []
    assert w.loop_labels


def test_observations_project_near_their_landmark():
    w = tiny(sigma_t=0.02)
    K = w.intrinsics
    for k, kf in enumerate(w.keyframes):
        T = w.ground_truth[k]
        for f, pid in enumerate(kf.associations):
            if pid < 0:
                continue
            P = T.act(w.landmarks[w.point_landmark[int(pid)]])
            uv = np.array([K.fx * P[0] / P[2] + K.cx, K.fy * P[1] / P[2] + K.cy])
            assert np.linalg.norm(uv - kf.uv[f]) < 4.0  # 0.5 px noise, 8 sigma


def test_loop_labels_are_close_in_space_and_far_in_time():
    w = tiny(n_poses=80)
    for a, b in w.loop_labels:
        gap = np.linalg.norm(w.ground_truth[a].camera_center() - w.ground_truth[b].camera_center())
        assert gap <= 1.0 and b - a > 80 / 4


def test_landmark_default_count():
    w = tiny()
    assert len(w.landmarks) == 30 * 30
    assert tiny(n_landmarks=500).landmarks.shape == (500, 3)


def test_build_map_prefix():
    w = tiny()
    m = w.build_map(10)
    assert sorted(m.keyframe_ids()) == list(range(10))
    needed = set().union(*(kf.associated_points() for kf in w.keyframes[:10]))
    assert set(m.live_points()) == needed


@pytest.mark.parametrize("kw", [dict(shape="spiral"), dict(n_poses=5), dict(sigma_t=-1.0), dict(visibility_radius=0.0)])
def test_bad_configs(kw):
    with pytest.raises(ValueError):
        SyntheticWorldConfig(**kw)


def test_config_dict_is_plain():
    d = SyntheticWorldConfig(sigma_r=math.radians(1)).to_dict()
    assert d["lateral"] == [3.0, 8.0] and d["shape"] == "circle"
