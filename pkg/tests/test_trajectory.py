import numpy as np
import pytest
from hypothesis import given, strategies as st

from loopcloser.geometry import SE3Pose, quat_from_rotvec
from loopcloser.trajectory import compute_ate, read_tum, write_tum

from conftest import random_se3
from oracles import ate_oracle


def random_traj(rng, n=30):
    return [random_se3(rng) for _ in range(n)]


def test_tum_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    poses = random_traj(rng)
    path = tmp_path / "t.txt"
    write_tum(path, poses, timestamps=np.arange(30) * 0.1)
    stamps, back = read_tum(path)
    np.testing.assert_allclose(stamps, np.arange(30) * 0.1)
    for a, b in zip(poses, back):
        assert a.allclose(b, 1e-12)


def test_tum_rejects_short_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 1 2 3\n")
    with pytest.raises(ValueError):
        read_tum(path)


def test_constant_shift():
    rng = np.random.default_rng(1)
    gt = random_traj(rng)
    shifted = [SE3Pose(T.rotation, T.translation - T.rotation_matrix() @ np.array([1.0, 0, 0])) for T in gt]
    assert compute_ate(shifted, gt, align=False).rmse == pytest.approx(1.0, abs=1e-12)
    assert compute_ate(shifted, gt, align=True).rmse < 1e-12


def test_identity_is_zero():
    rng = np.random.default_rng(2)
    gt = random_traj(rng)
    assert compute_ate(gt, gt, align=False).rmse == 0.0


@given(st.integers(0, 10_000))
def test_aligned_ate_ignores_rigid_motion_of_estimate(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(25, 3)) * 5
    est = gt + rng.normal(0, 0.3, gt.shape)
    R = SE3Pose(quat_from_rotvec(rng.normal(size=3)), np.zeros(3)).rotation_matrix()
    moved = est @ R.T + rng.normal(size=3) * 10
    a = compute_ate(est, gt).rmse
    assert compute_ate(moved, gt).rmse == pytest.approx(a, abs=1e-9)
    assert a == pytest.approx(ate_oracle(est, gt, True), abs=1e-9)


def test_length_mismatch():
    with pytest.raises(ValueError):
        compute_ate(np.zeros((3, 3)), np.zeros((4, 3)))
