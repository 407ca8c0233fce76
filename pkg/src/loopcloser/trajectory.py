"""Trajectory text I/O (TUM layout) and absolute trajectory error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SE3Pose, matrix_to_quat, quat_to_matrix


@dataclass
class AteResult:
    rmse: float
    aligned: bool
    errors: np.ndarray  # per-pose translation error (m)
    rotation: np.ndarray  # alignment applied to the estimate: x -> R x + t
    translation: np.ndarray

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "aligned": self.aligned,
            "n": int(len(self.errors)),
            "max": float(self.errors.max()) if len(self.errors) else 0.0,
        }


def positions(traj) -> np.ndarray:
    """Camera centres of a list of world-to-camera poses, or an (n, 3) array as is."""
    if isinstance(traj, np.ndarray):
        return np.asarray(traj, dtype=float).reshape(-1, 3)
    return np.array([p.camera_center() for p in traj], dtype=float).reshape(-1, 3)


def align_rigid(est: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation mapping ``est`` onto ``gt``."""
    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    C = (gt - mu_g).T @ (est - mu_e)
    U, _, Vt = np.linalg.svd(C)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ D @ Vt
    return R, mu_g - R @ mu_e


def compute_ate(estimated, ground_truth, align: bool = True) -> AteResult:
    est = positions(estimated)
    gt = positions(ground_truth)
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) == 0:
        raise ValueError("empty trajectories")
    R, t = np.eye(3), np.zeros(3)
    if align:
        R, t = align_rigid(est, gt)
    err = np.linalg.norm(est @ R.T + t - gt, axis=1)
    return AteResult(float(np.sqrt(np.mean(err**2))), align, err, R, t)


def write_tum(path, poses, timestamps=None):
    """One line per pose: ``timestamp tx ty tz qx qy qz qw`` of the camera in the world."""
    ts = np.arange(len(poses), dtype=float) if timestamps is None else timestamps
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for stamp, T in zip(ts, poses):
            Twc = T.inverse()
            q = Twc.rotation
            vals = [float(stamp), *map(float, Twc.translation), float(q[1]), float(q[2]), float(q[3]), float(q[0])]
            fh.write(" ".join(repr(v) for v in vals) + "\n")


def read_tum(path) -> tuple[np.ndarray, list[SE3Pose]]:
    """Timestamps and world-to-camera poses from a TUM trajectory file."""
    stamps, poses = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            v = [float(x) for x in parts]
            q = np.array([v[7], v[4], v[5], v[6]])
            q /= np.linalg.norm(q)
            Twc = SE3Pose(matrix_to_quat(quat_to_matrix(q)), np.array(v[1:4]))
            stamps.append(v[0])
            poses.append(Twc.inverse())
    return np.array(stamps), poses
