"""Synthetic worlds: a camera driving a closed path past landmarks, with
dead-reckoning drift and ground-truth loop labels.

The camera looks to the right of its direction of travel and landmarks line
the right-hand side of the path, so a second pass over the start of the path
re-observes the same landmarks from similar viewpoints. Every pose becomes a
keyframe. A landmark seen in keyframes no more than ``track_gap`` apart forms
one map point; a later re-observation starts a new map point, which is the
duplicate that loop fusion has to find.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, SE3Pose, Sim3Transform, quat_from_rotvec
from .mapcore import DESCRIPTOR_BYTES, NO_POINT, KeyFrame, Map, MapConfig, MapPoint
from .matching import assign_words, word_bit_positions

SHAPES = ("circle", "figure-eight", "corridor-return")
PIXEL_NOISE = 0.5


@dataclass
class SyntheticWorldConfig:
    shape: str = "circle"
    n_poses: int = 100
    n_landmarks: int | None = None  # default 30 per pose
    visibility_radius: float = 10.0
    sigma_t: float = 0.01
    sigma_r: float = math.radians(0.5)
    bit_flip: float = 0.02
    seed: int = 0
    size: float = 10.0  # path radius (circle) or lobe half-width (figure-eight, corridor)
    laps: float = 1.15
    lateral: tuple = (3.0, 8.0)
    height: float = 1.5
    clutter: float = 0.1
    track_gap: int = 3
    scale_factor: float = 1.2
    n_levels: int = 8
    vocab_seed: int = 0
    intrinsics: dict = field(default_factory=lambda: dict(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480))

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; choose from {SHAPES}")
        if self.n_poses < 10:
            raise ValueError("need at least 10 poses")
        if min(self.sigma_t, self.sigma_r, self.bit_flip) < 0:
            raise ValueError("noise levels must be non-negative")
        if self.visibility_radius <= 0:
            raise ValueError("visibility radius must be positive")
        self.lateral = tuple(float(x) for x in self.lateral)

    @property
    def landmark_count(self) -> int:
        return self.n_landmarks if self.n_landmarks is not None else 30 * self.n_poses

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(**self.intrinsics)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lateral"] = list(self.lateral)
        return d


@dataclass
class SyntheticWorld:
    config: SyntheticWorldConfig
    intrinsics: CameraIntrinsics
    ground_truth: list[SE3Pose]
    drifted: list[SE3Pose]
    keyframes: list[KeyFrame]
    map_points: list[MapPoint]
    landmarks: np.ndarray
    point_landmark: dict[int, int]
    loop_labels: list[tuple[int, int]]

    @property
    def n_poses(self) -> int:
        return len(self.ground_truth)

    def build_map(self, upto: int | None = None, map_config: MapConfig | None = None) -> Map:
        """Map holding keyframes ``0..upto-1`` (all by default) at drifted poses."""
        m = Map(map_config)
        upto = len(self.keyframes) if upto is None else upto
        needed = set()
        for kf in self.keyframes[:upto]:
            needed |= kf.associated_points()
        for p in self.map_points:
            if p.id in needed:
                m.add_map_point(_copy_point(p))
        for kf in self.keyframes[:upto]:
            m.insert_keyframe(_copy_keyframe(kf))
        return m

    def in_loop_window(self, current: int, matched: int, slack: int = 5) -> bool:
        return any(abs(b - current) <= slack and abs(a - matched) <= slack for a, b in self.loop_labels)


def _copy_point(p: MapPoint) -> MapPoint:
    return MapPoint(p.id, p.position.copy(), p.normal.copy(), p.d_min, p.d_max, p.descriptor.copy())


def _copy_keyframe(kf: KeyFrame) -> KeyFrame:
    return KeyFrame(
        kf.id, kf.pose, kf.intrinsics, kf.uv.copy(), kf.octaves.copy(), kf.descriptors.copy(),
        kf.associations.copy(), kf.angles.copy(), kf.word_ids,
    )


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def _path(shape: str, size: float, tau: np.ndarray) -> np.ndarray:
    """Position on the closed path at parameter ``tau`` (one lap per 2*pi)."""
    if shape == "circle":
        return np.stack([size * np.cos(tau), size * np.sin(tau), np.zeros_like(tau)], axis=-1)
    if shape == "figure-eight":
        return np.stack([2.0 * size * np.sin(tau), size * np.sin(2.0 * tau), np.zeros_like(tau)], axis=-1)
    # stadium: two straights of length 2*size joined by half circles of radius size/1.5
    r = size / 1.5
    L = 2.0 * size
    perim = 2 * L + 2 * math.pi * r
    s = np.mod(tau, 2 * math.pi) / (2 * math.pi) * perim
    out = np.zeros(s.shape + (3,))
    a = s < L
    out[a, 0] = -size + s[a]
    out[a, 1] = -r
    b = (s >= L) & (s < L + math.pi * r)
    ang = (s[b] - L) / r - math.pi / 2
    out[b, 0] = size + r * np.cos(ang)
    out[b, 1] = r * np.sin(ang)
    c = (s >= L + math.pi * r) & (s < 2 * L + math.pi * r)
    out[c, 0] = size - (s[c] - L - math.pi * r)
    out[c, 1] = r
    d = s >= 2 * L + math.pi * r
    ang = (s[d] - 2 * L - math.pi * r) / r + math.pi / 2
    out[d, 0] = -size + r * np.cos(ang)
    out[d, 1] = r * np.sin(ang)
    return out


def _arclength_params(shape: str, size: float, laps: float, n: int) -> np.ndarray:
    """``n`` path parameters evenly spaced in arc length over ``laps`` laps."""
    dense = np.linspace(0.0, 2 * math.pi * laps, 20000 * max(1, math.ceil(laps)))
    p = _path(shape, size, dense)
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    return np.interp(np.linspace(0.0, s[-1], n), s, dense)


def _right_of(tangent: np.ndarray) -> np.ndarray:
    r = np.cross(tangent, [0.0, 0.0, 1.0])
    return r / np.linalg.norm(r, axis=-1, keepdims=True)


def _tangent(shape: str, size: float, tau: np.ndarray) -> np.ndarray:
    h = 1e-5
    d = _path(shape, size, tau + h) - _path(shape, size, tau - h)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _look_pose(center: np.ndarray, forward: np.ndarray) -> SE3Pose:
    z = forward / np.linalg.norm(forward)
    y = np.array([0.0, 0.0, -1.0])
    x = np.cross(y, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_wc = np.stack([x, y, z], axis=1)
    T = np.eye(4)
    T[:3, :3] = R_wc.T
    T[:3, 3] = -R_wc.T @ center
    return SE3Pose.from_matrix(T)


def _se3_exp(rng_t: np.ndarray, rng_r: np.ndarray) -> SE3Pose:
    return SE3Pose(quat_from_rotvec(rng_r), rng_t)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def generate_world(config: SyntheticWorldConfig) -> SyntheticWorld:
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    K = cfg.camera()
    n = cfg.n_poses

    # trajectory
    tau = _arclength_params(cfg.shape, cfg.size, cfg.laps, n)
    centers = _path(cfg.shape, cfg.size, tau)
    forwards = _right_of(_tangent(cfg.shape, cfg.size, tau))
    gt = [_look_pose(c, f) for c, f in zip(centers, forwards)]

    # dead reckoning
    noise_t = rng.normal(0.0, 1.0, (n, 3)) * cfg.sigma_t
    noise_r = rng.normal(0.0, 1.0, (n, 3)) * cfg.sigma_r
    drifted = [gt[0]]
    for k in range(1, n):
        rel = gt[k] * gt[k - 1].inverse()
        if cfg.sigma_t > 0 or cfg.sigma_r > 0:
            rel = _se3_exp(noise_t[k], noise_r[k]) * rel
        drifted.append(rel * drifted[-1])

    # landmarks along one lap, to the right of the path
    m = cfg.landmark_count
    lt = rng.uniform(0.0, 2 * math.pi, m)
    base = _path(cfg.shape, cfg.size, lt)
    side = _right_of(_tangent(cfg.shape, cfg.size, lt))
    off = rng.uniform(cfg.lateral[0], cfg.lateral[1], m)
    landmarks = base + side * off[:, None]
    landmarks[:, 2] = rng.uniform(-cfg.height, cfg.height, m)
    land_desc = rng.integers(0, 256, (m, DESCRIPTOR_BYTES), dtype=np.uint8)

    # visibility per pose
    log_s = math.log(cfg.scale_factor)
    obs = []  # per pose: (landmark ids, uv, octave, dist)
    for k in range(n):
        R = gt[k].rotation_matrix()
        Pc = landmarks @ R.T + gt[k].translation
        z = Pc[:, 2]
        dist = np.linalg.norm(Pc, axis=1)
        front = z > 0.1
        zs = np.where(front, z, 1.0)
        uv = np.stack([K.fx * Pc[:, 0] / zs + K.cx, K.fy * Pc[:, 1] / zs + K.cy], axis=1)
        uv += rng.normal(0.0, PIXEL_NOISE, uv.shape)
        ok = front & (dist <= cfg.visibility_radius)
        ok &= (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
        ids = np.flatnonzero(ok)
        octv = np.clip(np.round(np.log(cfg.visibility_radius / dist[ids]) / log_s), 0, cfg.n_levels - 1).astype(np.int64)
        obs.append((ids, uv[ids], octv, dist[ids]))

    # tracks -> map points
    point_landmark: dict[int, int] = {}
    last_seen: dict[int, tuple[int, int]] = {}  # landmark -> (pose, point id)
    assoc_lists = []
    next_id = 0
    track_obs: dict[int, list[int]] = {}
    for k in range(n):
        ids = obs[k][0]
        assoc = np.empty(len(ids), dtype=np.int64)
        for i, l in enumerate(ids):
            l = int(l)
            prev = last_seen.get(l)
            if prev is not None and k - prev[0] <= cfg.track_gap:
                pid = prev[1]
            else:
                pid = next_id
                next_id += 1
                point_landmark[pid] = l
                track_obs[pid] = []
            last_seen[l] = (k, pid)
            track_obs[pid].append(k)
            assoc[i] = pid
        assoc_lists.append(assoc)

    # observation descriptors with bit flips
    keyframes = []
    positions = word_bit_positions(cfg.vocab_seed)
    first_desc: dict[int, np.ndarray] = {}
    first_obs: dict[int, tuple[int, float, int]] = {}
    for k in range(n):
        ids, uv, octv, dist = obs[k]
        desc = land_desc[ids].copy()
        if cfg.bit_flip > 0 and len(ids):
            flips = rng.random((len(ids), DESCRIPTOR_BYTES * 8)) < cfg.bit_flip
            desc ^= np.packbits(flips, axis=1, bitorder="little")
        assoc = assoc_lists[k]
        for i, pid in enumerate(assoc):
            if int(pid) not in first_desc:
                first_desc[int(pid)] = desc[i].copy()
                first_obs[int(pid)] = (k, float(dist[i]), int(octv[i]))
        n_clutter = rng.binomial(len(ids), cfg.clutter) if cfg.clutter > 0 else 0
        c_uv = rng.uniform([0.0, 0.0], [K.width, K.height], (n_clutter, 2))
        c_uv = np.minimum(c_uv, [K.width - 1e-6, K.height - 1e-6])
        c_oct = rng.integers(0, cfg.n_levels, n_clutter)
        c_desc = rng.integers(0, 256, (n_clutter, DESCRIPTOR_BYTES), dtype=np.uint8)
        all_uv = np.concatenate([uv, c_uv])
        all_desc = np.concatenate([desc, c_desc])
        keyframes.append(
            KeyFrame(
                id=k,
                pose=drifted[k],
                intrinsics=K,
                uv=all_uv,
                octaves=np.concatenate([octv, c_oct]),
                descriptors=all_desc,
                associations=np.concatenate([assoc, np.full(n_clutter, NO_POINT, dtype=np.int64)]),
                angles=rng.uniform(-math.pi, math.pi, len(all_uv)),
                word_ids=assign_words(all_desc, positions),
            )
        )

    # map point geometry in the drifted frame
    map_points = []
    for pid in range(next_id):
        l = point_landmark[pid]
        k0, d0, o0 = first_obs[pid]
        # mean over the track of where each observer's drifted frame puts the
        # landmark: locally consistent, as after local bundle adjustment
        X = np.mean([drifted[k].inverse().act(gt[k].act(landmarks[l])) for k in track_obs[pid]], axis=0)
        rays = []
        for k in track_obs[pid]:
            c = drifted[k].camera_center()
            r = X - c
            rays.append(r / np.linalg.norm(r))
        normal = np.mean(rays, axis=0)
        d_max = d0 * cfg.scale_factor**o0
        d_min = d_max / cfg.scale_factor ** (cfg.n_levels - 1)
        map_points.append(MapPoint(pid, X, normal, d_min, d_max, first_desc[pid]))

    # loop labels
    C = np.array([g.camera_center() for g in gt])
    D = np.linalg.norm(C[:, None, :] - C[None, :, :], axis=2)
    I, J = np.nonzero((D <= 1.0) & (np.arange(n)[None, :] - np.arange(n)[:, None] > n / 4))
    labels = [(int(a), int(b)) for a, b in zip(I, J)]
    if not labels:
        raise ValueError(f"{cfg.shape} world with {cfg.laps} laps produced no loop labels")

    return SyntheticWorld(
        config=cfg,
        intrinsics=K,
        ground_truth=gt,
        drifted=drifted,
        keyframes=keyframes,
        map_points=map_points,
        landmarks=landmarks,
        point_landmark=point_landmark,
        loop_labels=labels,
    )
