"""Rigid and similarity transforms, exp/log maps and the pinhole camera.

Pose convention: every stored pose maps world coordinates into the camera
frame (``T_cw`` for SE3, ``S_cw`` for Sim3), i.e. ``x_cam = s * R @ x_w + t``.
Quaternions are stored ``(w, x, y, z)`` and canonicalised to ``w >= 0``.

Tangent vectors of Sim3 are ordered ``(rho[3], phi[3], sigma)``: translation
part, rotation vector, log-scale.

The lower-case ``k_*`` kernels operate on tuples of components and are
written only in terms of arithmetic and :mod:`loopcloser.autodiff` functions,
so they evaluate equally on floats, on arrays (one transform per element) and
on dual numbers.  The dataclasses wrap them for everyday float use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad

SMALL_ANGLE = 1e-5
SMALL_SIGMA = 1e-5
DEPTH_EPS = 1e-6
PI_MARGIN = 1e-6

# below this |sigma| the W-coefficient integrals use their power series
_SERIES_SIGMA = 0.1
_SERIES_TERMS = 12


# ---------------------------------------------------------------------------
# component kernels
# ---------------------------------------------------------------------------


def k_cross(a, b):
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def k_quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def k_quat_conj(q):
    return (q[0], -q[1], -q[2], -q[3])


def k_quat_rotate(q, v):
    """Rotate ``v`` by unit quaternion ``q``."""
    u = (q[1], q[2], q[3])
    uv = k_cross(u, v)
    uv2 = (2.0 * uv[0], 2.0 * uv[1], 2.0 * uv[2])
    uuv = k_cross(u, uv2)
    return (
        v[0] + q[0] * uv2[0] + uuv[0],
        v[1] + q[0] * uv2[1] + uuv[1],
        v[2] + q[0] * uv2[2] + uuv[2],
    )


def k_sim3_mul(a, b):
    sa, qa, ta = a
    sb, qb, tb = b
    rt = k_quat_rotate(qa, tb)
    return (
        sa * sb,
        k_quat_mul(qa, qb),
        (sa * rt[0] + ta[0], sa * rt[1] + ta[1], sa * rt[2] + ta[2]),
    )


def k_sim3_inv(a):
    s, q, t = a
    qi = k_quat_conj(q)
    inv_s = 1.0 / s
    rt = k_quat_rotate(qi, t)
    return (inv_s, qi, (-inv_s * rt[0], -inv_s * rt[1], -inv_s * rt[2]))


def k_sim3_act(a, p):
    s, q, t = a
    rp = k_quat_rotate(q, p)
    return (s * rp[0] + t[0], s * rp[1] + t[1], s * rp[2] + t[2])


def _series(coeffs, x):
    acc = coeffs[-1]
    for c in coeffs[-2::-1]:
        acc = acc * x + c
    return acc


# integral_0^1 e^{sigma u} u^n / n! du = sum_k sigma^k / (n! k! (n + k + 1))
_F2 = [1.0 / (math.factorial(k) * (k + 2)) for k in range(_SERIES_TERMS)]
_F3 = [1.0 / (2.0 * math.factorial(k) * (k + 3)) for k in range(_SERIES_TERMS)]


def _w_coeffs(theta, theta2, sigma):
    """Coefficients (a, b, c) with ``W = a I + b Phi + c Phi^2``.

    ``W = int_0^1 e^{sigma u} exp(u Phi) du`` is the matrix that maps the
    translational tangent ``rho`` to the Sim3 translation.  ``theta`` is only
    read where ``theta2`` is above the small-angle threshold.
    """
    small_s = np.abs(ad.value(sigma)) < SMALL_SIGMA
    sig_safe = ad.where(small_s, 1.0, sigma)
    a = ad.where(small_s, 1.0 + sigma * 0.5 + sigma * sigma / 6.0, ad.expm1(sig_safe) / sig_safe)

    small_t = ad.value(theta2) < SMALL_ANGLE * SMALL_ANGLE
    th = ad.where(small_t, 1.0, theta)
    es = ad.exp(sigma)
    sn, cs = ad.sin(th), ad.cos(th)
    den = sigma * sigma + th * th
    c1 = (es * (sigma * sn - th * cs) + th) / den
    cc = (es * (sigma * cs + th * sn) - sigma) / den
    b_gen = c1 / th
    c_gen = (a - cc) / (th * th)

    # theta -> 0: b -> int e^{su} u du, c -> int e^{su} u^2/2 du
    ser = np.abs(ad.value(sigma)) < _SERIES_SIGMA
    sig_cf = ad.where(ser, 1.0, sigma)
    es_cf = ad.exp(sig_cf)
    f2_cf = ((sig_cf - 1.0) * es_cf + 1.0) / (sig_cf * sig_cf)
    f3_cf = ((sig_cf * sig_cf - 2.0 * sig_cf + 2.0) * es_cf - 2.0) / (2.0 * sig_cf * sig_cf * sig_cf)
    b_small = ad.where(ser, _series(_F2, sigma), f2_cf)
    c_small = ad.where(ser, _series(_F3, sigma), f3_cf)

    return a, ad.where(small_t, b_small, b_gen), ad.where(small_t, c_small, c_gen)


def k_so3_exp(phi):
    theta2 = phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2]
    small = ad.value(theta2) < SMALL_ANGLE * SMALL_ANGLE
    th = ad.sqrt(ad.where(small, 1.0, theta2))
    half = th * 0.5
    k_gen = ad.sin(half) / th
    w = ad.where(small, 1.0 - theta2 / 8.0, ad.cos(half))
    k = ad.where(small, 0.5 - theta2 / 48.0, k_gen)
    return (w, k * phi[0], k * phi[1], k * phi[2]), theta2, th


def k_sim3_exp(rho, phi, sigma):
    q, theta2, th = k_so3_exp(phi)
    a, b, c = _w_coeffs(th, theta2, sigma)
    pr = k_cross(phi, rho)
    ppr = k_cross(phi, pr)
    t = tuple(a * rho[i] + b * pr[i] + c * ppr[i] for i in range(3))
    return (ad.exp(sigma), q, t)


def k_so3_log(q):
    """Rotation vector of unit quaternion ``q`` plus ``theta^2`` and ``theta``."""
    w, x, y, z = q
    flip = np.where(np.asarray(ad.value(w)) < 0.0, -1.0, 1.0)
    if flip.ndim == 0:
        flip = float(flip)
    w, x, y, z = w * flip, x * flip, y * flip, z * flip
    n2 = x * x + y * y + z * z
    small = ad.value(n2) < (0.5 * SMALL_ANGLE) ** 2
    n = ad.sqrt(ad.where(small, 1.0, n2))
    theta_gen = 2.0 * ad.atan2(n, w)
    f = ad.where(small, (2.0 / w) * (1.0 - n2 / (3.0 * w * w)), theta_gen / n)
    phi = (f * x, f * y, f * z)
    theta2 = f * f * n2
    return phi, theta2, ad.where(small, 0.0, theta_gen)


def k_sim3_log(s, q, t):
    sigma = ad.log(s)
    phi, theta2, th = k_so3_log(q)
    a, b, c = _w_coeffs(th, theta2, sigma)
    # W^-1 = x I + y Phi + z Phi^2 (same algebra, Phi^3 = -theta^2 Phi)
    x = 1.0 / a
    d = a - theta2 * c
    det = d * d + theta2 * b * b
    y = (-b * x * d - theta2 * b * c * x) / det
    z = (-c * x * d + b * b * x) / det
    pt = k_cross(phi, t)
    ppt = k_cross(phi, pt)
    rho = tuple(x * t[i] + y * pt[i] + z * ppt[i] for i in range(3))
    return rho, phi, sigma


# ---------------------------------------------------------------------------
# float value types
# ---------------------------------------------------------------------------


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=float).reshape(shape)
    arr.setflags(write=False)
    return arr


def _canonical_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"invalid quaternion {q}")
    if abs(n - 1.0) > 4 * np.finfo(float).eps:  # keeps re-normalisation idempotent
        q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return _canonical_quat(q)


def quat_from_rotvec(phi) -> np.ndarray:
    q, _, _ = k_so3_exp(tuple(float(v) for v in phi))
    return _canonical_quat([float(c) for c in q])


def rotvec_from_quat(q) -> np.ndarray:
    phi, _, _ = k_so3_log(tuple(float(v) for v in q))
    return np.array([float(c) for c in phi])


def _split(q, t):
    return tuple(float(v) for v in q), tuple(float(v) for v in t)


class Sim3Tangent(NamedTuple):
    rho: np.ndarray
    phi: np.ndarray
    sigma: float

    @classmethod
    def from_vector(cls, v) -> "Sim3Tangent":
        v = np.asarray(v, dtype=float).reshape(7)
        return cls(v[:3].copy(), v[3:6].copy(), float(v[6]))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi, [self.sigma]])


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid world-to-camera transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(_canonical_quat(self.rotation), 4))
        object.__setattr__(self, "translation", _frozen(self.translation, 3))

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "SE3Pose":
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        s, q, t = k_sim3_mul((1.0, *_split(self.rotation, self.translation)), (1.0, *_split(other.rotation, other.translation)))
        return SE3Pose(np.array(q), np.array(t))

    __mul__ = compose

    def inverse(self) -> "SE3Pose":
        _, q, t = k_sim3_inv((1.0, *_split(self.rotation, self.translation)))
        return SE3Pose(np.array(q), np.array(t))

    def act(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p @ self.rotation_matrix().T + self.translation

    def camera_center(self) -> np.ndarray:
        return -self.rotation_matrix().T @ self.translation

    def to_sim3(self) -> "Sim3Transform":
        return Sim3Transform(1.0, self.rotation, self.translation)

    def allclose(self, other: "SE3Pose", atol: float = 1e-9) -> bool:
        return np.allclose(self.matrix(), other.matrix(), rtol=0.0, atol=atol)

    def __repr__(self) -> str:
        return f"SE3Pose(q={np.round(self.rotation, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


@dataclass(frozen=True, eq=False)
class Sim3Transform:
    """Similarity transform ``p -> scale * R p + translation``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        s = float(self.scale)
        if not (s > 0.0 and math.isfinite(s)):
            raise ValueError(f"Sim3 scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "rotation", _frozen(_canonical_quat(self.rotation), 4))
        object.__setattr__(self, "translation", _frozen(self.translation, 3))

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls(1.0, np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_components(cls, parts) -> "Sim3Transform":
        s, q, t = parts
        return cls(float(s), np.array([float(c) for c in q]), np.array([float(c) for c in t]))

    @classmethod
    def from_vector8(cls, v) -> "Sim3Transform":
        """``(scale, qw, qx, qy, qz, tx, ty, tz)``."""
        v = np.asarray(v, dtype=float).reshape(8)
        return cls(v[0], v[1:5], v[5:8])

    def as_vector8(self) -> np.ndarray:
        return np.concatenate([[self.scale], self.rotation, self.translation])

    def components(self):
        return (self.scale, *_split(self.rotation, self.translation))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation_matrix()
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        return Sim3Transform.from_components(k_sim3_mul(self.components(), other.components()))

    __mul__ = compose

    def inverse(self) -> "Sim3Transform":
        return Sim3Transform.from_components(k_sim3_inv(self.components()))

    def act(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return self.scale * (p @ self.rotation_matrix().T) + self.translation

    def camera_center(self) -> np.ndarray:
        return -self.rotation_matrix().T @ self.translation / self.scale

    def to_se3(self) -> SE3Pose:
        return SE3Pose(self.rotation, self.translation / self.scale)

    @classmethod
    def exp(cls, v) -> "Sim3Transform":
        if not isinstance(v, Sim3Tangent):
            v = Sim3Tangent.from_vector(v)
        rho = tuple(float(c) for c in v.rho)
        phi = tuple(float(c) for c in v.phi)
        return cls.from_components(k_sim3_exp(rho, phi, float(v.sigma)))

    def log(self) -> Sim3Tangent:
        q = self.rotation
        angle = 2.0 * math.atan2(float(np.linalg.norm(q[1:])), float(abs(q[0])))
        if angle > math.pi - PI_MARGIN:
            raise ValueError(f"Sim3 log undefined near rotation angle pi (angle={angle})")
        rho, phi, sigma = k_sim3_log(*self.components())
        return Sim3Tangent(np.array([float(c) for c in rho]), np.array([float(c) for c in phi]), float(sigma))

    def allclose(self, other: "Sim3Transform", atol: float = 1e-9) -> bool:
        return np.allclose(self.matrix(), other.matrix(), rtol=0.0, atol=atol)

    def __repr__(self) -> str:
        return (
            f"Sim3Transform(s={self.scale:.6g}, q={np.round(self.rotation, 6).tolist()}, "
            f"t={np.round(self.translation, 6).tolist()})"
        )


def sim3_compose(a: Sim3Transform, b: Sim3Transform) -> Sim3Transform:
    return a.compose(b)


def sim3_inverse(s: Sim3Transform) -> Sim3Transform:
    return s.inverse()


def sim3_exp(v) -> Sim3Transform:
    return Sim3Transform.exp(v)


def sim3_log(s: Sim3Transform) -> Sim3Tangent:
    return s.log()


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}


def project(intrinsics: CameraIntrinsics, p_cam) -> np.ndarray | None:
    """Pixel of a camera-frame point, or ``None`` when it is not in view."""
    x, y, z = (float(c) for c in p_cam)
    if z <= DEPTH_EPS:
        return None
    u = intrinsics.fx * x / z + intrinsics.cx
    v = intrinsics.fy * y / z + intrinsics.cy
    if not (0.0 <= u < intrinsics.width and 0.0 <= v < intrinsics.height):
        return None
    return np.array([u, v])


def project_points(intrinsics: CameraIntrinsics, P) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`project`: returns ``(uv, in_view)``; ``uv`` is NaN where out of depth."""
    P = np.asarray(P, dtype=float).reshape(-1, 3)
    z = P[:, 2]
    front = z > DEPTH_EPS
    zs = np.where(front, z, 1.0)
    u = intrinsics.fx * P[:, 0] / zs + intrinsics.cx
    v = intrinsics.fy * P[:, 1] / zs + intrinsics.cy
    uv = np.stack([u, v], axis=1)
    uv[~front] = np.nan
    ok = front & (u >= 0.0) & (u < intrinsics.width) & (v >= 0.0) & (v < intrinsics.height)
    return uv, ok


def unproject(intrinsics: CameraIntrinsics, uv, depth) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x = (uv[..., 0] - intrinsics.cx) / intrinsics.fx * depth
    y = (uv[..., 1] - intrinsics.cy) / intrinsics.fy * depth
    return np.stack([x, y, depth * np.ones_like(x)], axis=-1)
