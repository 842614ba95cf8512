"""Rotation, pose, and pinhole projection primitives.

Quaternions are Hamilton convention, stored as arrays ``[w, x, y, z]``.
Local increments are applied on the right: ``q <- q * exp(delta)`` for
rotations, plain addition for translations and other vector states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonPositiveDepth

DEPTH_FLOOR = 1e-6
_SMALL_ANGLE = 1e-8


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n == 0.0:
        raise DimensionMismatch("zero quaternion cannot be normalized")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_exp(omega: np.ndarray) -> np.ndarray:
    """Map a rotation vector to a unit quaternion."""
    theta = np.linalg.norm(omega)
    half = 0.5 * theta
    if theta < _SMALL_ANGLE:
        # sin(t/2)/t ~ 1/2 - t^2/48
        k = 0.5 - theta * theta / 48.0
        q = np.array([1.0 - half * half / 2.0, *(k * omega)])
        return quat_normalize(q)
    k = np.sin(half) / theta
    return np.array([np.cos(half), *(k * omega)])


def quat_log(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion (shortest arc)."""
    q = q if q[0] >= 0.0 else -q
    w = q[0]
    v = q[1:]
    n = np.linalg.norm(v)
    if n < _SMALL_ANGLE:
        return (2.0 / w) * v * (1.0 - n * n / (3.0 * w * w))
    return 2.0 * np.arctan2(n, w) * (v / n)


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation matrix, scalar part non-negative."""
    t = float(np.trace(R))
    if t > 0.0:
        s = 2.0 * np.sqrt(t + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0))
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q = q if q[0] >= 0.0 else -q
    return quat_normalize(q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return quat_to_matrix(q) @ v


def quat_left(q: np.ndarray) -> np.ndarray:
    """4x4 matrix L(q) with L(q) p = q * p."""
    w, x, y, z = q
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


def quat_right(q: np.ndarray) -> np.ndarray:
    """4x4 matrix R(q) with R(q) p = p * q."""
    w, x, y, z = q
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, z, -y],
            [y, -z, w, x],
            [z, y, -x, w],
        ]
    )


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def so3_right_jacobian(theta: np.ndarray) -> np.ndarray:
    """Right Jacobian of the SO(3) exponential at a rotation vector."""
    t = np.linalg.norm(theta)
    S = skew(theta)
    if t < 1e-6:
        return np.eye(3) - 0.5 * S + S @ S / 6.0
    t2 = t * t
    return (np.eye(3) - (1.0 - np.cos(t)) / t2 * S
            + (t - np.sin(t)) / (t2 * t) * (S @ S))


# ---------------------------------------------------------------------------
# batched quaternion helpers (used by the simulator and batched residuals)


def quat_mul_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=1,
    )


def quat_conj_batch(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[:, 1:] *= -1.0
    return out


def quat_exp_batch(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega, axis=1)
    half = 0.5 * theta
    k = np.where(theta < _SMALL_ANGLE, 0.5 - theta * theta / 48.0,
                 np.sin(half) / np.where(theta == 0.0, 1.0, theta))
    q = np.concatenate([np.cos(half)[:, None], k[:, None] * omega], axis=1)
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def quat_to_matrix_batch(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


# ---------------------------------------------------------------------------
# poses


@dataclass
class Pose:
    """Rigid transform: rotation quaternion and translation."""

    q: np.ndarray = field(default_factory=quat_identity)
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_normalize(quat_mul(self.q, other.q)),
                    self.p + rotate(self.q, other.p))

    def inverse(self) -> "Pose":
        qi = quat_conj(self.q)
        return Pose(qi, -rotate(qi, self.p))

    def transform(self, point: np.ndarray) -> np.ndarray:
        return rotate(self.q, point) + self.p

    def copy(self) -> "Pose":
        return Pose(self.q.copy(), self.p.copy())


def boxplus(element, delta: np.ndarray):
    """Apply a local increment to a state element.

    Poses take a 6-vector (translation, rotation); quaternions a 3-vector;
    everything ndarray-like is updated additively.
    """
    if isinstance(element, Pose):
        if delta.shape != (6,):
            raise DimensionMismatch(f"pose increment must be 6-dim, got {delta.shape}")
        return Pose(
            quat_normalize(quat_mul(element.q, quat_exp(delta[3:]))),
            element.p + delta[:3],
        )
    element = np.asarray(element, dtype=float)
    if element.shape == (4,) and delta.shape == (3,):
        return quat_normalize(quat_mul(element, quat_exp(delta)))
    if element.shape != delta.shape and element.shape != np.shape(delta):
        raise DimensionMismatch(
            f"increment shape {np.shape(delta)} does not match state {element.shape}")
    return element + delta


# ---------------------------------------------------------------------------
# pinhole model on the normalized image plane


def project(p_c: np.ndarray) -> np.ndarray:
    """Normalized-plane projection of a camera-frame point."""
    if p_c[2] <= DEPTH_FLOOR:
        raise NonPositiveDepth(f"depth {p_c[2]:.3e} at or below floor")
    return p_c[:2] / p_c[2]


def back_project(u: np.ndarray) -> np.ndarray:
    """Unit-depth ray through a normalized image point."""
    return np.array([u[0], u[1], 1.0])


def project_jacobian(p_c: np.ndarray) -> np.ndarray:
    """2x3 derivative of project() at a camera-frame point."""
    x, y, z = p_c
    iz = 1.0 / z
    return np.array([[iz, 0.0, -x * iz * iz], [0.0, iz, -y * iz * iz]])
