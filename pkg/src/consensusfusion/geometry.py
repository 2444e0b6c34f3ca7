"""Minimal SO(3)/SE(3) types used by the residuals and the simulator.

Conventions (used everywhere in this package):
  - Hamilton quaternions, stored as (w, x, y, z), passive rotations,
    right-handed frames.
  - ``q.rotate(v)`` maps coordinates from the child frame into the parent
    frame, i.e. ``p_parent = q_parent_child.rotate(p_child)``.
  - Tangent-space perturbations are applied on the right:
    ``q ⊞ delta = q * exp(delta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


def vec3(x: float, y: float, z: float) -> np.ndarray:
    return np.array([x, y, z], dtype=float)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# Raw quaternion helpers operating on length-4 (w, x, y, z) arrays.  These are
# the hot-path primitives; the UnitQuaternion class below wraps them.
# ---------------------------------------------------------------------------

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.sqrt(float(np.dot(q, q)))
    if n < _EPS:
        raise ValueError("cannot normalize near-zero quaternion")
    return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    # q * [0, v] * q^-1 expanded; cheaper than building the matrix for a
    # single vector.
    w = q[0]
    ux, uy, uz = q[1], q[2], q[3]
    vx, vy, vz = v[0], v[1], v[2]
    # uv = u x v, written out because np.cross is slow for single vectors
    cx = uy * vz - uz * vy
    cy = uz * vx - ux * vz
    cz = ux * vy - uy * vx
    return np.array([
        vx + 2.0 * (w * cx + uy * cz - uz * cy),
        vy + 2.0 * (w * cy + uz * cx - ux * cz),
        vz + 2.0 * (w * cz + ux * cy - uy * cx),
    ])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Exponential map from a tangent vector to a unit quaternion."""
    angle = np.sqrt(float(np.dot(phi, phi)))
    half = 0.5 * angle
    if angle < 1e-8:
        # sin(half)/angle ~ 0.5 - angle^2/48
        s = 0.5 - angle * angle / 48.0
        return quat_normalize(np.array([1.0 - half * half / 2.0,
                                        s * phi[0], s * phi[1], s * phi[2]]))
    s = np.sin(half) / angle
    return np.array([np.cos(half), s * phi[0], s * phi[1], s * phi[2]])


def so3_log(q: np.ndarray) -> np.ndarray:
    """Log map of a unit quaternion, returning a tangent vector in (-pi, pi].

    Stable both near the identity and near a half turn.
    """
    if q[0] < 0.0:
        q = -q
    w = q[0]
    v = q[1:]
    vn = np.sqrt(float(np.dot(v, v)))
    if vn < 1e-10:
        # angle ~ 0: log ~ 2 v / w * (1 - vn^2 / (3 w^2))
        return 2.0 * v / w * (1.0 - vn * vn / (3.0 * w * w))
    angle = 2.0 * np.arctan2(vn, w)
    return (angle / vn) * v


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    theta2 = float(np.dot(phi, phi))
    s = skew(phi)
    if theta2 < 1e-12:
        return np.eye(3) - 0.5 * s + s @ s / 6.0
    theta = np.sqrt(theta2)
    return (np.eye(3)
            - (1.0 - np.cos(theta)) / theta2 * s
            + (theta - np.sin(theta)) / (theta2 * theta) * (s @ s))


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta2 = float(np.dot(phi, phi))
    s = skew(phi)
    if theta2 < 1e-12:
        return np.eye(3) + 0.5 * s + s @ s / 12.0
    theta = np.sqrt(theta2)
    coeff = 1.0 / theta2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * s + coeff * (s @ s)


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

class UnitQuaternion:
    """Unit quaternion rotation; q and -q represent the same rotation."""

    __slots__ = ("wxyz",)

    def __init__(self, w: float, x: float, y: float, z: float):
        self.wxyz = quat_normalize(np.array([w, x, y, z], dtype=float))

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls.from_wxyz(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_wxyz(cls, arr: np.ndarray) -> "UnitQuaternion":
        q = cls.__new__(cls)
        q.wxyz = quat_normalize(np.asarray(arr, dtype=float))
        return q

    @classmethod
    def from_axis_angle(cls, axis: np.ndarray, angle: float) -> "UnitQuaternion":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return cls.from_wxyz(so3_exp(axis * angle))

    @classmethod
    def from_rpy(cls, roll: float, pitch: float, yaw: float) -> "UnitQuaternion":
        """Intrinsic z-y-x (yaw, pitch, roll) Euler angles."""
        qz = so3_exp(np.array([0.0, 0.0, yaw]))
        qy = so3_exp(np.array([0.0, pitch, 0.0]))
        qx = so3_exp(np.array([roll, 0.0, 0.0]))
        return cls.from_wxyz(quat_mul(quat_mul(qz, qy), qx))

    @classmethod
    def from_matrix(cls, r: np.ndarray) -> "UnitQuaternion":
        """Quaternion of a rotation matrix, choosing the largest component
        for numerical stability."""
        r = np.asarray(r, dtype=float)
        t = np.trace(r)
        if t > 0:
            s = np.sqrt(t + 1.0) * 2.0
            q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                          (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
        elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
            q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s,
                          (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
        elif r[1, 1] >= r[2, 2]:
            s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
            q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s,
                          0.25 * s, (r[1, 2] + r[2, 1]) / s])
        else:
            s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
            q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                          (r[1, 2] + r[2, 1]) / s, 0.25 * s])
        return cls.from_wxyz(q)

    @classmethod
    def exp(cls, phi: np.ndarray) -> "UnitQuaternion":
        return cls.from_wxyz(so3_exp(np.asarray(phi, dtype=float)))

    def log(self) -> np.ndarray:
        return so3_log(self.wxyz)

    @property
    def w(self) -> float:
        return float(self.wxyz[0])

    @property
    def x(self) -> float:
        return float(self.wxyz[1])

    @property
    def y(self) -> float:
        return float(self.wxyz[2])

    @property
    def z(self) -> float:
        return float(self.wxyz[3])

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        return UnitQuaternion.from_wxyz(quat_mul(self.wxyz, other.wxyz))

    def inverse(self) -> "UnitQuaternion":
        return UnitQuaternion.from_wxyz(quat_conj(self.wxyz))

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return quat_rotate(self.wxyz, np.asarray(v, dtype=float))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.wxyz)

    def boxplus(self, delta: np.ndarray) -> "UnitQuaternion":
        return UnitQuaternion.from_wxyz(
            quat_mul(self.wxyz, so3_exp(np.asarray(delta, dtype=float))))

    def boxminus(self, other: "UnitQuaternion") -> np.ndarray:
        """Tangent vector d such that other ⊞ d == self."""
        return so3_log(quat_mul(quat_conj(other.wxyz), self.wxyz))

    def angle_to(self, other: "UnitQuaternion") -> float:
        return float(np.linalg.norm(self.boxminus(other)))

    def approx_equal(self, other: "UnitQuaternion", tol: float = 1e-9) -> bool:
        # sign-invariant rotational equality
        return self.angle_to(other) <= tol

    def yaw(self) -> float:
        """z-y-x yaw angle of the rotation."""
        w, x, y, z = self.wxyz
        return float(np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z)))

    def __repr__(self) -> str:
        return ("UnitQuaternion(w={:.6f}, x={:.6f}, y={:.6f}, z={:.6f})"
                .format(*self.wxyz))


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: apply(v) = rotation.rotate(v) + translation."""

    rotation: UnitQuaternion = field(default_factory=UnitQuaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.rotation.rotate(v) + self.translation

    def inverse(self) -> "RigidTransform":
        rinv = self.rotation.inverse()
        return RigidTransform(rinv, -rinv.rotate(self.translation))

    def approx_equal(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return (self.rotation.approx_equal(other.rotation, tol)
                and np.linalg.norm(self.translation - other.translation) <= tol)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a ∘ b, so that compose(a, b).apply(x) == a.apply(b.apply(x))."""
    return RigidTransform(a.rotation * b.rotation,
                          a.rotation.rotate(b.translation) + a.translation)


def boxplus(q: UnitQuaternion, delta: np.ndarray) -> UnitQuaternion:
    return q.boxplus(delta)


def boxminus(a: UnitQuaternion, b: UnitQuaternion) -> np.ndarray:
    """Log map of b^-1 ∘ a; boxplus(b, boxminus(a, b)) == a."""
    return a.boxminus(b)
