"""
Rotation and rigid-transform algebra for the odometry engine

Conventions used everywhere in the package:
- Hamilton quaternions, stored (w, x, y, z), canonical sign w >= 0
- q_b^w rotates body vectors into the world frame: v_w = R(q) v_b
- Rotations are perturbed on the right: q <- q ⊗ Exp(δθ)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Below this angle exp/log switch to their Taylor series
SMALL_ANGLE = 1e-8

# The SO(3) right Jacobian loses precision earlier than exp/log
_JACOBIAN_SMALL_ANGLE = 1e-5


def skew(v) -> np.ndarray:
    """The "hat" operator: skew(v) @ u == np.cross(v, u)"""
    x, y, z = v
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def omega_matrix(omega) -> np.ndarray:
    """
    4x4 rate matrix with blocks [[-ω^, ω], [-ωᵀ, 0]]

    It acts on the scalar-last component vector (x, y, z, w):
    ½ Ω(ω) q equals the components of q ⊗ [0, ω/2].
    """
    w = np.asarray(omega, dtype=float)
    out = np.zeros((4, 4))
    out[:3, :3] = -skew(w)
    out[:3, 3] = w
    out[3, :3] = -w
    return out


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion, normalized and sign-canonicalized on construction"""
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        norm = math.sqrt(self.w ** 2 + self.x ** 2 + self.y ** 2 + self.z ** 2)
        if norm == 0.0 or not math.isfinite(norm):
            raise ValueError(f"Cannot build a unit quaternion from norm {norm}")
        scale = 1.0 / norm
        if self.w < 0.0:
            scale = -scale
        object.__setattr__(self, "w", float(self.w * scale))
        object.__setattr__(self, "x", float(self.x * scale))
        object.__setattr__(self, "y", float(self.y * scale))
        object.__setattr__(self, "z", float(self.z * scale))

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_wxyz(cls, values) -> "UnitQuaternion":
        w, x, y, z = (float(v) for v in values)
        return cls(w, x, y, z)

    @classmethod
    def from_xyzw(cls, values) -> "UnitQuaternion":
        x, y, z, w = (float(v) for v in values)
        return cls(w, x, y, z)

    @classmethod
    def from_rotation_vector(cls, rotation_vector) -> "UnitQuaternion":
        return exp_map(rotation_vector)

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def wxyz(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @property
    def xyzw(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w])

    def conjugate(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def inverse(self) -> "UnitQuaternion":
        return self.conjugate()

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        return quat_multiply(self, other)

    def matrix(self) -> np.ndarray:
        """Rotation matrix R(q)"""
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ])

    def rotate(self, v) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=float)

    def log(self) -> np.ndarray:
        return log_map(self)

    @property
    def angle(self) -> float:
        """Rotation angle in [0, π]"""
        return 2.0 * math.atan2(float(np.linalg.norm(self.vec)), self.w)


def quat_multiply(a: UnitQuaternion, b: UnitQuaternion) -> UnitQuaternion:
    """Hamilton product a ⊗ b, so that R(a ⊗ b) = R(a) R(b)"""
    return UnitQuaternion(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )


def exp_map(rotation_vector) -> UnitQuaternion:
    """Exp: rotation vector (rad) -> unit quaternion"""
    phi = np.asarray(rotation_vector, dtype=float)
    theta = float(np.linalg.norm(phi))
    if theta < SMALL_ANGLE:
        w = 1.0 - theta * theta / 8.0
        v = (0.5 - theta * theta / 48.0) * phi
    else:
        w = math.cos(0.5 * theta)
        v = (math.sin(0.5 * theta) / theta) * phi
    return UnitQuaternion(w, v[0], v[1], v[2])


def log_map(q: UnitQuaternion) -> np.ndarray:
    """Log: unit quaternion -> rotation vector with norm in [0, π]"""
    v = q.vec
    n = float(np.linalg.norm(v))
    if n < SMALL_ANGLE:
        return (2.0 / q.w) * (1.0 - n * n / (3.0 * q.w * q.w)) * v
    theta = 2.0 * math.atan2(n, q.w)
    return (theta / n) * v


def boxplus(q: UnitQuaternion, delta_theta) -> UnitQuaternion:
    """Right perturbation q ⊗ Exp(δθ)"""
    return q * exp_map(delta_theta)


def boxminus(a: UnitQuaternion, b: UnitQuaternion) -> np.ndarray:
    """Log(b⁻¹ ⊗ a), the inverse of boxplus on ‖δθ‖ < π"""
    return log_map(b.conjugate() * a)


def right_jacobian(phi) -> np.ndarray:
    """SO(3) right Jacobian: Exp(φ + δ) ≈ Exp(φ) Exp(J_r(φ) δ)"""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < _JACOBIAN_SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    theta2 = theta * theta
    return (
        np.eye(3)
        - ((1.0 - math.cos(theta)) / theta2) * k
        + ((theta - math.sin(theta)) / (theta2 * theta)) * (k @ k)
    )


def quat_slerp(a: UnitQuaternion, b: UnitQuaternion, mu: float) -> UnitQuaternion:
    """
    Spherical interpolation from a (mu=0) to b (mu=1)

    The relative quaternion a⁻¹ ⊗ b is canonicalized to w >= 0, which is the
    sign flip of b whenever dot(a, b) < 0, so the short arc is always taken.
    """
    relative = a.conjugate() * b
    return a * exp_map(mu * log_map(relative))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation plus translation (meters), acting as x -> R x + t"""
    rotation: UnitQuaternion = field(default_factory=UnitQuaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_rotation_vector(cls, rotation_vector, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(exp_map(rotation_vector), np.asarray(translation, dtype=float))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply other first"""
        return RigidTransform(
            self.rotation * other.rotation,
            self.rotation.rotate(other.translation) + self.translation,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        inv_rotation = self.rotation.conjugate()
        return RigidTransform(inv_rotation, -inv_rotation.rotate(self.translation))

    def apply(self, points) -> np.ndarray:
        """Transform a single 3-vector or an (N, 3) array"""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.matrix().T + self.translation

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation.matrix()
        out[:3, 3] = self.translation
        return out

    @property
    def angle(self) -> float:
        return self.rotation.angle


def slerp(a: RigidTransform, b: RigidTransform, mu: float) -> RigidTransform:
    """Slerp on the rotation, linear interpolation on the translation"""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"Interpolation factor must lie in [0, 1], got {mu}")
    return RigidTransform(
        quat_slerp(a.rotation, b.rotation, mu),
        (1.0 - mu) * a.translation + mu * b.translation,
    )
