"""
Per-scan navigation state and its 15-dim error-state retraction
"""
from dataclasses import dataclass, field, replace

import numpy as np

from geometry import RigidTransform, UnitQuaternion, boxminus, boxplus

ERROR_STATE_DIM = 15

# Error-state ordering [δp, δv, δθ, δb_a, δb_ω]
P = slice(0, 3)
V = slice(3, 6)
THETA = slice(6, 9)
BA = slice(9, 12)
BW = slice(12, 15)


def _vector3(value) -> np.ndarray:
    v = np.array(value, dtype=float).reshape(3)
    v.setflags(write=False)
    return v


@dataclass(frozen=True, eq=False)
class State:
    """
    Body state at a scan end time

    p, v are world-frame; q rotates body into world. Position, velocity and
    biases are perturbed additively, rotation on the right.
    """
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: UnitQuaternion = field(default_factory=UnitQuaternion.identity)
    acc_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "p", _vector3(self.p))
        object.__setattr__(self, "v", _vector3(self.v))
        object.__setattr__(self, "acc_bias", _vector3(self.acc_bias))
        object.__setattr__(self, "gyro_bias", _vector3(self.gyro_bias))
        object.__setattr__(self, "t", float(self.t))

    @property
    def rotation(self) -> np.ndarray:
        return self.q.matrix()

    @property
    def pose(self) -> RigidTransform:
        return RigidTransform(self.q, self.p)

    def boxplus(self, dx) -> "State":
        dx = np.asarray(dx, dtype=float)
        return replace(
            self,
            p=self.p + dx[P],
            v=self.v + dx[V],
            q=boxplus(self.q, dx[THETA]),
            acc_bias=self.acc_bias + dx[BA],
            gyro_bias=self.gyro_bias + dx[BW],
        )

    def boxminus(self, other: "State") -> np.ndarray:
        """The δx with other.boxplus(δx) == self"""
        dx = np.zeros(ERROR_STATE_DIM)
        dx[P] = self.p - other.p
        dx[V] = self.v - other.v
        dx[THETA] = boxminus(self.q, other.q)
        dx[BA] = self.acc_bias - other.acc_bias
        dx[BW] = self.gyro_bias - other.gyro_bias
        return dx

    def translated(self, offset) -> "State":
        return replace(self, p=self.p + np.asarray(offset, dtype=float))
