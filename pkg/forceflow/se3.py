"""Rigid-transform algebra: unit quaternions, poses and force vectors."""

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence

import numpy as np

from forceflow.common import InvalidArgumentError

SLERP_SIN_EPS = 1e-8


@dataclass(frozen=True)
class UnitQuaternion:
    """
    Rotation stored as (w, x, y, z).

    Normalized on construction and canonicalized to w >= 0 so that
    serialized data is reproducible byte-for-byte.
    """
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        comps = [float(self.w), float(self.x), float(self.y), float(self.z)]
        if not all(math.isfinite(c) for c in comps):
            raise InvalidArgumentError(f"non-finite quaternion {comps}")
        norm = math.sqrt(sum(c * c for c in comps))
        if norm < 1e-12:
            raise InvalidArgumentError("zero-norm quaternion")
        comps = [c / norm for c in comps]
        if _needs_flip(comps):
            comps = [-c for c in comps]
        for name, value in zip(('w', 'x', 'y', 'z'), comps):
            object.__setattr__(self, name, value)

    @classmethod
    def identity(cls) -> 'UnitQuaternion':
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], angle: float) -> 'UnitQuaternion':
        a = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(a)
        if n < 1e-12:
            raise InvalidArgumentError("rotation axis must be non-zero")
        a = a / n
        s = math.sin(angle / 2.0)
        return cls(math.cos(angle / 2.0), a[0] * s, a[1] * s, a[2] * s)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> 'UnitQuaternion':
        w, x, y, z = (float(v) for v in values)
        return cls(w, x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def conjugate(self) -> 'UnitQuaternion':
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: 'UnitQuaternion') -> 'UnitQuaternion':
        """Hamilton product self * other."""
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return UnitQuaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ], dtype=np.float64)

    def dot(self, other: 'UnitQuaternion') -> float:
        return self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z

    def pitch(self) -> float:
        """Rotation angle about +y, assuming the rotation axis is y."""
        return 2.0 * math.atan2(self.y, self.w)


def _needs_flip(comps: List[float]) -> bool:
    # w >= 0; on w == 0 the first non-zero vector component is made positive
    for c in comps:
        if c != 0.0:
            return c < 0.0
    return False


def rot_x(angle: float) -> UnitQuaternion:
    return UnitQuaternion.from_axis_angle((1.0, 0.0, 0.0), angle)


def rot_y(angle: float) -> UnitQuaternion:
    return UnitQuaternion.from_axis_angle((0.0, 1.0, 0.0), angle)


def rot_z(angle: float) -> UnitQuaternion:
    return UnitQuaternion.from_axis_angle((0.0, 0.0, 1.0), angle)


@dataclass(frozen=True, eq=False)
class Pose:
    """Position (meters) plus orientation."""
    p: np.ndarray
    q: UnitQuaternion = field(default_factory=UnitQuaternion.identity)

    def __post_init__(self):
        p = np.array(self.p, dtype=np.float64).reshape(-1)
        if p.shape != (3,):
            raise InvalidArgumentError(f"pose position must have 3 components, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InvalidArgumentError("non-finite pose position")
        p.setflags(write=False)
        object.__setattr__(self, 'p', p)

    @classmethod
    def identity(cls) -> 'Pose':
        return cls(np.zeros(3))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> 'Pose':
        """Build from (px, py, pz, qw, qx, qy, qz)."""
        v = np.asarray(values, dtype=np.float64)
        return cls(v[:3], UnitQuaternion.from_array(v[3:7]))

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.p, self.q.as_array()])

    def allclose(self, other: 'Pose', atol: float = 1e-9) -> bool:
        return (np.allclose(self.p, other.p, atol=atol, rtol=0.0)
                and abs(abs(self.q.dot(other.q)) - 1.0) <= atol)

    def __repr__(self):
        p = ", ".join(f"{c:.4f}" for c in self.p)
        return f"Pose(p=[{p}], q=({self.q.w:.4f}, {self.q.x:.4f}, {self.q.y:.4f}, {self.q.z:.4f}))"


@dataclass(frozen=True, eq=False)
class ForceVec:
    """Force in newtons."""
    f: np.ndarray

    def __post_init__(self):
        f = np.array(self.f, dtype=np.float64).reshape(-1)
        if f.shape != (3,):
            raise InvalidArgumentError(f"force must have 3 components, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise InvalidArgumentError("non-finite force")
        f.setflags(write=False)
        object.__setattr__(self, 'f', f)

    @classmethod
    def zero(cls) -> 'ForceVec':
        return cls(np.zeros(3))

    def norm(self) -> float:
        return float(np.linalg.norm(self.f))


def slerp(q0: UnitQuaternion, q1: UnitQuaternion, t: float) -> UnitQuaternion:
    """Geodesic interpolation from q0 (t=0) to q1 (t=1) along the shortest arc."""
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError(f"slerp parameter must lie in [0, 1], got {t}")
    if t == 0.0:
        return q0
    if t == 1.0:
        return q1
    a = q0.as_array()
    b = q1.as_array()
    cos_omega = float(np.dot(a, b))
    if cos_omega < 0.0:
        b = -b
        cos_omega = -cos_omega
    cos_omega = min(cos_omega, 1.0)
    omega = math.acos(cos_omega)
    sin_omega = math.sin(omega)
    if sin_omega < SLERP_SIN_EPS:
        out = (1.0 - t) * a + t * b
    else:
        out = (math.sin((1.0 - t) * omega) * a + math.sin(t * omega) * b) / sin_omega
    return UnitQuaternion.from_array(out)


def rotate_vector(q: UnitQuaternion, v: Sequence[float]) -> np.ndarray:
    """Rotate a 3-vector by q."""
    v = np.asarray(v, dtype=np.float64)
    u = np.array([q.x, q.y, q.z])
    t = 2.0 * np.cross(u, v)
    return v + q.w * t + np.cross(u, t)


def compose(a: Pose, b: Pose) -> Pose:
    """Pose of frame b expressed through frame a (a * b)."""
    return Pose(a.p + rotate_vector(a.q, b.p), a.q * b.q)


def inverse(a: Pose) -> Pose:
    q_inv = a.q.conjugate()
    return Pose(-rotate_vector(q_inv, a.p), q_inv)


def planar_pose(x: float, z: float, theta: float) -> Pose:
    """Pose in the x-z motion plane with rotation theta about +y."""
    return Pose(np.array([x, 0.0, z]), rot_y(theta))


def poses_to_array(poses: Iterable[Pose]) -> np.ndarray:
    """Stack poses into a (T, 7) array of (px, py, pz, qw, qx, qy, qz)."""
    rows = [pose.to_array() for pose in poses]
    if not rows:
        return np.zeros((0, 7))
    return np.stack(rows)


def poses_from_array(values: np.ndarray) -> List[Pose]:
    return [Pose.from_array(row) for row in np.asarray(values, dtype=np.float64)]
