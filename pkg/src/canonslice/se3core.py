"""Rigid transforms and the three pose-label encodings used for slices.

A :class:`RigidTransform` maps slice-frame coordinates (mm) into the canonical
volume frame: ``x_world = R @ x_slice + t``.  The identity places the slice
flat on the x-y plane through the volume centre.

Euler angles use the extrinsic X, then Y, then Z convention, i.e.
``R = Rz(rz) @ Ry(ry) @ Rx(rx)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

__all__ = [
    "RigidTransform",
    "EulerCartesian",
    "QuaternionCartesian",
    "AnchorPoints",
    "DegenerateAnchorsError",
    "hat",
    "rotation_x",
    "rotation_y",
    "rotation_z",
    "rotation_from_euler",
    "euler_from_rotation",
    "rotation_from_quaternion",
    "quaternion_from_rotation",
    "canonical_quaternion",
    "rotation_between_vectors",
    "anchor_points_from_transform",
    "transform_from_anchor_points",
    "compose",
    "invert",
]

ORTHO_TOL = 1e-9


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3); rotation is 3x3 orthonormal, translation in mm."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform has non-finite entries")
        if np.linalg.norm(r.T @ r - np.eye(3)) > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Map points of shape (..., 3) from the slice frame to world."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        r = self.rotation
        return (
            np.linalg.norm(r.T @ r - np.eye(3)) <= tol
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def to_euler(self) -> "EulerCartesian":
        return EulerCartesian.from_transform(self)

    def to_quaternion(self) -> "QuaternionCartesian":
        return QuaternionCartesian.from_transform(self)

    def __repr__(self):
        e = self.to_euler()
        return (
            f"RigidTransform(rx={e.rx:.6g}, ry={e.ry:.6g}, rz={e.rz:.6g}, "
            f"t=({e.tx:.6g}, {e.ty:.6g}, {e.tz:.6g}))"
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def rotation_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_euler(rx: float, ry: float, rz: float) -> np.ndarray:
    """Extrinsic XYZ rotation ``Rz @ Ry @ Rx``."""
    return rotation_z(rz) @ rotation_y(ry) @ rotation_x(rx)


def _wrap(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    return math.pi if a == -math.pi else a


def euler_from_rotation(r) -> tuple[float, float, float]:
    """Inverse of :func:`rotation_from_euler`.

    At gimbal lock (``|ry| = pi/2``) the split between rx and rz is not
    unique; rx is set to 0 and the combined angle goes into rz.
    """
    r = np.asarray(r, dtype=float)
    cy = math.hypot(r[0, 0], r[1, 0])
    ry = math.atan2(-r[2, 0], cy)
    if cy > 1e-12:
        rx = math.atan2(r[2, 1], r[2, 2])
        rz = math.atan2(r[1, 0], r[0, 0])
    else:
        rx = 0.0
        rz = math.atan2(-r[0, 1], r[1, 1])
    return _wrap(rx), _wrap(ry), _wrap(rz)


def canonical_quaternion(q) -> np.ndarray:
    """Pick the representative of ``{q, -q}`` with ``qw >= 0``.

    When ``qw == 0`` the first nonzero vector component is made positive.
    """
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    for c in q:
        if c > 0:
            return q
        if c < 0:
            return -q
    return q


def rotation_from_quaternion(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quaternion_from_rotation(r) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix, hemisphere ``qw >= 0``."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    # Shepperd: branch on the largest of w, x, y, z to avoid cancellation.
    k = int(np.argmax([tr, r[0, 0], r[1, 1], r[2, 2]]))
    if k == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif k == 1:
        s = 2.0 * math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    return canonical_quaternion(q)


@dataclass(frozen=True)
class EulerCartesian:
    rx: float
    ry: float
    rz: float
    tx: float
    ty: float
    tz: float

    @classmethod
    def from_transform(cls, t: RigidTransform) -> "EulerCartesian":
        rx, ry, rz = euler_from_rotation(t.rotation)
        tx, ty, tz = (float(v) for v in t.translation)
        return cls(rx, ry, rz, tx, ty, tz)

    def to_transform(self) -> RigidTransform:
        return RigidTransform(
            rotation_from_euler(self.rx, self.ry, self.rz), [self.tx, self.ty, self.tz]
        )

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("rx", "ry", "rz", "tx", "ty", "tz")}


@dataclass(frozen=True)
class QuaternionCartesian:
    qw: float
    qx: float
    qy: float
    qz: float
    tx: float
    ty: float
    tz: float

    @classmethod
    def from_transform(cls, t: RigidTransform) -> "QuaternionCartesian":
        q = quaternion_from_rotation(t.rotation)
        return cls(*(float(v) for v in q), *(float(v) for v in t.translation))

    @property
    def quaternion(self) -> np.ndarray:
        return np.array([self.qw, self.qx, self.qy, self.qz])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    def to_transform(self) -> RigidTransform:
        return RigidTransform(rotation_from_quaternion(self.quaternion), self.translation)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("qw", "qx", "qy", "qz", "tx", "ty", "tz")}


class DegenerateAnchorsError(ValueError):
    """Anchor points that cannot define a slice frame.

    ``invariant`` is ``"coincident"`` or ``"collinear"``.
    """

    def __init__(self, invariant: str, message: str):
        super().__init__(message)
        self.invariant = invariant


@dataclass(frozen=True, eq=False)
class AnchorPoints:
    """Ordered triple of points encoding a slice pose.

    On the identity plane ``p1 = (-l, -l, 0)``, ``p2 = (0, 0, 0)`` and
    ``p3 = (l, -l, 0)``; ``p2`` is the slice centre.
    """

    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray

    def __post_init__(self):
        for name in ("p1", "p2", "p3"):
            p = _frozen(getattr(self, name)).reshape(-1)
            if p.shape != (3,):
                raise ValueError(f"{name} must be a 3-vector")
            object.__setattr__(self, name, p)

    def as_array(self) -> np.ndarray:
        return np.stack([self.p1, self.p2, self.p3])

    @classmethod
    def from_array(cls, a) -> "AnchorPoints":
        a = np.asarray(a, dtype=float).reshape(3, 3)
        return cls(a[0], a[1], a[2])

    def to_transform(self, l: float | None = None) -> RigidTransform:
        return transform_from_anchor_points(self, l)

    def as_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in ("p1", "p2", "p3")}


def identity_anchor_points(l: float) -> np.ndarray:
    return np.array([[-l, -l, 0.0], [0.0, 0.0, 0.0], [l, -l, 0.0]])


def anchor_points_from_transform(t: RigidTransform, l: float) -> AnchorPoints:
    if l <= 0:
        raise ValueError("anchor scale l must be positive")
    return AnchorPoints.from_array(t.apply(identity_anchor_points(l)))


def transform_from_anchor_points(a: AnchorPoints, l: float | None = None) -> RigidTransform:
    """Recover the slice pose from (possibly noisy) anchor points.

    Translation is ``p2``.  The frame is X along ``p3 - p1``, Z along the
    plane normal ``(p3 - p1) x (p2 - p1)``, and Y completing it, so the
    result is orthonormal even when the triangle is distorted.

    ``l`` sets the degeneracy tolerances (``1e-6 l`` for coincident points,
    ``1e-6 l**2`` for collinear ones); by default it is estimated as half the
    longest side, which is exact for noiseless labels.
    """
    p1, p2, p3 = a.p1, a.p2, a.p3
    d12 = np.linalg.norm(p2 - p1)
    d23 = np.linalg.norm(p3 - p2)
    d13 = np.linalg.norm(p3 - p1)
    if l is None:
        l = max(d12, d23, d13) / 2.0
    eps_coincide = 1e-6 * l
    pairs = {"p1-p2": d12, "p2-p3": d23, "p1-p3": d13}
    worst = min(pairs, key=pairs.get)
    if l <= 0 or pairs[worst] <= eps_coincide:
        raise DegenerateAnchorsError(
            "coincident", f"anchor points {worst} coincide (distance {pairs[worst]:.3g})"
        )
    v1 = p3 - p1
    v2 = p2 - p1
    n1 = np.cross(v1, v2)
    area = np.linalg.norm(n1)
    if area <= 1e-6 * l * l:
        raise DegenerateAnchorsError(
            "collinear", f"anchor points are collinear (|v1 x v2| = {area:.3g})"
        )
    x = v1 / np.linalg.norm(v1)
    z = n1 / area
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), p2)


def rotation_between_vectors(a, b) -> np.ndarray:
    """Minimal rotation taking the direction of ``a`` onto that of ``b``.

    For antiparallel inputs the half-turn axis is the larger of
    ``a x (1,0,0)`` and ``a x (0,1,0)`` (first one on ties).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("vectors must be nonzero")
    a = a / na
    b = b / nb
    v = np.cross(a, b)
    s = np.linalg.norm(v)
    c = float(np.dot(a, b))
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        ca = np.cross(a, [1.0, 0.0, 0.0])
        cb = np.cross(a, [0.0, 1.0, 0.0])
        axis = ca if np.linalg.norm(ca) >= np.linalg.norm(cb) else cb
        axis = axis / np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    k = v / s
    # Re-orthogonalize against a: near-antiparallel axes are ill-conditioned.
    k = k - np.dot(k, a) * a
    k = hat(k / np.linalg.norm(k))
    theta = math.atan2(s, c)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via a uniform unit quaternion."""
    q = rng.normal(size=4)
    return rotation_from_quaternion(q)


def stack_transforms(ts: Iterable[RigidTransform]) -> tuple[np.ndarray, np.ndarray]:
    """Rotations (n, 3, 3) and translations (n, 3) of a sequence of transforms."""
    ts = list(ts)
    if not ts:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    return np.stack([t.rotation for t in ts]), np.stack([t.translation for t in ts])
