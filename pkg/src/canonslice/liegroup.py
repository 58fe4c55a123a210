"""SE(3) exponential/logarithm, geodesic distance and sample statistics.

Tangent vectors are ordered ``(omega, nu)``: rotation vector in radians,
then the translational part in mm.  The squared norm used throughout is
``w_rot * |omega|**2 + w_trans * |nu|**2`` so distances are left-invariant.

The batch helpers (``*_batch``) take stacked rotations ``(n, 3, 3)`` and
translations ``(n, 3)`` and are what the statistics run on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .se3core import RigidTransform, compose, invert, stack_transforms

__all__ = [
    "Twist",
    "ManifoldStats",
    "se3_log",
    "se3_exp",
    "geodesic_distance",
    "geodesic_distances",
    "frechet_mean",
    "mad_outlier_mask",
    "left_jacobian_inv",
    "rotation_angle",
]

_SMALL = 1e-3
_NEAR_PI_COS = -1.0 + 1e-6


@dataclass(frozen=True, eq=False)
class Twist:
    omega: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(3))
        object.__setattr__(self, "nu", np.asarray(self.nu, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float)
        return cls(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.nu])

    def norm(self, w_rot: float = 1.0, w_trans: float = 1.0) -> float:
        return math.sqrt(w_rot * self.omega @ self.omega + w_trans * self.nu @ self.nu)


@dataclass(frozen=True)
class ManifoldStats:
    mean: RigidTransform
    variance: float
    n: int
    iterations: int
    converged: bool
    step_norm: float


def _hat_batch(w: np.ndarray) -> np.ndarray:
    k = np.zeros(w.shape[:-1] + (3, 3))
    k[..., 0, 1] = -w[..., 2]
    k[..., 0, 2] = w[..., 1]
    k[..., 1, 0] = w[..., 2]
    k[..., 1, 2] = -w[..., 0]
    k[..., 2, 0] = -w[..., 1]
    k[..., 2, 1] = w[..., 0]
    return k


def _series(theta, full, coeffs):
    """Evaluate ``full(theta)`` with a Taylor fallback below ``_SMALL``."""
    theta = np.asarray(theta, dtype=float)
    small = theta < _SMALL
    t2 = theta * theta
    out = coeffs[0] + t2 * (coeffs[1] + t2 * coeffs[2])
    big = ~small
    if np.any(big):
        out = np.where(big, full(np.where(big, theta, 1.0)), out)
    return out


def _coef_a(t):  # sin t / t
    return _series(t, lambda x: np.sin(x) / x, (1.0, -1 / 6, 1 / 120))


def _coef_b(t):  # (1 - cos t) / t^2
    return _series(t, lambda x: (1 - np.cos(x)) / x**2, (0.5, -1 / 24, 1 / 720))


def _coef_c(t):  # (t - sin t) / t^3
    return _series(t, lambda x: (x - np.sin(x)) / x**3, (1 / 6, -1 / 120, 1 / 5040))


def _coef_vinv(t):  # (1 - t sin t / (2 (1 - cos t))) / t^2
    return _series(
        t,
        lambda x: (1 - x * np.sin(x) / (2 * (1 - np.cos(x)))) / x**2,
        (1 / 12, 1 / 720, 1 / 30240),
    )


def _coef_q2(t):  # (t^2 + 2 cos t - 2) / (2 t^4)
    return _series(t, lambda x: (x**2 + 2 * np.cos(x) - 2) / (2 * x**4), (1 / 24, -1 / 720, 1 / 40320))


def _coef_q3(t):  # (2t - 3 sin t + t cos t) / (2 t^5)
    return _series(
        t,
        lambda x: (2 * x - 3 * np.sin(x) + x * np.cos(x)) / (2 * x**5),
        (1 / 120, -1 / 2520, 1 / 120960),
    )


def so3_log_batch(r: np.ndarray) -> np.ndarray:
    """Principal rotation vectors of rotations ``(..., 3, 3)``."""
    r = np.asarray(r, dtype=float)
    shape = r.shape[:-2]
    r = r.reshape(-1, 3, 3)
    cos = np.clip((np.trace(r, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    w = 0.5 * np.stack(
        [r[:, 2, 1] - r[:, 1, 2], r[:, 0, 2] - r[:, 2, 0], r[:, 1, 0] - r[:, 0, 1]], axis=-1
    )
    theta = np.arctan2(np.linalg.norm(w, axis=-1), cos)
    omega = w / _coef_a(theta)[:, None]
    for i in np.nonzero(cos < _NEAR_PI_COS)[0]:
        # sin(theta) ~ 0: read the axis off the symmetric part (1 - cos) a a^T
        sym = 0.5 * (r[i] + r[i].T) - cos[i] * np.eye(3)
        j = int(np.argmax(np.diag(sym)))
        axis = sym[:, j] / np.linalg.norm(sym[:, j])
        if axis @ w[i] < 0:
            axis = -axis
        omega[i] = theta[i] * axis
    return omega.reshape(shape + (3,))


def _vinv_apply(omega: np.ndarray, t: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega, axis=-1)
    k = _hat_batch(omega)
    kt = np.einsum("...ij,...j->...i", k, t)
    kkt = np.einsum("...ij,...j->...i", k, kt)
    return t - 0.5 * kt + _coef_vinv(theta)[..., None] * kkt


def se3_log_batch(r: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Twists ``(n, 6)`` of stacked transforms."""
    omega = so3_log_batch(r)
    return np.concatenate([omega, _vinv_apply(omega, np.asarray(t, dtype=float))], axis=-1)


def se3_exp_batch(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xi = np.asarray(xi, dtype=float)
    omega, nu = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(omega, axis=-1)
    k = _hat_batch(omega)
    kk = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    a = _coef_a(theta)[..., None, None]
    b = _coef_b(theta)[..., None, None]
    c = _coef_c(theta)[..., None, None]
    r = eye + a * k + b * kk
    v = eye + b * k + c * kk
    return r, np.einsum("...ij,...j->...i", v, nu)


def se3_log(t: RigidTransform) -> Twist:
    return Twist.from_vector(se3_log_batch(t.rotation[None], t.translation[None])[0])


def se3_exp(x: Twist | np.ndarray) -> RigidTransform:
    xi = x.as_vector() if isinstance(x, Twist) else np.asarray(x, dtype=float)
    r, t = se3_exp_batch(xi[None])
    return RigidTransform(r[0], t[0])


def rotation_angle(r: np.ndarray) -> np.ndarray:
    return np.linalg.norm(so3_log_batch(r), axis=-1)


def _weights(w_rot: float, w_trans: float) -> np.ndarray:
    if w_rot <= 0 or w_trans <= 0:
        raise ValueError("metric weights must be positive")
    return np.array([w_rot] * 3 + [w_trans] * 3, dtype=float)


def _relative_twists(m: RigidTransform, rs: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """``log(m^-1 ∘ x_i)`` for stacked x_i."""
    rt = m.rotation.T
    rel_r = rt[None] @ rs
    rel_t = (ts - m.translation) @ rt.T
    return se3_log_batch(rel_r, rel_t)


def geodesic_distances(x: RigidTransform, ys: Sequence[RigidTransform] | tuple, w_rot=1.0, w_trans=1.0):
    """Distances from ``x`` to every element of ``ys``.

    ``ys`` may be a sequence of transforms or a ``(rotations, translations)``
    pair of stacked arrays.
    """
    if isinstance(ys, tuple) and len(ys) == 2 and isinstance(ys[0], np.ndarray):
        rs, ts = ys
    else:
        rs, ts = stack_transforms(ys)
    xi = _relative_twists(x, rs, ts)
    d = np.sqrt(np.einsum("ij,j,ij->i", xi, _weights(w_rot, w_trans), xi))
    # bitwise-equal poses are at distance exactly 0 (R^T R rounds off otherwise)
    same = np.all(rs == x.rotation, axis=(1, 2)) & np.all(ts == x.translation, axis=1)
    d[same] = 0.0
    return d


def geodesic_distance(x: RigidTransform, y: RigidTransform, w_rot: float = 1.0, w_trans: float = 1.0) -> float:
    """Left-invariant distance ``|log(x^-1 ∘ y)|`` under the weighted norm."""
    return float(geodesic_distances(x, [y], w_rot, w_trans)[0])


def left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse left Jacobians ``(n, 6, 6)`` of SE(3) at twists ``(n, 6)``.

    Satisfies ``log(exp(d) ∘ exp(xi)) ≈ xi + J(xi)^-1 d`` for small ``d``.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    omega, nu = xi[:, :3], xi[:, 3:]
    theta = np.linalg.norm(omega, axis=-1)
    p = _hat_batch(omega)
    q = _hat_batch(nu)
    pp = p @ p
    eye = np.broadcast_to(np.eye(3), p.shape)
    jinv = eye - 0.5 * p + _coef_vinv(theta)[:, None, None] * pp
    pq = p @ q
    qp = q @ p
    pqp = pq @ p
    big_q = (
        0.5 * q
        + _coef_c(theta)[:, None, None] * (pq + qp + pqp)
        + _coef_q2(theta)[:, None, None] * (pp @ q + qp @ p - 3.0 * pqp)
        + _coef_q3(theta)[:, None, None] * (pqp @ p + pp @ qp)
    )
    out = np.zeros((xi.shape[0], 6, 6))
    out[:, :3, :3] = jinv
    out[:, 3:, 3:] = jinv
    out[:, 3:, :3] = -jinv @ big_q @ jinv
    return out


def _max_pairwise_angle(rs: np.ndarray) -> float:
    tr = np.einsum("ikl,jkl->ij", rs, rs)
    cos = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos.min()))


def frechet_mean(
    xs: Sequence[RigidTransform],
    tol: float = 1e-10,
    max_iter: int = 100,
    w_rot: float = 1.0,
    w_trans: float = 1.0,
    method: str = "gauss-newton",
    antipodal_margin: float = 1e-2,
) -> ManifoldStats:
    """Riemannian centre of mass of rigid transforms.

    Starting from the first sample, iterate ``m <- m ∘ exp(step)``.  With
    ``method="gauss-newton"`` the step solves the linearized least-squares
    problem for ``sum dist(m, x_i)^2`` using the exact Jacobian of
    ``log(m^-1 ∘ x_i)``, so the fixed point is the minimizer.  With
    ``method="barycenter"`` the step is the plain mean
    ``(1/n) sum log(m^-1 ∘ x_i)``; its fixed point differs from the minimizer
    at second order in the spread.

    Samples whose rotations span nearly a half turn have no well-defined
    mean; they are returned with ``converged=False`` and zero iterations.
    """
    xs = list(xs)
    if not xs:
        raise ValueError("frechet_mean of an empty sample")
    if method not in ("gauss-newton", "barycenter"):
        raise ValueError(f"unknown method {method!r}")
    rs, ts = stack_transforms(xs)
    w = _weights(w_rot, w_trans)
    n = len(xs)
    m = xs[0]

    def variance_at(mean):
        xi = _relative_twists(mean, rs, ts)
        return float(np.einsum("ij,j,ij->", xi, w, xi) / n)

    if n > 1 and _max_pairwise_angle(rs) >= math.pi - antipodal_margin:
        return ManifoldStats(m, variance_at(m), n, 0, False, math.inf)

    step_norm = math.inf
    for it in range(1, max_iter + 1):
        xi = _relative_twists(m, rs, ts)
        if method == "barycenter":
            step = xi.mean(axis=0)
        else:
            a = left_jacobian_inv(xi)
            wa = a * w[None, :, None]
            lhs = np.einsum("nki,nkj->ij", a, wa)
            rhs = np.einsum("nki,nk->i", wa, xi)
            step = np.linalg.solve(lhs, rhs)
        step_norm = float(math.sqrt(step @ (w * step)))
        if step_norm < tol:
            # a sub-tolerance step is dropped so exact inputs give exact means
            return ManifoldStats(m, variance_at(m), n, it, True, step_norm)
        m = compose(m, se3_exp(step))
    return ManifoldStats(m, variance_at(m), n, max_iter, False, step_norm)


def mad_outlier_mask(values, k: float = 1.4826, cutoff: float = 3.0) -> np.ndarray:
    """Flag values more than ``cutoff`` scaled MADs from the median.

    ``MAD = k * median(|x - median(x)|)``.  When the MAD is zero, any value
    that differs from the median at all is flagged.
    """
    x = np.asarray(values, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValueError("mad_outlier_mask needs at least one value")
    med = np.median(x)
    dev = np.abs(x - med)
    mad = k * np.median(dev)
    if mad == 0:
        return dev > 0
    return dev > cutoff * mad


def translate_left(g: RigidTransform, xs: Sequence[RigidTransform]) -> list[RigidTransform]:
    return [compose(g, x) for x in xs]


def relative(x: RigidTransform, y: RigidTransform) -> RigidTransform:
    """``x^-1 ∘ y``."""
    return compose(invert(x), y)
