import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from canonslice.liegroup import (
    Twist,
    frechet_mean,
    geodesic_distance,
    geodesic_distances,
    left_jacobian_inv,
    mad_outlier_mask,
    rotation_angle,
    se3_exp,
    se3_log,
    translate_left,
)
from canonslice.se3core import RigidTransform, compose, invert, rotation_z

from .conftest import random_transform

twists = st.lists(st.floats(-1, 1, allow_nan=False), min_size=6, max_size=6)


def _twist_in_ball(rng, max_angle=math.pi - 0.01, trans=30.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return np.concatenate([axis * rng.uniform(0, max_angle), rng.uniform(-trans, trans, 3)])


def _perturbed(rng, center, n, radius=0.1):
    out = []
    for _ in range(n):
        xi = rng.normal(size=6)
        xi *= rng.uniform(0, radius) / np.linalg.norm(xi)
        out.append(compose(center, se3_exp(xi)))
    return out


def _direct_minimizer(xs, start):
    """Nelder-Mead over a local chart around ``start``; independent of the Gauss-Newton code."""

    def cost(p):
        m = compose(start, se3_exp(p))
        return float(np.sum(geodesic_distances(m, xs) ** 2))

    res = minimize(cost, np.zeros(6), method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-16, "maxiter": 40000, "maxfev": 40000})
    return compose(start, se3_exp(res.x))


class TestExpLog:
    def test_identity(self):
        assert np.array_equal(se3_log(RigidTransform.identity()).as_vector(), np.zeros(6))
        m = se3_exp(np.zeros(6))
        assert np.array_equal(m.rotation, np.eye(3)) and np.array_equal(m.translation, np.zeros(3))

    def test_pure_translation(self):
        xi = se3_log(RigidTransform.from_translation([3, 0, 0]))
        assert np.allclose(xi.omega, 0, atol=0) and np.allclose(xi.nu, [3, 0, 0], atol=1e-15)
        t = se3_exp(Twist([0, 0, 0], [1, 2, 3]))
        assert np.allclose(t.translation, [1, 2, 3], atol=1e-15)

    def test_quarter_turn(self):
        xi = se3_log(RigidTransform(rotation_z(math.pi / 2), np.zeros(3)))
        assert np.allclose(xi.omega, [0, 0, math.pi / 2], atol=1e-12)
        assert np.allclose(xi.nu, 0, atol=1e-12)

    def test_half_turn(self):
        t = se3_exp(Twist([0, 0, math.pi], [0, 0, 0]))
        assert np.allclose(t.rotation, rotation_z(math.pi), atol=1e-12)
        xi = se3_log(t)
        assert abs(np.linalg.norm(xi.omega) - math.pi) < 1e-9

    def test_log_principal_branch(self, rng):
        for _ in range(200):
            xi = se3_log(random_transform(rng))
            assert np.linalg.norm(xi.omega) <= math.pi + 1e-12

    def test_matches_scipy_rotvec(self, rng):
        for _ in range(100):
            t = random_transform(rng)
            ref = Rotation.from_matrix(t.rotation).as_rotvec()
            assert np.allclose(se3_log(t).omega, ref, atol=1e-9)

    def test_round_trip_1000(self, rng):
        for _ in range(1000):
            xi = _twist_in_ball(rng)
            back = se3_log(se3_exp(xi)).as_vector()
            assert np.linalg.norm(back - xi) < 1e-9
            t = random_transform(rng)
            t2 = se3_exp(se3_log(t))
            assert np.linalg.norm(t2.rotation - t.rotation) < 1e-9
            assert np.linalg.norm(t2.translation - t.translation) < 1e-9

    @pytest.mark.parametrize("theta", [0.0, 1e-12, 1e-8, 1e-5, 1e-3 * (1 - 1e-9), 1e-3, 2e-3, 0.5, 3.0, math.pi - 1e-7])
    def test_round_trip_across_branches(self, theta):
        axis = np.array([1.0, -2.0, 0.5]) / np.linalg.norm([1.0, -2.0, 0.5])
        xi = np.concatenate([axis * theta, [4.0, -1.0, 2.0]])
        assert np.linalg.norm(se3_log(se3_exp(xi)).as_vector() - xi) < 1e-9

    def test_near_half_turn_log(self, rng):
        for _ in range(50):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            theta = math.pi - rng.uniform(0, 1e-6)
            t = se3_exp(np.concatenate([axis * theta, rng.normal(size=3)]))
            t2 = se3_exp(se3_log(t))
            assert np.linalg.norm(t2.rotation - t.rotation) < 1e-9
            assert np.linalg.norm(t2.translation - t.translation) < 1e-8

    @given(twists)
    def test_exp_is_rigid(self, v):
        t = se3_exp(np.asarray(v) * 3)
        assert t.is_valid()

    def test_inverse_left_jacobian_matches_finite_differences(self, rng):
        for _ in range(10):
            xi = _twist_in_ball(rng, 2.5, 5.0)
            jinv = left_jacobian_inv(xi[None])[0]
            h = 1e-6
            num = np.empty((6, 6))
            for k in range(6):
                d = np.zeros(6)
                d[k] = h
                plus = se3_log(compose(se3_exp(d), se3_exp(xi))).as_vector()
                minus = se3_log(compose(se3_exp(-d), se3_exp(xi))).as_vector()
                num[:, k] = (plus - minus) / (2 * h)
            assert np.allclose(jinv, num, atol=1e-6)


class TestGeodesicDistance:
    def test_self_is_zero(self, rng):
        t = random_transform(rng)
        assert geodesic_distance(t, t) == 0.0

    def test_quarter_turn(self):
        d = geodesic_distance(RigidTransform.identity(), RigidTransform(rotation_z(math.pi / 2), np.zeros(3)))
        assert abs(d - math.pi / 2) < 1e-9

    def test_translation(self):
        assert abs(geodesic_distance(RigidTransform.identity(), RigidTransform.from_translation([3, 4, 0])) - 5) < 1e-9

    def test_weights(self):
        t = RigidTransform(rotation_z(0.5), [3.0, 4.0, 0.0])
        xi = se3_log(t)
        d = geodesic_distance(RigidTransform.identity(), t, 4.0, 0.25)
        assert abs(d - math.sqrt(4 * xi.omega @ xi.omega + 0.25 * xi.nu @ xi.nu)) < 1e-12

    def test_symmetric_and_left_invariant(self, rng):
        for _ in range(200):
            g, x, y = random_transform(rng), random_transform(rng), random_transform(rng)
            d = geodesic_distance(x, y)
            assert abs(d - geodesic_distance(y, x)) < 1e-9
            assert abs(d - geodesic_distance(compose(g, x), compose(g, y))) < 1e-9

    def test_positive_for_distinct(self, rng):
        x = random_transform(rng)
        y = compose(x, RigidTransform.from_translation([1e-6, 0, 0]))
        assert geodesic_distance(x, y) > 0

    def test_batched_matches_single(self, rng):
        x = random_transform(rng)
        ys = [random_transform(rng) for _ in range(30)]
        batch = geodesic_distances(x, ys)
        assert np.allclose(batch, [geodesic_distance(x, y) for y in ys], atol=1e-12)

    def test_rotation_angle(self):
        assert np.allclose(rotation_angle(rotation_z(0.7)), 0.7, atol=1e-12)


class TestFrechetMean:
    def test_empty(self):
        with pytest.raises(ValueError):
            frechet_mean([])

    def test_single(self, rng):
        t = random_transform(rng)
        s = frechet_mean([t])
        assert s.converged and s.variance == 0.0
        assert np.array_equal(s.mean.rotation, t.rotation) and np.array_equal(s.mean.translation, t.translation)

    def test_triplicate_exact_after_one_iteration(self, rng):
        t = random_transform(rng)
        s = frechet_mean([t, t, t])
        assert s.iterations == 1 and s.converged
        assert np.array_equal(s.mean.rotation, t.rotation) and np.array_equal(s.mean.translation, t.translation)

    def test_symmetric_rotations(self):
        th = math.radians(30)
        s = frechet_mean([RigidTransform(rotation_z(th), np.zeros(3)), RigidTransform(rotation_z(-th), np.zeros(3))])
        assert np.linalg.norm(s.mean.rotation - np.eye(3)) < 1e-9
        assert np.linalg.norm(s.mean.translation) < 1e-9
        assert abs(s.variance - th * th) < 1e-9

    def test_matches_direct_minimizer(self, rng):
        for _ in range(3):
            center = random_transform(rng, 20)
            xs = _perturbed(rng, center, 50)
            s = frechet_mean(xs)
            ref = _direct_minimizer(xs, s.mean)
            assert s.converged
            assert geodesic_distance(s.mean, ref) < 1e-4

    def test_pure_rotation_quaternion_oracle(self, rng):
        """Direct minimizer started from the chordal quaternion average of a pure-rotation sample."""
        center = Rotation.from_rotvec(rng.normal(size=3)).as_matrix()
        xs = [RigidTransform(center @ Rotation.from_rotvec(rng.normal(0, 0.2, 3)).as_matrix(), np.zeros(3))
              for _ in range(8)]
        qs = np.array([Rotation.from_matrix(x.rotation).as_quat() for x in xs])
        qs *= np.sign(qs @ qs[0])[:, None]
        chordal = Rotation.from_quat(qs.mean(axis=0))

        def cost(v):
            r = (chordal * Rotation.from_rotvec(v)).as_matrix()
            return float(np.sum(geodesic_distances(RigidTransform(r, np.zeros(3)), xs) ** 2))

        v = np.zeros(3)
        for _ in range(4):  # restarts shake Nelder-Mead out of premature simplex collapse
            v = minimize(cost, v, method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-16, "maxiter": 20000}).x
        ref = RigidTransform((chordal * Rotation.from_rotvec(v)).as_matrix(), np.zeros(3))
        assert geodesic_distance(frechet_mean(xs).mean, ref) < 1e-4

    def test_fixed_point_is_stationary(self, rng):
        xs = _perturbed(rng, random_transform(rng), 30, 0.3)
        s = frechet_mean(xs)
        # the gradient of sum dist^2 vanishes: perturbing the mean cannot lower the cost
        f0 = np.sum(geodesic_distances(s.mean, xs) ** 2)
        for k in range(6):
            for sign in (-1, 1):
                d = np.zeros(6)
                d[k] = sign * 1e-4
                assert np.sum(geodesic_distances(compose(s.mean, se3_exp(d)), xs) ** 2) >= f0 - 1e-12

    def test_variance_definition(self, rng):
        xs = _perturbed(rng, random_transform(rng), 20, 0.5)
        s = frechet_mean(xs, w_rot=2.0, w_trans=0.5)
        assert abs(s.variance - np.mean(geodesic_distances(s.mean, xs, 2.0, 0.5) ** 2)) < 1e-12
        assert s.variance >= 0 and s.step_norm < 1e-10

    def test_left_equivariance(self, rng):
        xs = _perturbed(rng, random_transform(rng), 25, 0.4)
        g = random_transform(rng)
        a = frechet_mean(xs)
        b = frechet_mean(translate_left(g, xs))
        assert geodesic_distance(compose(g, a.mean), b.mean) < 1e-6
        assert abs(a.variance - b.variance) < 1e-9

    def test_barycenter_fixed_point(self, rng):
        xs = _perturbed(rng, random_transform(rng), 30, 0.1)
        s = frechet_mean(xs, method="barycenter")
        mean_log = np.mean([se3_log(compose(invert(s.mean), x)).as_vector() for x in xs], axis=0)
        assert s.converged and np.linalg.norm(mean_log) < 1e-9

    def test_antipodal_not_converged(self):
        xs = [RigidTransform.identity(), RigidTransform(rotation_z(math.pi - 1e-3), np.zeros(3))]
        s = frechet_mean(xs)
        assert not s.converged

    def test_iteration_cap(self, rng):
        xs = _perturbed(rng, random_transform(rng), 10, 1.0)
        s = frechet_mean(xs, max_iter=1, tol=0.0)
        assert not s.converged and s.iterations == 1

    def test_unknown_method(self, rng):
        with pytest.raises(ValueError):
            frechet_mean([random_transform(rng)], method="median")


class TestMad:
    def test_degenerate_mad_flags_differing_value(self):
        assert mad_outlier_mask([1, 1, 1, 1, 100]).tolist() == [False] * 4 + [True]

    def test_constant(self):
        assert not mad_outlier_mask([5, 5, 5, 5, 5]).any()

    def test_single_outlier(self):
        assert mad_outlier_mask([10, 12, 11, 9, 10, 11, 50]).tolist() == [False] * 6 + [True]

    def test_empty(self):
        with pytest.raises(ValueError):
            mad_outlier_mask([])

    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
    def test_median_never_flagged_and_shift_invariant(self, vals):
        x = np.asarray(vals)
        m = mad_outlier_mask(x)
        assert m.sum() <= len(x)
        assert np.array_equal(m, mad_outlier_mask(x + 17.0)) or np.ptp(x) > 1e5
