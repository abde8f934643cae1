import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctloc.geometry import (
    Pose,
    Rotation,
    exp_map,
    exp_so3,
    hat,
    left_jacobian_inv,
    log_map,
    log_so3,
    right_jacobian,
    right_jacobian_inv,
    validate_monotone,
    vee,
)

finite = st.floats(-10, 10, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


class TestExpLog:
    def test_exp_zero_is_identity(self):
        r = exp_map((0, 0, 0))
        assert r == Rotation.identity()

    def test_quarter_turn_maps_x_to_y(self):
        r = exp_map((0, 0, math.pi / 2))
        assert np.allclose(r.apply([1, 0, 0]), [0, 1, 0], atol=1e-15)

    def test_tiny_angle_matches_arbitrary_precision(self):
        v = np.array([3e-11, -4e-11, 8.660254037844386e-11])
        assert abs(np.linalg.norm(v) - 1e-10) < 1e-20
        r = exp_map(v)
        mpmath.mp.dps = 50
        th = mpmath.sqrt(sum(mpmath.mpf(c) ** 2 for c in v))
        k = mpmath.sin(th / 2) / th
        ref = [mpmath.cos(th / 2)] + [k * mpmath.mpf(c) for c in v]
        assert np.allclose(r.as_quat(), [float(c) for c in ref], rtol=0, atol=1e-17)
        assert np.max(np.abs(log_map(r) - v)) < 1e-15

    def test_log_identity(self):
        assert np.array_equal(log_map(Rotation.identity()), np.zeros(3))

    def test_round_trip_example(self):
        v = np.array([0.1, 0.2, 0.3])
        assert np.allclose(log_map(exp_map(v)), v, atol=1e-12)

    def test_half_turn_about_z(self):
        R = np.diag([-1.0, -1.0, 1.0])
        assert np.allclose(log_map(Rotation.from_matrix(R)), [0, 0, math.pi], atol=1e-15)
        assert np.allclose(log_map(exp_map((0, 0, math.pi))), [0, 0, math.pi], atol=1e-12)

    def test_half_turn_tie_break_picks_positive_leading_axis(self):
        # w == 0 exactly; both signs describe the same rotation
        r = Rotation(0.0, -0.6, 0.8, 0.0)
        out = log_map(r)
        assert out[1] > 0
        assert np.allclose(out, math.pi * np.array([0.6, -0.8, 0.0]) * -1)

    @settings(max_examples=1000, deadline=None)
    @given(vec3)
    def test_round_trip_property(self, v):
        n = np.linalg.norm(v)
        if n == 0:
            return
        v = v / n * (n % (math.pi - 1e-3))
        assert np.linalg.norm(log_map(exp_map(v)) - v) < 1e-10

    def test_commuting_composition(self):
        axis = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
        a, b = 0.7 * axis, -1.9 * axis
        lhs = (exp_map(a) * exp_map(b)).matrix()
        assert np.allclose(lhs, exp_map(a + b).matrix(), atol=1e-12)

    def test_million_compositions_stay_unit(self):
        rng = np.random.default_rng(0)
        steps = [exp_map(v) for v in rng.normal(scale=0.5, size=(1000, 3))]
        r = Rotation.identity()
        worst = 0.0
        for i in range(1_000_000):
            r = r * steps[i % 1000]
            if i % 997 == 0:
                worst = max(worst, abs(r.norm() - 1.0))
        worst = max(worst, abs(r.norm() - 1.0))
        assert worst < 1e-9
        assert abs(np.linalg.det(r.matrix()) - 1.0) < 1e-9


class TestBatchForms:
    def test_matrix_exp_log_match_quaternion_forms(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=(200, 3))
        v *= (rng.uniform(0, math.pi - 1e-3, 200) / np.linalg.norm(v, axis=1))[:, None]
        R = exp_so3(v)
        for vi, Ri in zip(v[:20], R[:20]):
            assert np.allclose(Ri, exp_map(vi).matrix(), atol=1e-13)
        assert np.allclose(log_so3(R), v, atol=1e-10)

    def test_log_so3_near_pi(self):
        v = np.array([0.0, 0.0, math.pi - 1e-9])
        assert np.allclose(log_so3(exp_so3(v)), v, atol=1e-7)

    def test_right_jacobian_finite_difference(self):
        rng = np.random.default_rng(2)
        for phi in rng.normal(size=(20, 3)):
            Jr = right_jacobian(phi)
            h = 1e-6
            num = np.zeros((3, 3))
            R0t = exp_so3(phi).T
            for k in range(3):
                d = np.zeros(3)
                d[k] = h
                num[:, k] = (log_so3(R0t @ exp_so3(phi + d)) - log_so3(R0t @ exp_so3(phi - d))) / (2 * h)
            assert np.allclose(Jr, num, atol=1e-7)
            assert np.allclose(right_jacobian_inv(phi) @ Jr, np.eye(3), atol=1e-10)

    def test_left_jacobian_inverse_relation(self):
        phi = np.array([0.4, -0.2, 1.1])
        # J_l = R J_r, so J_l^-1 = J_r^-1 R^T
        assert np.allclose(left_jacobian_inv(phi), right_jacobian_inv(phi) @ exp_so3(phi).T, atol=1e-12)

    def test_jacobian_series_branch_is_continuous(self):
        a = np.array([0.0, 0.0, 0.999e-3])
        b = np.array([0.0, 0.0, 1.001e-3])
        assert np.allclose(right_jacobian_inv(a), right_jacobian_inv(b), atol=1e-5)


class TestVee:
    def test_zero(self):
        assert np.array_equal(vee(np.zeros((3, 3))), np.zeros(3))

    def test_round_trip(self):
        assert np.allclose(vee(hat([1, 2, 3])), [1, 2, 3])

    def test_symmetric_noise_within_tolerance(self):
        rng = np.random.default_rng(3)
        S = rng.normal(size=(3, 3))
        S = 0.5 * (S + S.T)
        m = hat([1.0, 2.0, 3.0]) + 1e-12 * S
        assert np.allclose(vee(m), [1, 2, 3], atol=1e-11, rtol=0)

    def test_rejects_non_skew(self):
        with pytest.raises(ValueError):
            vee(np.eye(3))


class TestPoseAndTime:
    def test_pose_inverse(self):
        p = Pose(exp_map([0.1, 0.2, 0.3]), [1.0, 2.0, 3.0])
        q = p.compose(p.inverse())
        assert np.allclose(q.translation, 0, atol=1e-12)
        assert np.allclose(q.rotation.matrix(), np.eye(3), atol=1e-12)

    def test_pose_rejects_nan(self):
        with pytest.raises(ValueError):
            Pose(Rotation.identity(), [0.0, float("nan"), 0.0])

    def test_monotone_check_reports_index(self):
        validate_monotone([0.0, 0.0, 1.0])
        with pytest.raises(ValueError, match="index 2"):
            validate_monotone([0.0, 1.0, 0.5])
