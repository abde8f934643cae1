import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import BSpline

from ctloc.geometry import exp_so3, log_so3, rot_z
from ctloc.spline import (
    UNIFORM_BLENDING,
    UNIFORM_CUMULATIVE,
    KnotBinConfig,
    KnotVector,
    MotionVariation,
    RotationSpline,
    TrajectorySpline,
    TranslationSpline,
    assign_ncp,
    blending_matrix,
    compute_motion_variation,
    cumulative_basis,
    cumulative_matrix,
    evaluate_position,
    evaluate_rotation,
    split_knot_span,
)

from oracles import de_boor, random_knots, two_pass_variance


def random_translation(rng, n=8):
    K = KnotVector(random_knots(rng, n))
    return TranslationSpline(K, rng.uniform(-5, 5, (n, 3)))


def random_rotation(rng, n=8):
    K = KnotVector(random_knots(rng, n, lo=0.2, hi=1.5))
    R = exp_so3(rng.normal(scale=0.8, size=(n, 3)))
    return RotationSpline(K, R)


class TestBlendingMatrix:
    def test_uniform_reproduces_classical_matrix(self):
        K = np.arange(10.0)
        for s in range(3):
            assert np.allclose(blending_matrix(K, s), UNIFORM_BLENDING, atol=1e-14)
        assert np.allclose(cumulative_matrix(UNIFORM_BLENDING), UNIFORM_CUMULATIVE, atol=1e-15)

    def test_uniform_cumulative_endpoints(self):
        K = KnotVector(np.arange(10.0) * 0.5)
        b0 = cumulative_basis(K, 1, K.segment_span(1)[0])
        assert np.allclose(b0.lam, [5 / 6, 1 / 6, 0.0], atol=1e-15)
        b1 = cumulative_basis(K, 1, K.segment_span(1)[1] - 1e-12)
        assert np.allclose(b1.lam, [1.0, 5 / 6, 1 / 6], atol=1e-10)

    def test_matches_scipy_basis(self):
        rng = np.random.default_rng(4)
        K = random_knots(rng, 9)
        kv = KnotVector(K)
        for s in range(kv.n_segments):
            a, b = kv.segment_span(s)
            for t in np.linspace(a, b, 5, endpoint=False):
                _, W = kv.weights(t)
                ref = [BSpline.basis_element(K[s + j:s + j + 5], extrapolate=False)(t) for j in range(4)]
                assert np.allclose(W[0], np.nan_to_num(ref), atol=1e-12)

    def test_zero_span_is_rejected(self):
        K = [0, 1, 2, 3, 3, 4, 5, 6, 7]
        with pytest.raises(ValueError):
            blending_matrix(K, 0)
        kv = KnotVector(K)
        with pytest.raises(ValueError):
            cumulative_basis(kv, 0, 3.0)


class TestCumulativeBasis:
    @settings(max_examples=300, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0, 1, exclude_max=True))
    def test_partition_of_unity_and_monotone(self, seed, frac):
        rng = np.random.default_rng(seed)
        kv = KnotVector(random_knots(rng, 7, lo=0.01, hi=3.0))
        s = int(rng.integers(kv.n_segments))
        a, b = kv.segment_span(s)
        cb = cumulative_basis(kv, s, a + frac * (b - a))
        w = cb.weights()
        assert abs(w.sum() - 1.0) < 1e-12
        assert np.all(w >= -1e-12)
        lam = cb.lam
        assert 1 + 1e-12 >= lam[0] >= lam[1] - 1e-12 and lam[1] >= lam[2] - 1e-12 and lam[2] >= -1e-12

    def test_out_of_segment_rejected(self):
        kv = KnotVector(np.arange(10.0))
        with pytest.raises(ValueError):
            cumulative_basis(kv, 0, 5.0)


class TestTranslation:
    def test_constant_spline(self):
        kv = KnotVector(random_knots(np.random.default_rng(5), 6))
        sp = TranslationSpline(kv, np.tile([1.0, -2.0, 3.0], (6, 1)))
        t = 0.5 * (kv.t_min + kv.t_max)
        assert np.allclose(evaluate_position(sp, t), [1, -2, 3], atol=1e-14)
        assert np.allclose(evaluate_position(sp, t, 1), 0, atol=1e-13)
        assert np.allclose(evaluate_position(sp, t, 2), 0, atol=1e-12)

    def test_linear_motion_reproduced(self):
        v = np.array([0.3, -1.2, 0.05])
        kv = KnotVector(np.arange(12.0) * 0.4)
        greville = np.array([kv.knots[m + 1:m + 4].mean() for m in range(kv.n_control)])
        sp = TranslationSpline(kv, greville[:, None] * v)
        for t in np.linspace(kv.t_min, kv.t_max, 17):
            assert np.allclose(evaluate_position(sp, t, 1), v, atol=1e-9)
            assert np.allclose(evaluate_position(sp, t), v * t, atol=1e-12)

    def test_matches_de_boor_nonuniform(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            sp = random_translation(rng)
            for t in rng.uniform(sp.knots.t_min, sp.knots.t_max, 5):
                ref = de_boor(sp.knots.knots, sp.control_points, t)
                assert np.max(np.abs(evaluate_position(sp, t) - ref)) < 1e-12
                assert np.max(np.abs(sp.evaluate(t) - ref)) < 1e-12

    def test_c2_across_unequal_spans(self):
        rng = np.random.default_rng(7)
        sp = random_translation(rng, 10)
        K = sp.knots
        for s in range(1, K.n_segments):
            tk = K.segment_span(s)[0]
            left_s = s - 1
            for order in range(3):
                lhs = _segment_eval(sp, left_s, tk, order)
                rhs = _segment_eval(sp, s, tk, order)
                assert np.allclose(lhs, rhs, atol=1e-9)

    def test_locality(self):
        rng = np.random.default_rng(8)
        sp = random_translation(rng, 10)
        m = 5
        ts = np.linspace(sp.knots.t_min, sp.knots.t_max, 400)
        before = sp.evaluate(ts)
        sp.control_points[m] += 1.0
        after = sp.evaluate(ts)
        changed = np.any(np.abs(after - before) > 0, axis=1)
        K = sp.knots.knots
        inside = (ts > K[m]) & (ts < K[m + 4])
        assert not np.any(changed & ~inside)

    def test_out_of_support_raises(self):
        sp = random_translation(np.random.default_rng(9))
        with pytest.raises(ValueError):
            sp.evaluate(sp.knots.t_max + 1e-9)
        with pytest.raises(ValueError):
            evaluate_position(sp, sp.knots.t_min - 1e-9)

    def test_derivatives_by_finite_differences(self):
        rng = np.random.default_rng(10)
        h = 1e-5
        for _ in range(30):
            sp = random_translation(rng)
            for t in rng.uniform(sp.knots.t_min + h, sp.knots.t_max - h, 4):
                v = sp.evaluate(t, 1)
                fd = (sp.evaluate(t + h) - sp.evaluate(t - h)) / (2 * h)
                assert np.max(np.abs(v - fd)) < max(1e-6, 1e-6 * np.linalg.norm(v))
                a = sp.evaluate(t, 2)
                fd = (sp.evaluate(t + h, 1) - sp.evaluate(t - h, 1)) / (2 * h)
                assert np.max(np.abs(a - fd)) < max(1e-6, 1e-6 * np.linalg.norm(a))


def _segment_eval(sp, s, t, order):
    a, b = sp.knots.segment_span(s)
    u = (t - a) / (b - a)
    M = sp.knots.matrix(s)
    dt = b - a
    P = [np.array([1, u, u * u, u**3]), np.array([0, 1, 2 * u, 3 * u * u]) / dt, np.array([0, 0, 2, 6 * u]) / dt**2][order]
    return (M @ P) @ sp.control_points[s:s + 4]


class TestRotation:
    def test_identity_controls(self):
        kv = KnotVector(np.arange(10.0))
        sp = RotationSpline(kv, np.tile(np.eye(3), (6, 1, 1)))
        assert np.allclose(evaluate_rotation(sp, 4.2).matrix(), np.eye(3), atol=1e-15)
        assert np.allclose(evaluate_rotation(sp, 4.2, 1), 0, atol=1e-15)

    def test_constant_spin_reproduced(self):
        w0 = 0.9
        dt = 0.3
        kv = KnotVector(np.arange(14.0) * dt)
        greville = np.array([kv.knots[m + 1:m + 4].mean() for m in range(kv.n_control)])
        sp = RotationSpline(kv, rot_z(w0 * greville))
        for t in np.linspace(kv.t_min, kv.t_max, 11):
            assert np.allclose(sp.angular_velocity(t), [0, 0, w0], atol=1e-6)
            assert np.allclose(sp.evaluate(t), rot_z(w0 * t), atol=1e-12)
        t, h = 2.0, 1e-5
        fd = log_so3(sp.evaluate(t - h).T @ sp.evaluate(t + h)) / (2 * h)
        assert np.allclose(fd, [0, 0, w0], atol=1e-6)

    def test_evaluate_returns_unit_rotation(self):
        sp = random_rotation(np.random.default_rng(11))
        R = sp.evaluate(np.linspace(sp.knots.t_min, sp.knots.t_max, 50))
        assert np.allclose(R @ np.swapaxes(R, -1, -2), np.eye(3), atol=1e-12)
        assert np.allclose(np.linalg.det(R), 1.0, atol=1e-12)

    def test_angular_velocity_by_finite_differences(self):
        rng = np.random.default_rng(12)
        h = 1e-5
        for _ in range(30):
            sp = random_rotation(rng)
            for t in rng.uniform(sp.knots.t_min + h, sp.knots.t_max - h, 4):
                w = sp.angular_velocity(t)
                fd = log_so3(sp.evaluate(t - h).T @ sp.evaluate(t + h)) / (2 * h)
                assert np.max(np.abs(w - fd)) < 1e-5

    def test_control_point_jacobian(self):
        rng = np.random.default_rng(13)
        sp = random_rotation(rng)
        ts = rng.uniform(sp.knots.t_min, sp.knots.t_max, 6)
        s, R, J = sp.evaluate_with_jacobian(ts)
        base = sp.control_points.copy()
        h = 1e-6
        for n, t in enumerate(ts):
            for k in range(4):
                m = s[n] + k
                for a in range(3):
                    d = np.zeros(3)
                    d[a] = h
                    cp = base.copy()
                    cp[m] = base[m] @ exp_so3(d)
                    plus = RotationSpline(sp.knots, cp).evaluate(t)
                    cp[m] = base[m] @ exp_so3(-d)
                    minus = RotationSpline(sp.knots, cp).evaluate(t)
                    num = log_so3(minus.T @ plus) / (2 * h)
                    assert np.allclose(J[n, k][:, a], num, atol=1e-6)


class TestKnotExtension:
    def test_extend_matches_fresh_construction(self):
        b = np.array([0.0, 1.0, 1.5, 2.0])
        kv = KnotVector.from_breakpoints(b, pad_after=0.5)
        kv.extend([2.25, 2.5, 3.5], pad_spacing=1.0)
        fresh = KnotVector.from_breakpoints([0.0, 1.0, 1.5, 2.0, 2.25, 2.5, 3.5], pad_before=1.0, pad_after=1.0)
        assert np.array_equal(kv.knots, fresh.knots)
        for s in range(kv.n_segments):
            assert np.allclose(kv.matrix(s), fresh.matrix(s), atol=1e-14)

    def test_extend_keeps_early_segments(self):
        rng = np.random.default_rng(14)
        b = np.cumsum(rng.uniform(0.3, 1.0, 12))
        tr = TrajectorySpline(KnotVector.from_breakpoints(b), rng.normal(size=(14, 3)),
                              exp_so3(rng.normal(size=(14, 3))))
        ts = np.linspace(b[0], b[-6], 40)
        p0, r0 = tr.position(ts), tr.orientation(ts)
        tr.extend([b[-1] + 0.2, b[-1] + 0.9], np.zeros((2, 3)), np.tile(np.eye(3), (2, 1, 1)), 0.4)
        assert np.array_equal(tr.position(ts), p0)
        assert np.allclose(tr.orientation(ts), r0, atol=0)

    def test_rejects_non_increasing(self):
        kv = KnotVector.from_breakpoints([0.0, 1.0])
        with pytest.raises(ValueError):
            kv.extend([1.0])


class TestKnotStrategy:
    bins = KnotBinConfig(rotation_bins=(0.13, 0.20, 0.50, 1.82))

    def test_table_examples(self):
        assert assign_ncp(MotionVariation(0.05, 0.0, (0, 1), 5), self.bins) == 1
        assert assign_ncp(MotionVariation(0.15, 0.0, (0, 1), 5), self.bins) == 3
        assert assign_ncp(MotionVariation(0.0, 0.0, (0, 1), 5), self.bins) == 1

    def test_conflict_takes_max_and_clamps(self):
        assert assign_ncp(MotionVariation(0.07, 0.3, (0, 1), 5), self.bins) == 3
        assert assign_ncp(MotionVariation(5.0, 0.0, (0, 1), 5), self.bins) == 4
        assert assign_ncp(MotionVariation(0.0, 9.0, (0, 1), 5), self.bins) == 4

    def test_unsorted_rotation_bins_warn_and_sort(self):
        with pytest.warns(UserWarning):
            cfg = KnotBinConfig()
        assert cfg.rotation_bins == (0.13, 0.20, 0.50, 1.82)

    def test_sorted_bins_do_not_warn(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            KnotBinConfig(rotation_bins=(0.13, 0.20, 0.50, 1.82))

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 3))
    def test_monotone_in_speed_variation(self, a, b, w):
        lo, hi = sorted((a, b))
        n_lo = assign_ncp(MotionVariation(lo, w, (0, 1), 2), self.bins)
        n_hi = assign_ncp(MotionVariation(hi, w, (0, 1), 2), self.bins)
        assert n_hi >= n_lo

    def test_split_examples(self):
        assert np.allclose(np.diff([0.0] + split_knot_span((0.0, 1.0), 4)), 0.25)
        assert split_knot_span((0.0, 1.0), 1) == [1.0]
        ks = split_knot_span((2.0, 2.35), 3)
        spans = np.diff([2.0] + ks)
        assert np.allclose(spans, 0.35 / 3, atol=1e-15)
        assert abs(spans.sum() - 0.35) < 1e-12
        assert ks[-1] == 2.35

    def test_split_rejects_bad_window(self):
        with pytest.raises(ValueError):
            split_knot_span((1.0, 1.0), 2)

    def test_motion_variation_examples(self):
        mv = compute_motion_variation([(0.1, 0.3, 0.0), (0.2, 0.3, 0.0)], (0.0, 1.0))
        assert mv.delta_v == 0.0 and mv.sample_count == 2
        mv = compute_motion_variation([(0.1, 0.0, 0.0), (0.2, 2.0, 0.0)], (0.0, 1.0))
        assert mv.delta_v == 1.0

    def test_motion_variation_matches_two_pass(self):
        rng = np.random.default_rng(15)
        s = np.column_stack([np.sort(rng.uniform(0, 1, 300)), rng.uniform(0, 0.3, 300), rng.normal(size=300)])
        mv = compute_motion_variation(s, (0.0, 1.0))
        assert abs(mv.delta_v - two_pass_variance(s[:, 1])) < 1e-12
        assert abs(mv.delta_omega - two_pass_variance(s[:, 2])) < 1e-12

    def test_window_is_half_open(self):
        s = [(0.0, 9.0, 9.0), (0.5, 1.0, 0.0), (1.0, 1.0, 0.0)]
        mv = compute_motion_variation(s, (0.0, 1.0))
        assert mv.sample_count == 2 and mv.delta_v == 0.0
        with pytest.raises(ValueError):
            compute_motion_variation(s, (2.0, 3.0))
