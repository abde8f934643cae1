import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctloc.geometry import exp_so3_single, rot_z
from ctloc.metrics import align_trajectories, compute_ape, error_cdf, evaluate_trajectory, match_timestamps

from oracles import horn_align, naive_ape, planar_align


@pytest.fixture
def track():
    rng = np.random.default_rng(4)
    t = np.round(np.arange(0, 20, 0.1), 9)
    p = np.column_stack([np.cos(0.3 * t) * 5, np.sin(0.2 * t) * 3, 0.3 + 0.05 * np.sin(t)])
    return t, p + 0.01 * rng.standard_normal(p.shape)


class TestMatching:
    def test_nearest_within_tolerance(self):
        ie, ir = match_timestamps([0.0, 1.0, 2.004, 3.5], [0.0, 1.009, 2.0, 3.0])
        assert ie.tolist() == [0, 1, 2]
        assert ir.tolist() == [0, 1, 2]

    def test_every_estimate_used_once(self):
        te = np.arange(0, 5, 0.1)
        tr = np.arange(0, 5, 0.01)
        ie, ir = match_timestamps(te, tr)
        assert ie.size == te.size
        assert np.abs(tr[ir] - te).max() < 1e-9

    def test_too_few(self):
        with pytest.raises(ValueError, match="at least 3"):
            align_trajectories([0, 1], np.zeros((2, 3)), [0, 1], np.zeros((2, 3)))


class TestAlignment:
    def test_identity(self, track):
        t, p = track
        al = align_trajectories(t, p, t, p, "se3")
        assert np.allclose(al.transform.R, np.eye(3), atol=1e-12)
        assert np.allclose(al.transform.t, 0.0, atol=1e-12)
        assert compute_ape(al.estimate, al.truth).rmse < 1e-12

    def test_translation(self, track):
        t, p = track
        al = align_trajectories(t, p + [1.0, 0.0, 0.0], t, p, "se2")
        assert np.allclose(al.transform.t, [-1.0, 0.0, 0.0], atol=1e-12)
        assert compute_ape(al.estimate, al.truth).rmse < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_random_rigid_se3(self, seed):
        rng = np.random.default_rng(seed)
        truth = rng.normal(size=(40, 3)) * [5, 5, 1]
        R = exp_so3_single(rng.normal(size=3))
        tr = rng.normal(size=3) * 3
        est = (truth - tr) @ R          # truth = R est + tr
        al = align_trajectories(np.arange(40.0), est, np.arange(40.0), truth, "se3")
        assert np.abs(al.transform.R - R).max() < 1e-9
        assert np.abs(al.transform.t - tr).max() < 1e-9
        Rh, th = horn_align(est, truth)
        assert np.abs(Rh - R).max() < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_random_rigid_se2_matches_closed_form(self, seed):
        rng = np.random.default_rng(seed)
        est = rng.normal(size=(30, 3))
        truth = est @ rot_z(rng.uniform(-3, 3)).T + [*rng.normal(size=2), 0.0] + 0.05 * rng.normal(size=(30, 3))
        al = align_trajectories(np.arange(30.0), est, np.arange(30.0), truth, "se2")
        R2, t2 = planar_align(est, truth)
        assert np.abs(al.transform.R[:2, :2] - R2).max() < 1e-9
        assert np.abs(al.transform.t[:2] - t2).max() < 1e-9
        assert al.transform.R[2, 2] == 1.0 and al.transform.t[2] == 0.0

    def test_reflection_excluded(self, track):
        _, p = track
        mirrored = p * [1, -1, 1]
        al = align_trajectories(np.arange(len(p)), mirrored, np.arange(len(p)), p, "se2")
        assert np.linalg.det(al.transform.R) > 0

    def test_unknown_mode(self, track):
        t, p = track
        with pytest.raises(ValueError):
            align_trajectories(t, p, t, p, "sim3")


class TestApe:
    def test_identical(self, track):
        _, p = track
        rep = compute_ape(p, p)
        assert rep.rmse == 0.0
        assert rep.cdf == [(0.0, 1.0)]

    def test_constant_offset_unaligned(self, track):
        t, p = track
        rep, _ = evaluate_trajectory(t, p + [0.3, 0.4, 0.0], t, p, "none")
        assert rep.rmse == pytest.approx(0.5, abs=1e-12)
        assert rep.median == pytest.approx(0.5, abs=1e-12)

    def test_mixed(self):
        rep = compute_ape([[0.3, 0, 0], [0, 0.4, 0]], np.zeros((2, 3)))
        assert rep.rmse == pytest.approx(math.sqrt(0.125), abs=1e-15)
        assert rep.mean == pytest.approx(0.35)
        assert rep.max == pytest.approx(0.4)

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_ape(np.zeros((0, 3)), np.zeros((0, 3)))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 60))
    def test_matches_naive(self, seed, n):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        rep = compute_ape(a, b)
        ref = naive_ape(a.tolist(), b.tolist())
        assert np.allclose([rep.rmse, rep.mean, rep.median, rep.max], ref, rtol=0, atol=1e-12)
        assert rep.rmse >= rep.mean - 1e-15

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 3.0), min_size=1, max_size=80))
    def test_cdf_properties(self, errs):
        cdf = error_cdf(errs)
        g = np.array([c[0] for c in cdf])
        f = np.array([c[1] for c in cdf])
        assert np.all(np.diff(f) >= 0)
        assert f[-1] == 1.0
        assert np.allclose(np.diff(g), 0.01) if g.size > 1 else g[0] == 0.0
        # fraction at each grid point counts errors at or below it
        e = np.array(errs)
        assert np.allclose(f[:-1], [(e <= x + 1e-12).mean() for x in g[:-1]])

    def test_csv_and_json(self):
        rep = compute_ape([[0.3, 0, 0], [0, 0.4, 0]], np.zeros((2, 3)), t=[1.0, 2.0])
        assert rep.errors_csv().splitlines()[1] == "1.000000000,0.300000000"
        assert rep.cdf_csv().splitlines()[-1].endswith("1.000000000")
        assert '"rmse"' in rep.to_json()
