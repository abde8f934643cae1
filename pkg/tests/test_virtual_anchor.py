import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctloc.ekf import FilterState, PlanarConstraint, run_filter
from ctloc.geometry import Rotation, rot_z
from ctloc.preprocessing import AnchorMap
from ctloc.simulator import MotionProfile, SceneConfig, SensorNoiseConfig, generate_ground_truth, synthesize_sensors
from ctloc.virtual_anchor import (
    VAParams,
    VirtualAnchor,
    WaypointRangeSet,
    accumulate_fim,
    build_context,
    collinearity_determinant,
    derive_va_position,
    hypothesis_circle,
    hypothesis_costs,
    range_residual,
    refine_hypotheses,
    va_pipeline,
)

coord = st.floats(-20, 20, allow_nan=False)


class TestElementary:
    def test_range_residual(self):
        assert range_residual((0, 0, 0), (3, 4, 0), 5.0) == 0.0
        assert range_residual((1, 1, 1), (1, 1, 1), 0.0) == 0.0
        assert range_residual((1, 0, 0), (0, 0, 0), 2.0) == 1.0

    def test_derive_position(self):
        assert np.allclose(derive_va_position((5, 0, 0), (np.eye(3), (1, 0, 0))), (4, 0, 0))
        assert np.allclose(derive_va_position((5, 0, 0), (np.eye(3), (0, 0, 0))), (5, 0, 0))
        assert np.allclose(derive_va_position((5, 0, 0), (rot_z(math.pi), (1, 0, 0))), (6, 0, 0), atol=1e-15)
        assert np.allclose(derive_va_position((5, 0, 0), (math.pi, (1, 0, 0))), (6, 0, 0), atol=1e-15)

    def test_collinearity(self):
        assert collinearity_determinant((0, 0), (1, 1), (2, 2)) == 0.0
        assert collinearity_determinant((0, 0), (1, 0), (0, 1)) == 1.0

    @given(*(coord,) * 6)
    @settings(max_examples=300, deadline=None)
    def test_collinearity_permutation(self, a, b, c, d, e, f):
        p = [(a, b), (c, d), (e, f)]
        D = abs(collinearity_determinant(*p))
        oracle = abs(np.linalg.det(np.column_stack([np.array(p), np.ones(3)])))
        assert D == pytest.approx(oracle, rel=1e-9, abs=1e-9)
        for perm in ((1, 0, 2), (2, 1, 0), (0, 2, 1), (1, 2, 0)):
            assert abs(collinearity_determinant(*(p[i] for i in perm))) == pytest.approx(D, rel=1e-12, abs=1e-9)

    def test_va_immutable(self):
        v = VirtualAnchor(np.zeros(3), "A", 30.0, 0.0, 5, 1.0, 0.0, 0.1)
        with pytest.raises(ValueError):
            v.position[0] = 1.0


class TestFim:
    def test_single_waypoint_rank_one(self):
        F, det = accumulate_fim(WaypointRangeSet([[1.0, 0.0, 0.0]], [1.0], 1.0), np.zeros(3))
        assert np.linalg.matrix_rank(F) == 1 and det == 0.0

    def test_orthogonal_bearings(self):
        F, det = accumulate_fim(WaypointRangeSet([[2.0, 0.0, 0.0], [0.0, 3.0, 0.0]], [2.0, 3.0], 1.0), np.zeros(3))
        assert np.allclose(F, np.eye(2)) and det == pytest.approx(1.0)

    def test_parallel_bearings(self):
        ws = WaypointRangeSet([[1.0, 1.0, 0.0], [2.0, 2.0, 0.0], [5.0, 5.0, 0.0]], [1, 2, 3], 1.0)
        assert accumulate_fim(ws, np.zeros(3))[1] == pytest.approx(0.0, abs=1e-12)

    def test_coincident_waypoint(self):
        with pytest.raises(ValueError):
            accumulate_fim(WaypointRangeSet([[0.0, 0.0, 0.0]], [1.0]), np.zeros(3))

    @given(st.lists(st.tuples(coord, coord), min_size=2, max_size=10), st.floats(-math.pi, math.pi))
    @settings(max_examples=300, deadline=None)
    def test_rotation_invariance(self, pts, ang):
        P = np.array(pts)
        c = np.array([0.3, -0.7])
        if np.any(np.linalg.norm(P - c, axis=1) < 1e-3):
            return
        ws = WaypointRangeSet(P, np.ones(len(P)), 0.5)
        Rr = rot_z(ang)[:2, :2]
        ws_r = WaypointRangeSet((P - c) @ Rr.T + c, np.ones(len(P)), 0.5)
        d0 = accumulate_fim(ws, c)[1]
        assert accumulate_fim(ws_r, c)[1] == pytest.approx(d0, rel=1e-8, abs=1e-8)

    @given(st.lists(st.tuples(coord, coord), min_size=1, max_size=8), st.tuples(coord, coord))
    @settings(max_examples=300, deadline=None)
    def test_adding_waypoint_never_decreases(self, pts, extra):
        P = np.array(pts)
        if np.any(np.linalg.norm(np.vstack([P, extra]), axis=1) < 1e-3):
            return
        d0 = accumulate_fim(WaypointRangeSet(P, np.ones(len(P)), 1.0), np.zeros(2))[1]
        d1 = accumulate_fim(WaypointRangeSet(np.vstack([P, extra]), np.ones(len(P) + 1), 1.0), np.zeros(2))[1]
        assert d1 >= d0 - 1e-9 * max(1.0, d0)


class TestHypotheses:
    def test_exact_member_selected(self):
        center = np.array([1.0, 2.0, 0.3])
        truth = hypothesis_circle(center, 4.0, 36, 1.2)[7]
        W = np.array([center, [3.0, -1.0, 0.3], [-2.0, 0.5, 0.3], [0.0, 6.0, 0.3]])
        r = np.linalg.norm(W - truth, axis=1)
        pos, k, costs = refine_hypotheses(truth + [0.3, 0.2, 0.0], WaypointRangeSet(W, r), 36)
        assert k == 7 and costs[k] == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(pos, truth)

    def test_tie_break_lowest_index(self):
        ws = WaypointRangeSet([[0.0, 0.0, 0.0]], [1.0])
        _, k, costs = refine_hypotheses(np.array([0.0, 1.0, 0.0]), ws, 4)
        assert np.allclose(costs, 0.0) and k == 0

    def test_errors(self):
        with pytest.raises(ValueError):
            refine_hypotheses(np.zeros(3), WaypointRangeSet(np.zeros((0, 3)), []), 36)
        with pytest.raises(ValueError):
            refine_hypotheses(np.zeros(3), WaypointRangeSet([[1, 0, 0]], [1.0]), 2)

    def test_within_grid_resolution(self):
        # brute force over the circle against a noise-free configuration
        rng = np.random.default_rng(11)
        for _ in range(50):
            center = np.r_[rng.uniform(-5, 5, 2), 0.3]
            va = np.r_[center[:2] + rng.uniform(-6, 6, 2), 1.2]
            W = np.vstack([center, np.column_stack([rng.uniform(-8, 8, (6, 2)), np.full(6, 0.3)])])
            r = np.linalg.norm(W - va, axis=1)
            pos, k, costs = refine_hypotheses(va, WaypointRangeSet(W, r), 36)
            rho = np.linalg.norm(va[:2] - center[:2])
            assert np.linalg.norm(pos[:2] - va[:2]) <= (2 * math.pi / 36) * rho + 1e-9
            assert costs[k] == costs.min()

    @given(st.integers(3, 72), st.floats(0.5, 10.0), st.floats(-math.pi, math.pi))
    @settings(max_examples=200, deadline=None)
    def test_output_cost_not_above_base_candidate(self, h, rad, ang):
        center = np.array([0.0, 0.0, 0.3])
        base = np.array([rad * math.cos(ang), rad * math.sin(ang), 0.3])
        W = np.array([center, [1.0, 2.0, 0.3], [-3.0, 1.0, 0.3]])
        ws = WaypointRangeSet(W, np.linalg.norm(W - base, axis=1) + [0.0, 0.05, -0.02])
        pos, k, costs = refine_hypotheses(base, ws, h)
        cand = hypothesis_circle(center, rad, h, 0.3)
        nearest = int(np.argmin(np.linalg.norm(cand - base, axis=1)))
        assert costs[k] <= hypothesis_costs(cand[nearest:nearest + 1], ws)[0] + 1e-12

    def test_avoid_collinear(self):
        ws = WaypointRangeSet([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], [2.0, 2.236068, 2.828427])
        base = np.array([0.0, 2.0, 0.0])
        pos, _, _ = refine_hypotheses(base, ws, 36, avoid=((0.0, 2.0), (0.0, 3.0)), eps_col=0.05)
        assert abs(collinearity_determinant((0.0, 2.0), (0.0, 3.0), pos)) > 0.05


def straight_line_entries(n=50, spacing=0.05, anchor=(5.0, 3.0, 1.2)):
    # newest first, robot moving along +x at y = 0
    x = np.column_stack([np.linspace(n * spacing, spacing, n), np.zeros(n), np.full(n, 0.3)])
    t = np.linspace(10.0, 10.0 - 0.25 * (n - 1), n)
    r = np.linalg.norm(x - np.asarray(anchor), axis=1)
    return t, r, np.full(n, 0.0514), x


class TestContext:
    def test_straight_line_forces_third(self):
        t, r, s, x = straight_line_entries()
        ctx = build_context("A", (5.0, 3.0, 1.2), t, r, s, x, VAParams())
        assert ctx is not None
        a, b, c = ctx.anchors
        assert not a.forced and not b.forced and c.forced
        assert abs(ctx.collinearity) > 0.05
        assert all(v.fim_det > 25.0 for v in ctx.anchors)
        assert np.linalg.norm(a.position - b.position) >= 0.5

    def test_infinite_threshold_never_spawns(self):
        t, r, s, x = straight_line_entries()
        assert build_context("A", (5.0, 3.0, 1.2), t, r, s, x, VAParams(tau_F=math.inf)) is None

    def test_waits_below_cap(self):
        t, r, s, x = straight_line_entries(n=20)
        assert build_context("A", (5.0, 3.0, 1.2), t, r, s, x, VAParams()) is None


@pytest.fixture(scope="module", params=["zero", "nominal"])
def square_single_anchor(request):
    truth = generate_ground_truth(MotionProfile(kind="slow", path="square", seed=1))
    anchors = AnchorMap({"A0": (5.0, -2.0, 1.2)})
    noise = SensorNoiseConfig.zero() if request.param == "zero" else SensorNoiseConfig()
    ds = synthesize_sensors(truth, SceneConfig(anchors=anchors), noise, 3)
    init = FilterState.initial(rotation=Rotation.from_matrix(rot_z(truth.yaw[0])), position=truth.position[0])
    ekf = run_filter(ds.streams, init, planar=PlanarConstraint(height=0.3))
    s, keep = ds.streams, ~ds.uwb_outlier
    ctxs = va_pipeline(s.uwb_t[keep], s.uwb_anchor[keep], s.uwb_range[keep], s.uwb_sigma[keep],
                       ekf.history.position, anchors, VAParams(tau_F=25.0))
    return request.param, truth, anchors, ctxs


def va_errors(truth, anchors, ctx):
    out = []
    for v in ctx.anchors:
        p = anchors[v.source_anchor]
        true = p - (truth.position_at(v.range_time) - truth.position_at(v.created_at))
        out.append(float(np.linalg.norm(v.position[:2] - true[:2])))
    return out


class TestPipeline:
    def test_contexts_satisfy_invariants(self, square_single_anchor):
        _, _, _, ctxs = square_single_anchor
        assert ctxs
        for c in ctxs:
            assert len(c.anchors) == 3 and abs(c.collinearity) > 0.05
            assert all(v.fim_det > 25.0 for v in c.anchors)

    def test_natural_vas_accurate(self, square_single_anchor):
        kind, truth, anchors, ctxs = square_single_anchor
        natural = [c for c in ctxs if not c.forced]
        assert natural
        tol = 0.05 if kind == "zero" else 0.3
        assert max(max(va_errors(truth, anchors, c)) for c in natural) < tol

    def test_forced_sigma_covers_offset(self, square_single_anchor):
        _, truth, anchors, ctxs = square_single_anchor
        for c in ctxs:
            if c.forced:
                e = va_errors(truth, anchors, c)[2]
                assert c.anchors[2].sigma >= 0.8 * e - 0.1
