import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scanbot.weighting import (
    WeightingParams,
    basic_b,
    compute_a_f,
    compute_a_h,
    compute_a_p,
    compute_factors,
)

PARAMS = WeightingParams(r_h=0.2, r_p=0.15, x_top=0.1, x_bottom=-0.02, f0=12.5)

finite = st.floats(allow_nan=False, allow_infinity=False, width=64,
                   min_value=-1e6, max_value=1e6)


class TestBasicB:
    def test_zero(self):
        assert basic_b(0.0) == 1.0

    def test_one_is_exactly_half(self):
        assert basic_b(1.0) == 0.5

    def test_negative_branch(self):
        assert basic_b(-3.0) == 1.0

    def test_continuity_at_zero(self):
        assert basic_b(-1e-12) == 1.0
        assert abs(basic_b(1e-12) - 1.0) < 1e-15

    @given(s=st.floats(min_value=0.0, max_value=100.0))
    def test_range(self, s):
        assert 0.0 < basic_b(s) <= 1.0

    @given(s1=st.floats(min_value=0.0, max_value=50.0),
           s2=st.floats(min_value=0.0, max_value=50.0))
    def test_monotone_nonincreasing(self, s1, s2):
        lo, hi = min(s1, s2), max(s1, s2)
        assert basic_b(lo) >= basic_b(hi)

    def test_tends_to_zero(self):
        assert basic_b(100.0) < 1e-11


class TestGraspFactor:
    def test_grasp_at_probe(self):
        assert compute_a_h(np.zeros(3), PARAMS) == 1.0

    def test_at_radius_half(self):
        assert compute_a_h(np.array([PARAMS.r_h, 0.0, 0.0]), PARAMS) == 0.5

    def test_twice_radius(self):
        # ||d_h|| = 0.4 with r_h = 0.2 gives b(2) = 1/65
        a = compute_a_h(np.array([0.0, 0.4, 0.0]), PARAMS)
        assert abs(a - 1.0 / 65.0) < 1e-15

    @given(x=finite, y=finite, z=finite)
    def test_in_unit_interval(self, x, y, z):
        assert 0.0 <= compute_a_h(np.array([x, y, z]), PARAMS) <= 1.0


class TestProximityFactor:
    def test_region_center(self):
        center = 0.5 * (PARAMS.x_top + PARAMS.x_bottom)
        assert compute_a_p(np.array([center, 0.0, 0.0]), PARAMS) == 1.0

    def test_top_edge_at_radius(self):
        a = compute_a_p(np.array([PARAMS.x_top, PARAMS.r_p, 0.0]), PARAMS)
        assert abs(a - 0.25) < 1e-15

    def test_far_outside(self):
        a = compute_a_p(np.array([0.04, 3 * PARAMS.r_p, 0.0]), PARAMS)
        assert a <= 1.0 / 730.0 + 1e-15

    @given(angle=st.floats(min_value=-np.pi, max_value=np.pi),
           x=st.floats(min_value=-1.0, max_value=1.0),
           r=st.floats(min_value=0.0, max_value=1.0))
    def test_radially_symmetric_about_x_axis(self, angle, x, r):
        a0 = compute_a_p(np.array([x, r, 0.0]), PARAMS)
        rotated = np.array([x, r * np.cos(angle), r * np.sin(angle)])
        assert abs(compute_a_p(rotated, PARAMS) - a0) < 1e-12


class TestContactFactor:
    def test_no_contact(self):
        assert compute_a_f(0.0, PARAMS) == 0.0

    def test_threshold_is_half(self):
        assert compute_a_f(PARAMS.f0, PARAMS) == 0.5

    def test_ten_newtons(self):
        # 1 - 1/(1 + 0.8^6), consistent with a_f <= 0.3 at ~10 N
        a = compute_a_f(10.0, PARAMS)
        assert abs(a - 0.2077) < 1e-4
        assert a <= 0.3

    def test_negative_force_clamps_to_zero(self):
        assert compute_a_f(-5.0, PARAMS) == 0.0

    @given(f=finite)
    def test_in_unit_interval(self, f):
        assert 0.0 <= compute_a_f(f, PARAMS) <= 1.0


class TestParams:
    def test_rejects_inverted_region(self):
        with pytest.raises(ValueError):
            WeightingParams(x_top=-0.1, x_bottom=0.1)

    def test_rejects_nonpositive_radii(self):
        with pytest.raises(ValueError):
            WeightingParams(r_h=0.0)

    def test_compute_factors_without_frame(self):
        w = compute_factors(np.array([1.0, 0.0, 0.0]), None, 5.0, PARAMS)
        assert w.a_p == 0.0
        assert 0.0 < w.a_h < 1.0
        assert 0.0 < w.a_f < 1.0
