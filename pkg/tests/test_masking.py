from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import map_decimal
from zigzag.core import BBox, ValidationError
from zigzag.masking import (
    FeatureGrid,
    MaskPlan,
    apply_mask,
    feature_extent,
    map_pixel_to_feature,
    pixel_span,
    plan_mask,
)


class TestMapping:
    def test_origin(self):
        assert map_pixel_to_feature(1, 1, 16) == (1, 1)

    def test_one_stride(self):
        assert map_pixel_to_feature(17, 17, 16) == (2, 2)

    def test_half_rounds_up(self):
        assert map_pixel_to_feature(9, 9, 16) == (2, 2)
        assert map_pixel_to_feature(8, 8, 16) == (1, 1)

    @pytest.mark.parametrize("stride", [8, 16, 32])
    def test_matches_decimal_formula(self, stride):
        for u in range(1, 10 * stride + 1):
            assert map_pixel_to_feature(u, u, stride)[0] == map_decimal(u, stride)

    def test_float_input(self):
        assert map_pixel_to_feature(9.0, 24.0, 16) == (2, 2)

    def test_extent(self):
        assert feature_extent(320, 16) == map_decimal(320, 16) == 21
        assert feature_extent(16, 16) == 2


class TestPlan:
    def test_tau_zero(self):
        p = plan_mask(BBox(0, 0, 50, 50), 0.0, 0)
        assert p.omega is None and p.mapped_cells == frozenset()

    def test_square_quarter(self):
        obj = BBox(1, 1, 33, 33)
        for seed in range(50):
            p = plan_mask(obj, 0.25, seed, stride=16)
            assert (p.omega.width, p.omega.height) == (16, 16)
            assert obj.contains(p.omega)
            u0, u1 = pixel_span(p.omega.x_min, p.omega.x_max)
            v0, v1 = pixel_span(p.omega.y_min, p.omega.y_max)
            cells = {
                (map_decimal(u, 16), map_decimal(v, 16))
                for u in range(u0, u1 + 1) for v in range(v0, v1 + 1)
            }
            assert p.mapped_cells == cells
            assert len(cells) in (1, 2, 4)

    def test_aspect_kept(self):
        p = plan_mask(BBox(0, 0, 64, 32), 0.25, 3)
        assert (p.omega.width, p.omega.height) == (32, 16)

    def test_invalid(self):
        with pytest.raises(ValidationError):
            plan_mask(BBox(0, 0, 10, 10), 1.0, 0)
        with pytest.raises(ValidationError):
            plan_mask(BBox(0, 0, 0, 10), 0.5, 0)

    @given(
        st.integers(0, 200), st.integers(0, 200), st.integers(1, 150), st.integers(1, 150),
        st.floats(0.01, 0.95), st.integers(0, 2**32 - 1),
    )
    def test_invariants(self, x, y, w, h, tau, seed):
        obj = BBox(x, y, x + w, y + h)
        p = plan_mask(obj, tau, seed)
        assert obj.contains(p.omega)
        # each side within half a pixel of sqrt(tau) scaling, at least one pixel
        assert abs(p.omega.width - max(w * math.sqrt(tau), 1)) <= 0.5 + 1e-9
        assert abs(p.omega.height - max(h * math.sqrt(tau), 1)) <= 0.5 + 1e-9
        assert plan_mask(obj, tau, seed) == p
        if w * h >= 16 * 16:
            assert p.mapped_cells


def _random_plan(rng, grid):
    cells = frozenset(
        (int(rng.integers(1, grid.width_f + 1)), int(rng.integers(1, grid.height_f + 1)))
        for _ in range(int(rng.integers(0, 8)))
    )
    return MaskPlan("img", 0, None, cells)


class TestApply:
    def test_empty_plan(self):
        g = FeatureGrid(np.random.default_rng(0).random((3, 4, 5)))
        np.testing.assert_array_equal(apply_mask(g, MaskPlan("a", 0, None)).values, g.values)

    def test_single_cell(self):
        g = FeatureGrid(np.ones((3, 4, 5)))
        out = apply_mask(g, MaskPlan("a", 0, None, frozenset({(1, 1)})))
        assert np.count_nonzero(out.values == 0) == 3
        assert np.all(out.values[:, 0, 0] == 0)
        assert np.all(g.values == 1)  # input untouched

    def test_out_of_range_clipped(self, caplog):
        g = FeatureGrid(np.ones((1, 2, 2)))
        out = apply_mask(g, MaskPlan("a", 0, None, frozenset({(3, 1), (1, 1)})))
        assert np.count_nonzero(out.values == 0) == 1
        assert "clipped" in caplog.text

    def test_bitwise_against_cell_scan(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            g = FeatureGrid(rng.random((int(rng.integers(1, 5)), int(rng.integers(1, 12)), int(rng.integers(1, 12)))) + 0.1)
            plan = _random_plan(rng, g)
            out = apply_mask(g, plan).values
            for cv in range(1, g.height_f + 1):
                for cu in range(1, g.width_f + 1):
                    got = out[:, cv - 1, cu - 1]
                    if (cu, cv) in plan.mapped_cells:
                        assert np.all(got == 0)
                    else:
                        assert np.array_equal(got, g.values[:, cv - 1, cu - 1])

    @given(st.integers(0, 2**32 - 1))
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        g = FeatureGrid(rng.random((2, 6, 7)))
        plan = _random_plan(rng, g)
        once = apply_mask(g, plan)
        np.testing.assert_array_equal(apply_mask(once, plan).values, once.values)
