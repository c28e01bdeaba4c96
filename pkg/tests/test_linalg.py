import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hodl.linalg import Box, Metric, g_norm, power_iteration_norm, project_box_g, soft_threshold

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def vec(n):
    return arrays(np.float64, n, elements=finite)


class TestGNorm:
    def test_euclidean(self):
        assert g_norm([3.0, 4.0], Metric.identity(2)) == pytest.approx(5.0, abs=1e-15)

    def test_weighted(self):
        assert g_norm([1.0, 2.0], Metric.from_diag([4.0, 1.0])) == pytest.approx(math.sqrt(8.0), abs=1e-15)

    def test_against_explicit_loop(self, rng):
        for _ in range(20):
            n = rng.integers(1, 30)
            v = rng.standard_normal(n)
            d = rng.uniform(0.1, 5.0, n)
            acc = 0.0
            for i in range(n):
                acc += v[i] * d[i] * v[i]
            assert g_norm(v, Metric.from_diag(d)) == pytest.approx(math.sqrt(acc), rel=1e-12)

    def test_zero_iff_zero(self):
        g = Metric.from_diag([2.0, 3.0])
        assert g_norm(np.zeros(2), g) == 0.0
        assert g_norm([1e-150, 0.0], g) > 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            g_norm([1.0, 2.0, 3.0], Metric.identity(2))

    def test_batched_state_sums_all_columns(self, rng):
        v = rng.standard_normal((4, 3))
        d = rng.uniform(0.5, 2.0, 4)
        expected = math.sqrt(sum(g_norm(v[:, j], Metric.from_diag(d)) ** 2 for j in range(3)))
        assert g_norm(v, Metric.from_diag(d)) == pytest.approx(expected, rel=1e-13)

    @settings(max_examples=200, deadline=None)
    @given(v=vec(6), d=arrays(np.float64, 6, elements=st.floats(0.1, 10.0)))
    def test_metric_equivalence(self, v, d):
        g = Metric.from_diag(d)
        e = np.linalg.norm(v)
        n = g_norm(v, g)
        assert n >= math.sqrt(g.lower_bound) * e * (1 - 1e-12) - 1e-300
        assert n <= math.sqrt(g.upper_bound) * e * (1 + 1e-12) + 1e-300


class TestMetric:
    def test_rejects_nonpositive_lower_bound(self):
        with pytest.raises(ValueError):
            Metric(np.ones(2), 0.0, 1.0)

    def test_rejects_entries_outside_bounds(self):
        with pytest.raises(ValueError):
            Metric(np.array([0.5, 2.0]), 1.0, 3.0)

    def test_inverse_and_square_roots(self, rng):
        g = Metric.from_diag(rng.uniform(0.5, 4.0, 5))
        v = rng.standard_normal(5)
        np.testing.assert_allclose(g.solve(g.apply(v)), v, rtol=1e-14)
        np.testing.assert_allclose(g.inv_sqrt_apply(g.sqrt_apply(v)), v, rtol=1e-14)


class TestSoftThreshold:
    def test_shrinks(self):
        np.testing.assert_array_equal(soft_threshold([1.5], [1.0]), [0.5])

    def test_zeroes(self):
        np.testing.assert_array_equal(soft_threshold([-0.3], [0.5]), [0.0])

    def test_zero_threshold_is_identity(self, rng):
        v = rng.standard_normal(10)
        np.testing.assert_array_equal(soft_threshold(v, np.zeros(10)), v)

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            soft_threshold([1.0], [-0.1])

    @settings(max_examples=300, deadline=None)
    @given(a=vec(5), b=vec(5), tau=arrays(np.float64, 5, elements=st.floats(0.0, 100.0)))
    def test_firmly_nonexpansive(self, a, b, tau):
        pa, pb = soft_threshold(a, tau), soft_threshold(b, tau)
        d = pa - pb
        assert np.linalg.norm(d) <= np.linalg.norm(a - b) * (1 + 1e-12) + 1e-9
        assert d @ d <= d @ (a - b) + 1e-6


class TestPowerIteration:
    def test_diagonal(self):
        assert power_iteration_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, rel=1e-12)

    def test_nilpotent(self):
        assert power_iteration_norm(np.array([[0.0, 1.0], [0.0, 0.0]])) == pytest.approx(1.0, rel=1e-12)

    def test_zero_matrix(self):
        assert power_iteration_norm(np.zeros((3, 3))) == 0.0

    def test_against_svd(self, rng):
        for _ in range(10):
            m = rng.standard_normal((5, 5))
            sv = np.linalg.svd(m, compute_uv=False)[0]
            assert power_iteration_norm(m, 200) == pytest.approx(sv, rel=1e-6)

    def test_ones_start_in_null_space(self):
        m = np.array([[1.0, -1.0], [2.0, -2.0]])
        assert power_iteration_norm(m) == pytest.approx(np.linalg.svd(m, compute_uv=False)[0], rel=1e-10)

    def test_monotone_across_iterations(self, rng):
        m = rng.standard_normal((6, 4))
        ests = [power_iteration_norm(m, iters=k, tol=1e-300) for k in range(1, 30)]
        assert all(b >= a * (1 - 1e-14) for a, b in zip(ests, ests[1:]))

    def test_bounded_by_frobenius(self, rng):
        for _ in range(20):
            m = rng.standard_normal((rng.integers(1, 8), rng.integers(1, 8)))
            assert power_iteration_norm(m) <= np.linalg.norm(m) * (1 + 1e-12)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            power_iteration_norm(np.eye(2), iters=0)
        with pytest.raises(ValueError):
            power_iteration_norm(np.eye(2), tol=0.0)


class TestProjectBox:
    def test_clamp(self):
        box = Box(-np.ones(2), np.ones(2))
        out = project_box_g([2.0, -3.0], box, Metric.from_diag([5.0, 0.2]))
        np.testing.assert_array_equal(out, [1.0, -1.0])

    def test_interior_unchanged(self):
        box = Box(-np.ones(2), np.ones(2))
        np.testing.assert_array_equal(project_box_g([0.3, -0.2], box, Metric.identity(2)), [0.3, -0.2])

    def test_unbounded(self, rng):
        v = rng.standard_normal(4) * 1e6
        np.testing.assert_array_equal(project_box_g(v, Box(), Metric.identity(4)), v)

    def test_matches_brute_force_argmin(self, rng):
        d = rng.uniform(0.5, 3.0, 3)
        g = Metric.from_diag(d)
        box = Box(-0.5 * np.ones(3), np.ones(3))
        v = rng.standard_normal(3) * 2
        p = project_box_g(v, box, g)
        grid = np.linspace(-0.5, 1.0, 61)
        cand = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), -1).reshape(-1, 3)
        best = min(g_norm(c - v, g) for c in cand)
        assert g_norm(p - v, g) <= best + 1e-12

    @settings(max_examples=200, deadline=None)
    @given(a=vec(4), b=vec(4), d=arrays(np.float64, 4, elements=st.floats(0.1, 10.0)))
    def test_idempotent_and_nonexpansive(self, a, b, d):
        g = Metric.from_diag(d)
        box = Box(np.array([-1.0, -2.0, 0.0, -np.inf]), np.array([1.0, 0.5, 3.0, 2.0]))
        pa, pb = project_box_g(a, box, g), project_box_g(b, box, g)
        np.testing.assert_array_equal(project_box_g(pa, box, g), pa)
        assert g_norm(pa - pb, g) <= g_norm(a - b, g) * (1 + 1e-12) + 1e-12
