import numpy as np
import pytest
from hypothesis import given, strategies as st

from mems4.linsolve import band_to_dense
from mems4.mesh_ops import (
    DegenerateGrid,
    InvalidCoefficient,
    assemble_operator,
    build_grid,
    dual_norm,
    h2d_norm,
    l2_norm,
    linf_norm,
    poincare_constant,
)

from conftest import clamped_bump


class TestGrid:
    def test_eight_cells(self):
        g = build_grid(-1, 1, 8)
        assert g.h == 0.25
        assert g.interior_count == 7
        np.testing.assert_allclose(g.x, [-0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75])

    def test_spacing_and_measure(self):
        assert build_grid(-1, 1, 256).h == 0.0078125
        g = build_grid(0, 2, 100)
        assert g.measure == 2 and g.h == pytest.approx(0.02)

    @pytest.mark.parametrize("a,b,n", [(-1, 1, 4), (-1, 1, 7), (1, 1, 16), (2, 1, 16), (-1, 1, 8.5)])
    def test_degenerate(self, a, b, n):
        with pytest.raises(DegenerateGrid):
            build_grid(a, b, n)

    def test_nearest_node_and_pad(self):
        g = build_grid(-1, 1, 8)
        assert g.x[g.nearest_node(0.1)] == 0.0
        assert g.pad(np.ones(7)).tolist() == [0.0] + [1.0] * 7 + [0.0]


class TestAssembly:
    def test_stencil_entries(self):
        g = build_grid(-1, 1, 16)
        K = assemble_operator(g, 1.0, 0.0)
        h4 = g.h**4
        dense = K.dense() * h4
        np.testing.assert_allclose(dense[5, 3:8], [1, -4, 6, -4, 1])
        assert dense[0, 0] == pytest.approx(7.0)
        assert dense[-1, -1] == pytest.approx(7.0)

    def test_laplacian_part(self):
        g = build_grid(-1, 1, 16)
        diff = assemble_operator(g, 1.0, 2.0).dense() - assemble_operator(g, 1.0, 0.0).dense()
        np.testing.assert_allclose(diff[4, 3:6] * g.h**2, [-2.0, 4.0, -2.0])

    def test_symmetric_and_mirror_symmetric(self, grid64):
        K = assemble_operator(grid64, 0.3, 1.7)
        dense = K.dense()
        assert np.array_equal(dense, dense.T)
        assert np.array_equal(dense, dense[::-1, ::-1])

    @given(st.floats(1e-4, 1e3), st.floats(0.0, 1e3))
    def test_spd_for_admissible_coefficients(self, B, T):
        K = assemble_operator(build_grid(-1, 1, 32), B, T)
        K.factor()
        assert np.all(np.linalg.eigvalsh(K.dense()) > 0)

    @pytest.mark.parametrize("B,T", [(0.0, 1.0), (-1.0, 1.0), (1.0, -0.5)])
    def test_invalid_coefficients(self, grid32, B, T):
        with pytest.raises(InvalidCoefficient):
            assemble_operator(grid32, B, T)

    def test_zero_field(self, grid32):
        K = assemble_operator(grid32, 1.0, 1.0)
        assert not np.any(K.matvec(np.zeros(grid32.interior_count)))

    def test_scaled_is_h_times_operator(self, grid32):
        K = assemble_operator(grid32, 1.0, 1.0)
        np.testing.assert_allclose(K.scaled().bands, grid32.h * K.bands)
        np.testing.assert_array_equal(K.scaled().scaled().bands, K.scaled().bands)
        np.testing.assert_allclose(K.scaled().unscaled().bands, K.bands)


class TestManufactured:
    """w = (1-x^2)^2: w'''' = 24, w'' = 12x^2 - 4, clamped at both ends."""

    @staticmethod
    def interior_error(n, B, T):
        g = build_grid(-1, 1, n)
        x = g.x
        exact = 24.0 * B - T * (12.0 * x**2 - 4.0)
        err = assemble_operator(g, B, T).matvec(clamped_bump(g)) - exact
        return np.max(np.abs(err[1:-1]))

    def test_biharmonic_exact_on_quartic(self):
        # the 5-point stencil is exact on quartics away from the ghost rows
        assert self.interior_error(64, 1.0, 0.0) < 1e-7

    def test_second_order_with_tension(self):
        errs = [self.interior_error(n, 1.0, 1.0) for n in (64, 128, 256)]
        for coarse, fine in zip(errs, errs[1:]):
            assert 3.5 <= coarse / fine <= 4.5

    def test_ghost_row_consistency_error(self):
        # rows next to the wall see u_{-1} = u_1, which is only first-order
        # accurate for w; the local error there is -8/h (w'''(-1) = -24)
        for n in (64, 128):
            g = build_grid(-1, 1, n)
            err = assemble_operator(g, 1.0, 0.0).matvec(clamped_bump(g)) - 24.0
            assert err[0] == pytest.approx(-8.0 / g.h, rel=1e-10)
            assert err[-1] == pytest.approx(-8.0 / g.h, rel=1e-10)

    def test_solution_is_second_order(self):
        errs = []
        for n in (64, 128, 256):
            g = build_grid(-1, 1, n)
            rhs = 24.0 - (12.0 * g.x**2 - 4.0)
            u = assemble_operator(g, 1.0, 1.0).solve(rhs)
            errs.append(np.max(np.abs(u - clamped_bump(g))))
        for coarse, fine in zip(errs, errs[1:]):
            assert 3.8 <= coarse / fine <= 4.2


class TestNorms:
    def test_l2_examples(self):
        g = build_grid(-1, 1, 8)
        assert l2_norm(np.zeros(7), g) == 0
        assert l2_norm(np.ones(7), g) == pytest.approx(np.sqrt(1.75))

    def test_l2_sine_integral(self):
        g = build_grid(-1, 1, 256)
        assert l2_norm(np.sin(np.pi * (g.x + 1) / 2), g) == pytest.approx(1.0, abs=1e-12)

    def test_linf_examples(self, grid64):
        assert linf_norm(np.zeros(5)) == 0
        u = np.zeros(5)
        u[2] = -0.7
        assert linf_norm(u) == 0.7
        assert linf_norm(clamped_bump(grid64)) == 1.0

    def test_h2d_of_bump_converges_to_exact_integral(self):
        # int (12x^2 - 4)^2 dx over (-1, 1) = 128/5
        errs = []
        for n in (64, 128, 256):
            g = build_grid(-1, 1, n)
            K = assemble_operator(g, 1.0, 0.0)
            errs.append(abs(h2d_norm(clamped_bump(g), g, K) ** 2 - 25.6))
        assert errs[-1] < 5e-3
        assert 3.5 <= errs[0] / errs[1] <= 4.5

    def test_bilinear_form_matches_dense_product(self, grid64, rng):
        K = assemble_operator(grid64, 0.01, 1.0).scaled()
        u, w = rng.standard_normal((2, grid64.interior_count))
        dense = u @ K.dense() @ w
        assert K.bilinear_form(u, w) == pytest.approx(dense, rel=1e-12)
        assert K.unscaled().bilinear_form(u, w) == pytest.approx(dense / grid64.h, rel=1e-12)

    @given(st.lists(st.floats(-10, 10), min_size=31, max_size=31).filter(lambda v: any(v)))
    def test_h2d_positive(self, values):
        g = build_grid(-1, 1, 32)
        assert h2d_norm(np.array(values), g, assemble_operator(g, 1.0, 0.0)) > 0

    def test_h2d_zero(self, grid32):
        assert h2d_norm(np.zeros(31), grid32, assemble_operator(grid32, 1.0, 1.0)) == 0.0

    def test_poincare_inequality(self, grid64, rng):
        K = assemble_operator(grid64, 0.01, 1.0)
        alpha2 = poincare_constant(grid64, K)
        mu = np.linalg.eigvalsh(K.dense())[0]
        assert alpha2 == pytest.approx(1.0 / np.sqrt(mu), rel=1e-8)
        for u in rng.standard_normal((200, grid64.interior_count)):
            assert l2_norm(u, grid64) <= alpha2 * h2d_norm(u, grid64, K) * (1 + 1e-12)


class TestDualNorm:
    def test_zero(self, grid32):
        assert dual_norm(np.zeros(31), grid32, 1.0, 1.0) == 0.0

    @given(st.lists(st.floats(-1e3, 1e3), min_size=31, max_size=31), st.floats(1e-3, 10), st.floats(0, 10))
    def test_bounded_by_l2(self, values, B, T):
        g = build_grid(-1, 1, 32)
        w = np.array(values)
        assert dual_norm(w, g, B, T) <= l2_norm(w, g) * (1 + 1e-12) + 1e-300

    def test_dense_inverse_oracle(self, grid32):
        w = np.random.default_rng(7).standard_normal(31)
        A = np.eye(31) + assemble_operator(grid32, 1.0, 1.0).dense()
        oracle = np.sqrt(grid32.h * w @ np.linalg.inv(A) @ w)
        assert dual_norm(w, grid32, 1.0, 1.0) == pytest.approx(oracle, rel=1e-10)

    def test_band_to_dense_roundtrip(self, grid32):
        K = assemble_operator(grid32, 1.0, 1.0)
        assert np.array_equal(band_to_dense(K.bands), K.dense())
