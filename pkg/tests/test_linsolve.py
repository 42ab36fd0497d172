import numpy as np
import pytest
from hypothesis import given, strategies as st

from mems4.linsolve import (
    NonPositivePivot,
    band_factor,
    band_matvec,
    band_solve,
    band_to_dense,
    dense_solve,
    mems_newton,
    mirror_average_solve,
    newton,
    smallest_eig,
)
from mems4.mesh_ops import assemble_operator, build_grid
from mems4.model import Params, steady_residual
from mems4.steady import linearized_bands


def random_spd_bands(rng, n):
    """Diagonally dominant symmetric pentadiagonal matrix in lower band storage."""
    ab = np.zeros((3, n))
    ab[1, : n - 1] = rng.uniform(-1, 1, n - 1)
    ab[2, : n - 2] = rng.uniform(-1, 1, n - 2)
    ab[0] = 4.0 + rng.uniform(0, 1, n)
    return ab


class TestFactorSolve:
    def test_identity(self):
        ab = np.zeros((3, 10))
        ab[0] = 3.0
        b = np.arange(10.0)
        assert np.array_equal(band_solve(band_factor(ab), 3.0 * b), b)

    def test_clamped_biharmonic_vs_dense(self):
        g = build_grid(-1, 1, 32)
        K = assemble_operator(g, 1.0, 0.0)
        rhs = np.random.default_rng(3).standard_normal(31)
        x = band_solve(band_factor(K.bands), rhs)
        oracle = dense_solve(K.dense(), rhs)
        assert np.max(np.abs(x - oracle)) / np.max(np.abs(oracle)) <= 1e-10

    def test_dense_oracle_agrees_with_numpy(self, rng):
        a = rng.standard_normal((12, 12)) + 12 * np.eye(12)
        b = rng.standard_normal(12)
        np.testing.assert_allclose(dense_solve(a, b), np.linalg.solve(a, b), rtol=1e-12)

    def test_negative_eigenvalue_rejected(self):
        ab = np.zeros((3, 6))
        ab[0] = [2, 2, -1, 2, 2, 2]
        with pytest.raises(NonPositivePivot):
            band_factor(ab)

    def test_zero_rhs_and_reuse(self, rng):
        ab = random_spd_bands(rng, 20)
        f = band_factor(ab)
        assert not np.any(band_solve(f, np.zeros(20)))
        b = rng.standard_normal(20)
        assert np.array_equal(band_solve(f, b), band_solve(f, b))

    def test_size_mismatch(self, rng):
        f = band_factor(random_spd_bands(rng, 8))
        with pytest.raises(ValueError):
            band_solve(f, np.ones(9))

    @given(st.integers(5, 64), st.integers(0, 2**31 - 1))
    def test_random_spd_matches_dense(self, n, seed):
        rng = np.random.default_rng(seed)
        ab = random_spd_bands(rng, n)
        b = rng.standard_normal(n)
        x = band_solve(band_factor(ab), b)
        oracle = dense_solve(band_to_dense(ab), b)
        assert np.max(np.abs(x - oracle)) <= 1e-10 * np.max(np.abs(oracle))

    def test_matvec_matches_dense(self, rng):
        ab = random_spd_bands(rng, 17)
        u = rng.standard_normal(17)
        np.testing.assert_allclose(band_matvec(ab, u), band_to_dense(ab) @ u, rtol=1e-13, atol=1e-13)

    def test_mirror_average_is_equivariant(self, rng):
        ab = random_spd_bands(rng, 41)
        b = rng.standard_normal(41)
        x = mirror_average_solve(ab, b)
        np.testing.assert_allclose(x, dense_solve(band_to_dense(ab), b), rtol=1e-12)
        g = build_grid(-1, 1, 128)
        K = assemble_operator(g, 0.01, 1.0)
        sym = np.cos(3 * g.x) + g.x**2
        y = mirror_average_solve(K.bands, sym)
        assert np.array_equal(y, y[::-1])


class TestNewton:
    def test_linear_map_one_iteration(self, rng):
        ab = random_spd_bands(rng, 30)
        b = rng.standard_normal(30)
        u, rep = newton(lambda u: band_matvec(ab, u) - b, lambda u: ab, np.zeros(30), tol=1e-12)
        assert rep.converged and rep.iterations == 1
        np.testing.assert_allclose(u, band_solve(band_factor(ab), b), rtol=1e-12)

    def _steady(self, lam, B=1.0, T=0.0, n=256):
        g = build_grid(-1, 1, n)
        p = Params(B, T, lam)
        K = assemble_operator(g, B, T)
        res = lambda u: steady_residual(u, p, K)
        jac = lambda u: linearized_bands(u, p, K)
        return g, p, K, res, jac

    def test_already_a_root(self):
        g, p, K, res, jac = self._steady(0.0)
        u, rep = newton(res, jac, np.zeros(g.interior_count), weight=g.h)
        assert rep.converged and rep.iterations <= 1 and not np.any(u)

    def test_small_lambda_converges_fast(self):
        g, p, K, res, jac = self._steady(1e-3, n=64)
        u, rep = newton(res, jac, np.zeros(g.interior_count), weight=g.h)
        assert rep.converged and rep.iterations <= 8
        assert rep.final_residual_norm <= 1e-10

    def test_quadratic_tail(self):
        g, p, K, res, jac = self._steady(0.3, B=0.01, T=1.0, n=64)
        u, rep = newton(res, jac, np.zeros(g.interior_count), tol=1e-11, weight=g.h)
        # the last entry sits at the rounding floor, ~1e-12 for this grid
        r = [x for x in rep.residual_history if x > 1e-10]
        assert rep.converged and len(r) >= 4
        for a, b in zip(r[:-1], r[1:]):
            assert b <= a**2

    def test_jacobian_matches_finite_differences(self, rng):
        g, p, K, res, jac = self._steady(0.3, B=0.01, T=1.0, n=64)
        for _ in range(5):
            u = -0.3 * rng.uniform(0, 1, g.interior_count)
            d = rng.standard_normal(g.interior_count)
            eps = 1e-6
            fd = (res(u + eps * d) - res(u - eps * d)) / (2 * eps)
            exact = band_matvec(jac(u), d)
            assert np.linalg.norm(fd - exact) <= 1e-5 * np.linalg.norm(exact)

    def test_failure_is_reported(self):
        g, p, K, res, jac = self._steady(1.0, B=0.01, T=1.0, n=64)
        u, rep = newton(res, jac, np.zeros(g.interior_count), weight=g.h)
        assert not rep.converged and rep.reason
        assert all(0 < s <= 1 for s in rep.step_damping_history)

    def test_noise_floor_raises_tolerance(self):
        g, p, K, res, jac = self._steady(0.3, B=0.01, T=1.0)
        u, rep = newton(res, jac, np.zeros(g.interior_count), tol=1e-30, weight=g.h, noise_floor=lambda u: 1e-9)
        assert rep.converged and rep.tol_used == 1e-9
        assert rep.final_residual_norm <= rep.tol_used

    def test_fused_kernel_matches_generic(self):
        g, p, K, res, jac = self._steady(0.3, B=0.01, T=1.0, n=64)
        u1, r1 = newton(res, jac, np.zeros(g.interior_count), weight=g.h)
        u2, r2 = mems_newton(K.bands, 0.0, np.zeros(g.interior_count), 0.3, np.zeros(g.interior_count), weight=g.h)
        assert r1.converged and r2.converged
        np.testing.assert_allclose(u1, u2, atol=1e-12)


class TestSmallestEig:
    def test_mass_pencil_identity(self):
        ab = np.zeros((3, 12))
        ab[0] = np.linspace(1, 3, 12)
        assert smallest_eig(ab, ab[0]).value == pytest.approx(1.0, rel=1e-12)

    def test_dense_oracle(self, grid32):
        K = assemble_operator(grid32, 1.0, 0.0)
        res = smallest_eig(K.bands, np.ones(31))
        assert res.converged
        assert res.value == pytest.approx(np.linalg.eigvalsh(K.dense())[0], rel=1e-6)

    def test_weighted_mass(self, grid32, rng):
        K = assemble_operator(grid32, 1.0, 1.0)
        m = rng.uniform(0.5, 2.0, 31)
        dense = K.dense() / np.sqrt(np.outer(m, m))
        assert smallest_eig(K.bands, m).value == pytest.approx(np.linalg.eigvalsh(dense)[0], rel=1e-8)

    def test_rejects_nonpositive_mass(self, grid32):
        with pytest.raises(ValueError):
            smallest_eig(assemble_operator(grid32, 1.0, 1.0).bands, np.zeros(31))
