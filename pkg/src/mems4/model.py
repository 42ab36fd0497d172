"""MEMS source term, discrete energies, steady residual and admissibility sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh_ops import Grid, OperatorMatrix, assemble_operator, h2d_norm, l2_norm


class TouchdownDomain(ValueError):
    """Some node has ``1 + u <= 0``: the membrane touched the ground plate."""


@dataclass(frozen=True)
class Params:
    B: float = 0.01
    T: float = 1.0
    lam: float = 0.0
    kappa: float = 0.5

    def __post_init__(self):
        if not self.B > 0:
            raise ValueError(f"B must be > 0, got {self.B}")
        if not self.T >= 0:
            raise ValueError(f"T must be >= 0, got {self.T}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.kappa < 1:
            raise ValueError(f"kappa must lie in (0,1), got {self.kappa}")

    def with_lambda(self, lam: float) -> "Params":
        return Params(self.B, self.T, float(lam), self.kappa)


@dataclass(frozen=True)
class HyperState:
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        if np.shape(self.u) != np.shape(self.v):
            raise ValueError("u and v must have the same length")


def _gap(u):
    gap = 1.0 + np.asarray(u, dtype=float)
    if gap.size and not np.min(gap) > 0:
        j = int(np.argmin(gap))
        raise TouchdownDomain(f"1 + u = {gap[j]:.3e} <= 0 at node {j}")
    return gap


def nonlinearity(u: np.ndarray, lam: float) -> np.ndarray:
    """``-lambda / (1 + u)^2``, the right-hand side of both flows."""
    return -lam / _gap(u) ** 2


def nonlinearity_derivative(u: np.ndarray, lam: float) -> np.ndarray:
    return 2.0 * lam / _gap(u) ** 3


def energy_parabolic(u: np.ndarray, p: Params, grid: Grid, K: OperatorMatrix) -> float:
    """``1/2 u^T K u - lambda h sum 1/(1+u)`` with ``K = h K_op``.

    The potential uses interior nodes only, so ``E(0) = -lambda (|Omega| - h)``.
    """
    gap = _gap(u)
    return 0.5 * K.scaled().quadratic_form(u) - p.lam * grid.h * float(np.sum(1.0 / gap))


def energy_hyperbolic(s: HyperState, p: Params, grid: Grid, K: OperatorMatrix) -> float:
    v = np.asarray(s.v, dtype=float)
    return energy_parabolic(s.u, p, grid, K) + 0.5 * grid.h * float(np.dot(v, v))


def energy_gap(u: np.ndarray, psi: np.ndarray, p: Params, grid: Grid, K: OperatorMatrix) -> float:
    """``E(u) - E(psi)`` without subtracting two O(1) energies."""
    u = np.asarray(u, dtype=float)
    psi = np.asarray(psi, dtype=float)
    e = u - psi
    quad = 0.5 * K.scaled().bilinear_form(e, u + psi)
    pot = p.lam * grid.h * float(np.sum(e / (_gap(u) * _gap(psi))))
    return quad + pot


def energy_gradient(u: np.ndarray, p: Params, grid: Grid, K: OperatorMatrix) -> np.ndarray:
    """Euclidean gradient of :func:`energy_parabolic`: ``h (K_op u + lambda/(1+u)^2)``."""
    return grid.h * steady_residual(u, p, K)


def steady_residual(u: np.ndarray, p: Params, K_op: OperatorMatrix) -> np.ndarray:
    """``K_op u + lambda/(1+u)^2``; zero exactly on the stationary set."""
    return K_op.unscaled().matvec(u) - nonlinearity(u, p.lam)


def steady_residual_noise(u: np.ndarray, p: Params, K_op: OperatorMatrix) -> float:
    """Rounding-level L2 size of :func:`steady_residual` at ``u``.

    The banded product sums terms of size ``|K_op| |u| ~ h^-4``; its absolute
    error is a few ulps of that, which for fine grids exceeds 1e-10.
    """
    bound = K_op.unscaled().abs_matvec(u) + p.lam / _gap(u) ** 2
    return 4.0 * np.finfo(float).eps * l2_norm(bound, K_op.grid)


def residual_change(u: np.ndarray, psi: np.ndarray, p: Params, K_op: OperatorMatrix) -> np.ndarray:
    """``steady_residual(u) - steady_residual(psi)`` formed from ``u - psi``.

    Avoids the rounding floor of :func:`steady_residual`; equals the residual of
    ``u`` whenever ``psi`` is a stationary solution.
    """
    u = np.asarray(u, dtype=float)
    psi = np.asarray(psi, dtype=float)
    e = u - psi
    gu, gp = _gap(u), _gap(psi)
    source = -p.lam * e * (gu + gp) / (gu**2 * gp**2)
    return K_op.unscaled().matvec(e) + source


def embedding_constant(grid: Grid, B: float, T: float, K: OperatorMatrix | None = None) -> float:
    """Sharp discrete ``C0`` in ``||v||_inf <= C0 ||v||_{H2_D}``.

    The best constant is ``max_j sqrt((K^-1)_jj)`` for ``K = h K_op``; the
    maximiser is the Riesz representer ``K^-1 e_j``.
    """
    K = (K or assemble_operator(grid, B, T)).scaled()
    return float(np.sqrt(np.max(inverse_diagonal(K))))


def inverse_diagonal(K: OperatorMatrix) -> np.ndarray:
    n = K.size
    diag = np.empty(n)
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        diag[j] = K.solve(e)[j]
        e[j] = 0.0
    return diag


def lambda_bound(kappa: float, C0: float, omega_measure: float) -> float:
    """Largest lambda for which the a priori convergence estimates apply, given kappa, C0, |Omega|."""
    return kappa**2 * (8.0 - 3.0 * kappa) / (128.0 * C0**2 * omega_measure)


def lambda_bound_inequality(kappa: float, lam: float, C0: float, omega_measure: float) -> tuple[float, float]:
    """Both sides of ``(1-k/2)^2/C0^2 + 8 lam |Omega|/k <= (1-k/4)^2/C0^2``."""
    lhs = (1.0 - kappa / 2.0) ** 2 / C0**2 + 8.0 * lam * omega_measure / kappa
    rhs = (1.0 - kappa / 4.0) ** 2 / C0**2
    return lhs, rhs


_INCLUSIVE_SLACK = 4 * np.finfo(float).eps


def admissibility_radius(p: Params, C0h: float) -> float:
    return (1.0 - p.kappa) ** 2 / C0h**2


def check_admissible_parabolic(u0: np.ndarray, p: Params, grid: Grid, C0h: float, K: OperatorMatrix | None = None) -> bool:
    """Membership of ``X(kappa)``: ``||u||_{H2_D}^2 <= (1-kappa)^2 / C0^2``."""
    K = K or assemble_operator(grid, p.B, p.T)
    radius = admissibility_radius(p, C0h)
    return h2d_norm(u0, grid, K) ** 2 <= radius * (1 + _INCLUSIVE_SLACK)


def check_admissible_hyperbolic(s: HyperState, p: Params, grid: Grid, C0h: float, K: OperatorMatrix | None = None) -> bool:
    """Membership of ``Z(kappa)`` with the pair norm ``||u||_{H2_D}^2 + ||u_t||_{L2}^2``."""
    K = K or assemble_operator(grid, p.B, p.T)
    radius = admissibility_radius(p, C0h)
    size = h2d_norm(s.u, grid, K) ** 2 + l2_norm(s.v, grid) ** 2
    return size <= radius * (1 + _INCLUSIVE_SLACK)
