"""Stationary solutions, continuation in lambda up to the fold, stability."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linsolve import NewtonReport, band_factor, band_solve, newton, smallest_eig
from .mesh_ops import Grid, OperatorMatrix, assemble_operator, l2_norm
from .model import (
    Params,
    nonlinearity_derivative,
    steady_residual,
    steady_residual_noise,
)

log = logging.getLogger(__name__)

STEADY_TOL = 1e-10


class NewtonFailed(RuntimeError):
    def __init__(self, message: str, report: NewtonReport):
        super().__init__(message)
        self.report = report


@dataclass
class SteadySolution:
    psi: np.ndarray
    lam: float
    residual_norm: float
    min_value: float
    newton: NewtonReport
    smallest_eig: Optional[float] = None


@dataclass
class Branch:
    points: list = field(default_factory=list)
    fold_estimate: Optional[float] = None

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([s.lam for s in self.points])

    @property
    def min_values(self) -> np.ndarray:
        return np.array([s.min_value for s in self.points])

    def is_monotone(self) -> bool:
        lams, mins = self.lambdas, self.min_values
        return bool(np.all(np.diff(lams) > 0) and np.all(np.diff(mins) < 0))


def linearized_bands(psi: np.ndarray, p: Params, K_op: OperatorMatrix) -> np.ndarray:
    """Lower bands of ``L_h = K_op - diag(2 lambda / (1+psi)^3)``."""
    bands = K_op.unscaled().bands.copy()
    bands[0] -= nonlinearity_derivative(psi, p.lam)
    return bands


def solve_steady(
    p: Params,
    grid: Grid,
    u_init: Optional[np.ndarray] = None,
    *,
    K_op: Optional[OperatorMatrix] = None,
    tol: float = STEADY_TOL,
    max_iter: int = 50,
    with_eig: bool = False,
) -> SteadySolution:
    """Newton root of ``B D4 psi - T D2 psi + lambda/(1+psi)^2 = 0``.

    The convergence test is ``||residual||_L2 <= max(tol, rounding floor)``;
    on fine grids the floor (a few ulps of ``|K_op| |psi|``) dominates.
    Raises NewtonFailed on divergence or barrier violation, which is the
    expected outcome above the fold.
    """
    K_op = (K_op or assemble_operator(grid, p.B, p.T)).unscaled()
    u0 = np.zeros(grid.interior_count) if u_init is None else np.asarray(u_init, dtype=float)

    psi, report = newton(
        lambda u: steady_residual(u, p, K_op),
        lambda u: linearized_bands(u, p, K_op),
        u0,
        tol=tol,
        max_iter=max_iter,
        weight=grid.h,
        noise_floor=lambda u: steady_residual_noise(u, p, K_op),
    )
    if not report.converged:
        raise NewtonFailed(f"steady Newton failed at lambda={p.lam}: {report.reason}", report)
    sol = SteadySolution(
        psi=psi,
        lam=p.lam,
        residual_norm=l2_norm(steady_residual(psi, p, K_op), grid),
        min_value=float(np.min(psi)),
        newton=report,
    )
    if with_eig:
        sol.smallest_eig = linearized_stability(sol, p, grid, K_op)
    return sol


def linearized_stability(sol: SteadySolution, p: Params, grid: Grid, K_op: Optional[OperatorMatrix] = None) -> float:
    """Smallest eigenvalue of the linearization at ``sol`` (mass-weighted pencil).

    Positive means the kernel of the linearized operator is trivial.
    """
    K_op = (K_op or assemble_operator(grid, p.B, p.T)).unscaled()
    res = smallest_eig(linearized_bands(sol.psi, p.with_lambda(sol.lam), K_op), np.ones(grid.interior_count))
    if not res.converged:
        log.warning("inverse iteration did not converge at lambda=%g; value is approximate", sol.lam)
    return res.value


def _tangent(sol: SteadySolution, p: Params, K_op: OperatorMatrix) -> np.ndarray:
    """``d psi / d lambda = -L^{-1} (1+psi)^{-2}``."""
    fac = band_factor(linearized_bands(sol.psi, p.with_lambda(sol.lam), K_op), allow_indefinite=True)
    return -band_solve(fac, 1.0 / (1.0 + sol.psi) ** 2)


def continuation_sweep(
    p_base: Params,
    grid: Grid,
    lambda_max: float,
    dlambda: float,
    *,
    with_eig: bool = True,
    fold_rtol: float = 1e-6,
) -> Branch:
    """March the minimal branch from lambda = 0; bisect the fold on failure."""
    if not dlambda > 0:
        raise ValueError("dlambda must be positive")
    K_op = assemble_operator(grid, p_base.B, p_base.T)
    branch = Branch()

    def attempt(lam: float, prev: Optional[SteadySolution]):
        guess = None
        if prev is not None:
            try:
                guess = prev.psi + (lam - prev.lam) * _tangent(prev, p_base, K_op)
                if np.min(1.0 + guess) <= 1e-3:
                    guess = prev.psi
            except np.linalg.LinAlgError:
                guess = prev.psi
        try:
            return solve_steady(p_base.with_lambda(lam), grid, guess, K_op=K_op, with_eig=with_eig)
        except NewtonFailed:
            if prev is not None and guess is not prev.psi:
                try:
                    return solve_steady(p_base.with_lambda(lam), grid, prev.psi, K_op=K_op, with_eig=with_eig)
                except NewtonFailed:
                    return None
            return None

    prev = None
    k = 0
    while True:
        lam = k * dlambda
        if lam > lambda_max * (1 + 1e-12):
            return branch
        sol = attempt(lam, prev)
        if sol is None or (prev is not None and sol.min_value >= prev.min_value):
            break
        if with_eig and sol.smallest_eig is not None and sol.smallest_eig <= 0:
            # converged onto the unstable branch
            break
        branch.points.append(sol)
        prev = sol
        k += 1

    if prev is None:
        return branch
    lo, hi = prev.lam, lam
    while hi - lo > fold_rtol * max(lo, 1e-300):
        mid = 0.5 * (lo + hi)
        sol = attempt(mid, prev)
        ok = sol is not None and sol.min_value < prev.min_value
        if ok and with_eig and sol.smallest_eig is not None:
            ok = sol.smallest_eig > 0
        if ok:
            branch.points.append(sol)
            prev, lo = sol, mid
        else:
            hi = mid
    branch.fold_estimate = 0.5 * (lo + hi)
    log.info("fold located in [%.8g, %.8g]", lo, hi)
    return branch
