"""Banded symmetric LDL^T, a damped Newton driver, and inverse iteration.

Band storage is LAPACK lower form: ``ab[k, j] = A[j + k, j]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numba import njit


class NonPositivePivot(np.linalg.LinAlgError):
    pass


@njit(cache=True, nogil=True)
def _ldlt_banded(ab, allow_indefinite):
    p = ab.shape[0] - 1
    n = ab.shape[1]
    lb = np.zeros_like(ab)
    d = np.empty(n)
    scale = 0.0
    for j in range(n):
        scale = max(scale, abs(ab[0, j]))
    tiny = scale * 1e-15
    for j in range(n):
        dj = ab[0, j]
        for k in range(max(0, j - p), j):
            ljk = lb[j - k, k]
            dj -= ljk * ljk * d[k]
        if allow_indefinite:
            if abs(dj) <= tiny or not np.isfinite(dj):
                return lb, d, j + 1
        elif not dj > tiny:
            return lb, d, j + 1
        d[j] = dj
        lb[0, j] = 1.0
        for i in range(j + 1, min(n, j + p + 1)):
            s = ab[i - j, j]
            for k in range(max(0, i - p), j):
                s -= lb[i - k, k] * lb[j - k, k] * d[k]
            lb[i - j, j] = s / dj
    return lb, d, 0


@njit(cache=True, nogil=True)
def _ldlt_solve(lb, d, rhs):
    p = lb.shape[0] - 1
    n = lb.shape[1]
    x = rhs.copy()
    for i in range(n):
        s = x[i]
        for k in range(max(0, i - p), i):
            s -= lb[i - k, k] * x[k]
        x[i] = s
    for i in range(n):
        x[i] /= d[i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, min(n, i + p + 1)):
            s -= lb[k - i, i] * x[k]
        x[i] = s
    return x


@njit(cache=True, nogil=True)
def _band_matvec(ab, u):
    # off-diagonal terms are added in (left + right) pairs so that a
    # mirror-symmetric matrix maps mirror-symmetric vectors to bitwise
    # mirror-symmetric results
    p = ab.shape[0] - 1
    n = ab.shape[1]
    out = np.empty(n)
    for j in range(n):
        acc = ab[0, j] * u[j]
        for k in range(1, p + 1):
            left = ab[k, j - k] * u[j - k] if j >= k else 0.0
            right = ab[k, j] * u[j + k] if j + k < n else 0.0
            acc += left + right
        out[j] = acc
    return out


@njit(cache=True, nogil=True)
def _reverse_bands(ab):
    """Bands of ``R A R`` where ``R`` reverses the index order."""
    p = ab.shape[0] - 1
    n = ab.shape[1]
    out = np.zeros_like(ab)
    for k in range(p + 1):
        for j in range(n - k):
            out[k, j] = ab[k, n - 1 - j - k]
    return out


@njit(cache=True, nogil=True)
def _mirror_average_solve(ab, rhs, allow_indefinite):
    """``A^{-1} rhs`` as the average of a direct and a reflected LDL^T solve.

    Exact for any ``A``; the result is bitwise reflection-equivariant, so a
    mirror-symmetric system with mirror-symmetric data gives an exactly
    mirror-symmetric solution.
    """
    n = rhs.shape[0]
    lb, d, info = _ldlt_banded(ab, allow_indefinite)
    if info:
        return rhs, info
    lb2, d2, info2 = _ldlt_banded(_reverse_bands(ab), allow_indefinite)
    if info2:
        return rhs, info2
    x1 = _ldlt_solve(lb, d, rhs)
    x2 = _ldlt_solve(lb2, d2, rhs[::-1].copy())
    out = np.empty(n)
    for i in range(n):
        out[i] = 0.5 * (x1[i] + x2[n - 1 - i])
    return out, 0


@dataclass(frozen=True)
class BandFactor:
    """``A = L D L^T`` with unit lower-banded ``L``."""

    lower: np.ndarray
    diag: np.ndarray

    @property
    def size(self) -> int:
        return self.diag.shape[0]

    @property
    def inertia_negative(self) -> int:
        return int(np.sum(self.diag < 0))


def band_factor(ab: np.ndarray, allow_indefinite: bool = False) -> BandFactor:
    """LDL^T of a symmetric band matrix, no pivoting.

    Raises NonPositivePivot when a pivot is not safely positive, which for the
    operators built here means the assembly is wrong.  ``allow_indefinite``
    only rejects (near-)zero pivots; used by shifted inverse iteration.
    """
    ab = np.ascontiguousarray(ab, dtype=float)
    if ab.ndim != 2 or ab.shape[0] > 3:
        raise ValueError(f"expected lower band storage with bandwidth <= 2, got {ab.shape}")
    lb, d, info = _ldlt_banded(ab, allow_indefinite)
    if info:
        raise NonPositivePivot(f"pivot {info} is not positive (matrix not SPD)")
    return BandFactor(lb, d)


def band_solve(f: BandFactor, rhs: np.ndarray) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (f.size,):
        raise ValueError(f"rhs has shape {rhs.shape}, factor has size {f.size}")
    return _ldlt_solve(f.lower, f.diag, np.ascontiguousarray(rhs))


def band_matvec(ab: np.ndarray, u: np.ndarray) -> np.ndarray:
    return _band_matvec(np.ascontiguousarray(ab, dtype=float), np.ascontiguousarray(u, dtype=float))


def mirror_average_solve(ab: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Reflection-equivariant solve of a symmetric band system (two LDL^T sweeps)."""
    x, info = _mirror_average_solve(np.ascontiguousarray(ab, dtype=float), np.ascontiguousarray(rhs, dtype=float), False)
    if info:
        raise NonPositivePivot(f"pivot {info} is not positive (matrix not SPD)")
    return x


def band_to_dense(ab: np.ndarray) -> np.ndarray:
    p, n = ab.shape[0] - 1, ab.shape[1]
    out = np.zeros((n, n))
    for k in range(p + 1):
        idx = np.arange(n - k)
        out[idx + k, idx] = ab[k, : n - k]
        out[idx, idx + k] = ab[k, : n - k]
    return out


def dense_solve(a: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting; the oracle for band_solve."""
    a = np.array(a, dtype=float)
    x = np.array(rhs, dtype=float)
    n = a.shape[0]
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if a[piv, col] == 0.0:
            raise np.linalg.LinAlgError("singular matrix")
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            x[[col, piv]] = x[[piv, col]]
        factors = a[col + 1 :, col] / a[col, col]
        a[col + 1 :, col:] -= np.outer(factors, a[col, col:])
        x[col + 1 :] -= factors * x[col]
    for row in range(n - 1, -1, -1):
        x[row] = (x[row] - a[row, row + 1 :] @ x[row + 1 :]) / a[row, row]
    return x


# --------------------------------------------------------------------------- #
# Newton


@dataclass
class NewtonReport:
    converged: bool
    iterations: int
    final_residual_norm: float
    step_damping_history: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)
    tol_used: float = 0.0
    reason: str = ""


def newton(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    u0: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 50,
    *,
    weight: float = 1.0,
    noise_floor: Optional[Callable[[np.ndarray], float]] = None,
    barrier: float = 1e-6,
    max_halvings: int = 30,
) -> tuple[np.ndarray, NewtonReport]:
    """Damped Newton for ``residual(u) = 0`` with a banded SPD-or-not jacobian.

    ``jacobian(u)`` returns lower band storage.  The norm is
    ``sqrt(weight * sum(r**2))``.  ``noise_floor(u)``, when given, bounds the
    rounding error of ``residual(u)``; the effective tolerance is the larger of
    ``tol`` and that floor.  Failures are reported, never raised.
    """

    def norm(r):
        return float(np.sqrt(weight * np.dot(r, r)))

    u = np.array(u0, dtype=float)
    report = NewtonReport(False, 0, np.inf)
    if np.min(1.0 + u) <= barrier:
        report.reason = "barrier violated by initial guess"
        return u, report
    r = residual(u)
    rn = norm(r)
    report.residual_history.append(rn)
    for it in range(max_iter + 1):
        tol_eff = max(tol, noise_floor(u)) if noise_floor is not None else tol
        report.tol_used = tol_eff
        report.final_residual_norm = rn
        if rn <= tol_eff:
            report.converged = True
            return u, report
        if not np.isfinite(rn):
            report.reason = "non-finite residual"
            return u, report
        if it == max_iter:
            report.reason = "max_iter reached"
            return u, report
        try:
            fac = band_factor(jacobian(u), allow_indefinite=True)
        except NonPositivePivot:
            report.reason = "jacobian singular"
            return u, report
        delta = band_solve(fac, -r)
        step = 1.0
        for _ in range(max_halvings + 1):
            trial = u + step * delta
            if np.min(1.0 + trial) > barrier:
                r_trial = residual(trial)
                rn_trial = norm(r_trial)
                if rn_trial < rn:
                    break
            step *= 0.5
        else:
            report.reason = "line search failed"
            if np.min(1.0 + u + delta) <= barrier:
                report.reason = "barrier violation"
            return u, report
        u, r, rn = trial, r_trial, rn_trial
        report.iterations = it + 1
        report.step_damping_history.append(step)
        report.residual_history.append(rn)
    return u, report  # pragma: no cover


# --------------------------------------------------------------------------- #
# eigenvalues


@dataclass(frozen=True)
class EigResult:
    value: float
    vector: np.ndarray
    converged: bool
    iterations: int


def smallest_eig(
    ab: np.ndarray,
    mass: np.ndarray,
    shift: float = 0.0,
    rtol: float = 1e-11,
    max_iter: int = 500,
    seed: int = 0,
) -> EigResult:
    """Eigenvalue of ``K z = mu M z`` nearest ``shift`` by inverse iteration.

    ``M`` is diagonal (passed as a vector).  With the default shift 0 and an
    SPD pencil this is the smallest eigenvalue.  The Rayleigh quotient is
    returned; ``converged`` is False if ``rtol`` was not met.  The test
    tolerates the rounding level of the banded product, which for stiff
    operators exceeds ``rtol * |mu|``.
    """
    mass = np.asarray(mass, dtype=float)
    if np.any(mass <= 0):
        raise ValueError("mass must be positive")
    shifted = np.array(ab, dtype=float)
    shifted[0] -= shift * mass
    fac = band_factor(shifted, allow_indefinite=True)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(mass.size)
    x /= np.sqrt(x @ (mass * x))
    abs_ab = np.abs(ab)
    mu_prev = np.inf
    for it in range(1, max_iter + 1):
        y = band_solve(fac, mass * x)
        x = y / np.sqrt(y @ (mass * y))
        kx = band_matvec(ab, x)
        mu = float(x @ kx)
        noise = 32 * np.finfo(float).eps * float(np.abs(x) @ band_matvec(abs_ab, np.abs(x)))
        if abs(mu - mu_prev) <= max(rtol * abs(mu), noise):
            return EigResult(mu, x, True, it)
        mu_prev = mu
    return EigResult(mu, x, False, max_iter)


# --------------------------------------------------------------------------- #
# fused Newton for the MEMS family  (K + s I) u + lam/(1+u)^2 = rhs

NEWTON_STATUS = {
    0: "",
    1: "max_iter reached",
    2: "jacobian singular",
    3: "line search failed",
    4: "barrier violation",
    5: "non-finite residual",
    6: "barrier violated by initial guess",
}


@njit(cache=True, nogil=True)
def _mems_residual(ab, shift, rhs, lam, u, out):
    r = _band_matvec(ab, u)
    for i in range(u.shape[0]):
        g = 1.0 + u[i]
        out[i] = r[i] + shift * u[i] + lam / (g * g) - rhs[i]


@njit(cache=True, nogil=True)
def _wnorm(r, weight):
    s = 0.0
    for i in range(r.shape[0]):
        s += r[i] * r[i]
    return np.sqrt(weight * s)


@njit(cache=True, nogil=True)
def _mems_newton(ab, shift, rhs, lam, u0, weight, tol, max_iter, barrier, max_halvings, hist, damping, equivariant):
    n = u0.shape[0]
    eps = 2.220446049250313e-16
    abs_ab = np.abs(ab)
    u = u0.copy()
    for i in range(n):
        if not 1.0 + u[i] > barrier:
            return u, 6, 0, np.inf, tol, 0
    r = np.empty(n)
    r_trial = np.empty(n)
    _mems_residual(ab, shift, rhs, lam, u, r)
    rn = _wnorm(r, weight)
    hist[0] = rn
    jac = np.empty_like(ab)
    noise = np.empty(n)
    for it in range(max_iter + 1):
        au = _band_matvec(abs_ab, np.abs(u))
        for i in range(n):
            g = 1.0 + u[i]
            noise[i] = au[i] + shift * abs(u[i]) + lam / (g * g) + abs(rhs[i])
        tol_eff = max(tol, 4.0 * eps * _wnorm(noise, weight))
        if rn <= tol_eff:
            return u, 0, it, rn, tol_eff, it + 1
        if not np.isfinite(rn):
            return u, 5, it, rn, tol_eff, it + 1
        if it == max_iter:
            return u, 1, it, rn, tol_eff, it + 1
        jac[:, :] = ab
        for i in range(n):
            g = 1.0 + u[i]
            jac[0, i] += shift - 2.0 * lam / (g * g * g)
        if equivariant:
            delta, info = _mirror_average_solve(jac, -r, True)
        else:
            lb, d, info = _ldlt_banded(jac, True)
            if info == 0:
                delta = _ldlt_solve(lb, d, -r)
        if info:
            return u, 2, it, rn, tol_eff, it + 1
        step = 1.0
        accepted = False
        hit_barrier = False
        for _ in range(max_halvings + 1):
            trial = u + step * delta
            ok = True
            for i in range(n):
                if not 1.0 + trial[i] > barrier:
                    ok = False
                    break
            if ok:
                _mems_residual(ab, shift, rhs, lam, trial, r_trial)
                rn_trial = _wnorm(r_trial, weight)
                if rn_trial < rn:
                    accepted = True
                    break
            else:
                hit_barrier = True
            step *= 0.5
        if not accepted:
            return u, 4 if hit_barrier else 3, it, rn, tol_eff, it + 1
        u = trial
        r[:] = r_trial
        rn = rn_trial
        hist[it + 1] = rn
        damping[it] = step
    return u, 1, max_iter, rn, tol, max_iter + 1


def mems_newton(
    ab: np.ndarray,
    shift: float,
    rhs: np.ndarray,
    lam: float,
    u0: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 50,
    *,
    weight: float = 1.0,
    barrier: float = 1e-6,
    max_halvings: int = 30,
    equivariant: bool = False,
) -> tuple[np.ndarray, NewtonReport]:
    """Compiled equivalent of :func:`newton` for ``(K + shift I) u + lam/(1+u)^2 = rhs``.

    ``shift = 1/dt, rhs = u_n/dt`` is one implicit Euler step; ``shift = 0,
    rhs = 0`` is the steady problem.  The rounding floor of the residual is
    built in.  ``equivariant`` uses the reflection-averaged linear solve so
    that mirror-symmetric data stay exactly mirror-symmetric.
    """
    hist = np.empty(max_iter + 2)
    damping = np.empty(max_iter + 1)
    u, status, iters, rn, tol_eff, nh = _mems_newton(
        np.ascontiguousarray(ab, dtype=float), float(shift), np.ascontiguousarray(rhs, dtype=float),
        float(lam), np.ascontiguousarray(u0, dtype=float), float(weight), float(tol), int(max_iter),
        float(barrier), int(max_halvings), hist, damping, bool(equivariant),
    )
    report = NewtonReport(
        converged=status == 0,
        iterations=int(iters),
        final_residual_norm=float(rn),
        step_damping_history=damping[:iters].tolist(),
        residual_history=hist[:nh].tolist(),
        tol_used=float(tol_eff),
        reason=NEWTON_STATUS[int(status)],
    )
    return u, report
