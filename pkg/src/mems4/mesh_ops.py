"""Uniform 1D grid, clamped finite-difference operators, and discrete norms.

Fields hold values at the interior nodes ``x_j = a + j*h`` for ``j = 1..N-1``.
The boundary nodes carry ``u = 0`` and ``u' = 0``; the slope condition is
imposed through the ghost reflection ``u_{-1} = u_1`` (mirrored on the right).

Operators are stored in LAPACK-style *lower* band form: ``bands[k, j]`` is the
entry ``(j + k, j)``.  ``bands[0]`` is the diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .linsolve import band_factor, band_matvec, band_solve, band_to_dense, smallest_eig


class DegenerateGrid(ValueError):
    pass


class InvalidCoefficient(ValueError):
    pass


MIN_CELLS = 8


@dataclass(frozen=True)
class Grid:
    a: float
    b: float
    n_cells: int

    @property
    def h(self) -> float:
        return (self.b - self.a) / self.n_cells

    @property
    def interior_count(self) -> int:
        return self.n_cells - 1

    @property
    def measure(self) -> float:
        """|Omega| = b - a."""
        return self.b - self.a

    @property
    def x(self) -> np.ndarray:
        return self.a + self.h * np.arange(1, self.n_cells)

    @property
    def x_full(self) -> np.ndarray:
        return self.a + self.h * np.arange(self.n_cells + 1)

    def nearest_node(self, coord: float) -> int:
        """Index into a Field of the interior node closest to ``coord``."""
        return int(np.argmin(np.abs(self.x - coord)))

    def pad(self, u: np.ndarray) -> np.ndarray:
        """Field with the two zero boundary values attached."""
        return np.concatenate(([0.0], u, [0.0]))


def build_grid(a: float, b: float, n_cells: int) -> Grid:
    if not b > a:
        raise DegenerateGrid(f"need b > a, got a={a}, b={b}")
    if int(n_cells) != n_cells or n_cells < MIN_CELLS:
        raise DegenerateGrid(f"need an integer N >= {MIN_CELLS}, got {n_cells}")
    return Grid(float(a), float(b), int(n_cells))


@dataclass(frozen=True)
class OperatorMatrix:
    """Symmetric pentadiagonal ``B*D4 - T*D2`` on the interior nodes.

    ``weighted=False`` is the operator form ``K_op``; ``weighted=True`` is the
    quadrature form ``K = h*K_op``.
    """

    bands: np.ndarray
    grid: Grid
    B: float
    T: float
    weighted: bool = False
    _factor: list = field(default_factory=list, repr=False, compare=False)

    @property
    def bandwidth(self) -> int:
        return self.bands.shape[0] - 1

    @property
    def size(self) -> int:
        return self.bands.shape[1]

    def scaled(self) -> "OperatorMatrix":
        """Quadrature-weighted form ``h*K_op`` (idempotent)."""
        if self.weighted:
            return self
        return OperatorMatrix(self.bands * self.grid.h, self.grid, self.B, self.T, True)

    def unscaled(self) -> "OperatorMatrix":
        if not self.weighted:
            return self
        return OperatorMatrix(self.bands / self.grid.h, self.grid, self.B, self.T, False)

    def matvec(self, u: np.ndarray) -> np.ndarray:
        return band_matvec(self.bands, u)

    def abs_matvec(self, u: np.ndarray) -> np.ndarray:
        """``|K| |u|``; bounds the rounding error of :meth:`matvec`."""
        return band_matvec(np.abs(self.bands), np.abs(u))

    def dense(self) -> np.ndarray:
        return band_to_dense(self.bands)

    def factor(self):
        # cached; the dataclass is frozen so the bands never change
        if not self._factor:
            self._factor.append(band_factor(self.bands))
        return self._factor[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return band_solve(self.factor(), rhs)

    def bilinear_form(self, u: np.ndarray, w: np.ndarray) -> float:
        """``u^T K w`` evaluated as a weighted sum of difference products.

        Uses ``D4 = G^T W G / h^4`` (second differences at every node including
        the boundary ones, trapezoid weights ``W``) and ``-D2 = D^T D / h^2``.
        Algebraically identical to the banded product but free of the
        cancellation between entries of size ``h^-4``.
        """
        value = _clamped_bilinear(
            np.ascontiguousarray(u, dtype=float), np.ascontiguousarray(w, dtype=float), self.grid.h, self.B, self.T
        )
        return float(value if self.weighted else value / self.grid.h)

    def quadratic_form(self, u: np.ndarray) -> float:
        return self.bilinear_form(u, u)


@njit(cache=True, nogil=True)
def _clamped_bilinear(u, w, h, B, T):
    # nodes 0..n+1 with zero boundary values; ghost reflection at both ends
    n = u.shape[0]
    second = 0.0
    for j in range(n + 2):
        if j == 0:
            su, sw = 2.0 * u[0], 2.0 * w[0]
        elif j == n + 1:
            su, sw = 2.0 * u[n - 1], 2.0 * w[n - 1]
        else:
            um = u[j - 2] if j >= 2 else 0.0
            up = u[j] if j <= n - 1 else 0.0
            wm = w[j - 2] if j >= 2 else 0.0
            wp = w[j] if j <= n - 1 else 0.0
            su = um - 2.0 * u[j - 1] + up
            sw = wm - 2.0 * w[j - 1] + wp
        weight = 0.5 if (j == 0 or j == n + 1) else 1.0
        second += weight * su * sw
    first = 0.0
    for j in range(n + 1):
        du = (u[j] if j < n else 0.0) - (u[j - 1] if j >= 1 else 0.0)
        dw = (w[j] if j < n else 0.0) - (w[j - 1] if j >= 1 else 0.0)
        first += du * dw
    return B * second / h**3 + T * first / h


def _biharmonic_bands(n: int, h: float) -> np.ndarray:
    bands = np.zeros((3, n))
    bands[0] = 6.0
    bands[0, 0] = bands[0, -1] = 7.0
    bands[1, : n - 1] = -4.0
    bands[2, : n - 2] = 1.0
    return bands / h**4


def _laplacian_bands(n: int, h: float) -> np.ndarray:
    bands = np.zeros((3, n))
    bands[0] = -2.0
    bands[1, : n - 1] = 1.0
    return bands / h**2


def assemble_operator(grid: Grid, B: float, T: float) -> OperatorMatrix:
    """Clamped ``K_op = B*D4 - T*D2`` in operator (unweighted) form."""
    if not B > 0:
        raise InvalidCoefficient(f"bending coefficient B must be > 0, got {B}")
    if not T >= 0:
        raise InvalidCoefficient(f"stretching coefficient T must be >= 0, got {T}")
    n, h = grid.interior_count, grid.h
    bands = B * _biharmonic_bands(n, h) - T * _laplacian_bands(n, h)
    return OperatorMatrix(bands, grid, float(B), float(T), weighted=False)


def l2_norm(u: np.ndarray, grid: Grid) -> float:
    u = np.asarray(u, dtype=float)
    return float(np.sqrt(grid.h * np.dot(u, u)))


def h2d_norm(u: np.ndarray, grid: Grid, K: OperatorMatrix) -> float:
    """Discrete ``(int B|u''|^2 + T|u'|^2)^(1/2)``, i.e. ``sqrt(u^T K u)``."""
    return float(np.sqrt(max(K.scaled().quadratic_form(u), 0.0)))


def linf_norm(u: np.ndarray) -> float:
    u = np.asarray(u, dtype=float)
    return float(np.max(np.abs(u))) if u.size else 0.0


def dual_norm(w: np.ndarray, grid: Grid, B: float, T: float) -> float:
    """V' norm induced by ``(I + B D^4 - T D^2)^{-1}`` with lumped mass.

    With ``M = h I`` and ``K = h K_op`` the system ``(M + K) z = M w`` reduces
    to ``(I + K_op) z = w``.
    """
    w = np.asarray(w, dtype=float)
    shifted = _shifted_operator(grid, B, T)
    z = shifted.solve(w)
    return float(np.sqrt(max(grid.h * np.dot(w, z), 0.0)))


_SHIFTED_CACHE: dict = {}


def _shifted_operator(grid: Grid, B: float, T: float) -> OperatorMatrix:
    key = (grid, float(B), float(T))
    op = _SHIFTED_CACHE.get(key)
    if op is None:
        base = assemble_operator(grid, B, T)
        bands = base.bands.copy()
        bands[0] += 1.0
        op = OperatorMatrix(bands, grid, base.B, base.T)
        if len(_SHIFTED_CACHE) > 32:
            _SHIFTED_CACHE.clear()
        _SHIFTED_CACHE[key] = op
    return op


def poincare_constant(grid: Grid, K: OperatorMatrix) -> float:
    """alpha_2 with ``||u||_L2 <= alpha_2 ||u||_{H2_D}``: ``1/sqrt(mu_min)``."""
    mu = smallest_eig(K.unscaled().bands, np.ones(K.size)).value
    return float(1.0 / np.sqrt(mu))
