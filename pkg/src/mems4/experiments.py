"""Pull-in thresholds, lambda sweeps, decay-rate fits and Lojasiewicz exponents."""
from __future__ import annotations

import enum
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .hyperbolic import HyperbolicRunConfig, run_wave
from .mesh_ops import Grid, assemble_operator, dual_norm, l2_norm
from .model import Params, energy_gap, residual_change
from .parabolic import OutcomeKind, ParabolicRunConfig, RunOutcome, Trajectory, run
from .steady import SteadySolution

log = logging.getLogger(__name__)

RunConfig = Union[ParabolicRunConfig, HyperbolicRunConfig]


class ModelKind(str, enum.Enum):
    PARABOLIC = "parabolic"
    HYPERBOLIC = "hyperbolic"


DEFAULT_BRACKETS = {ModelKind.PARABOLIC: (0.3, 0.6), ModelKind.HYPERBOLIC: (3.5, 5.0)}


class BracketInvalid(ValueError):
    def __init__(self, message: str, lo_outcome: RunOutcome, hi_outcome: RunOutcome):
        super().__init__(message)
        self.lo_outcome = lo_outcome
        self.hi_outcome = hi_outcome


class InsufficientSamples(ValueError):
    """Fewer usable points than a regression needs."""


def worker_count() -> int:
    """Parallelism for independent runs; ``MEMS4_THREADS`` caps it."""
    env = os.environ.get("MEMS4_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer MEMS4_THREADS=%r", env)
    return os.cpu_count() or 1


def _parallel_map(fn: Callable, items: Sequence) -> list:
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def kind_of(cfg: RunConfig) -> ModelKind:
    return ModelKind.HYPERBOLIC if isinstance(cfg, HyperbolicRunConfig) else ModelKind.PARABOLIC


def run_any(cfg: RunConfig) -> tuple[Trajectory, RunOutcome]:
    return run_wave(cfg) if isinstance(cfg, HyperbolicRunConfig) else run(cfg)


def classify(base: RunConfig, lam: float) -> RunOutcome:
    """Outcome at ``lam``; only the event matters, so samples are sparse."""
    cfg = base.with_lambda(lam, sample_stride=10**9, snapshot_times=(), snapshot_stride=0, steady=None)
    return run_any(cfg)[1]


def _stabilizing(outcome: RunOutcome) -> bool:
    return outcome.kind is not OutcomeKind.QUENCHED


# ---------------------------------------------------------------- thresholds


@dataclass
class ThresholdResult:
    """Bisection result; ``runs`` is sorted by lambda."""

    lambda_star: float
    bracket: tuple
    runs: list
    model_kind: ModelKind
    base: Optional[RunConfig] = field(default=None, repr=False)

    @property
    def timeouts(self) -> list:
        """Lambdas whose run hit ``t_end`` and were counted as stabilizing."""
        return [lam for lam, out in self.runs if out.kind is OutcomeKind.TIMEOUT]

    def reverify(self) -> tuple[RunOutcome, RunOutcome]:
        """Re-run both bracket ends; the classification is deterministic."""
        if self.base is None:
            raise ValueError("no base configuration attached")
        lo, hi = self.bracket
        return classify(self.base, lo), classify(self.base, hi)

    def as_dict(self) -> dict:
        return {
            "model_kind": self.model_kind.value,
            "lambda_star": self.lambda_star,
            "bracket": list(self.bracket),
            "runs": [{"lambda": lam, "outcome": out.kind.value, "t_event": out.t_event, "note": out.note} for lam, out in self.runs],
            "timeouts": self.timeouts,
        }


def pullin_bisect(
    base: RunConfig,
    lo: Optional[float] = None,
    hi: Optional[float] = None,
    rel_tol: float = 1e-3,
) -> ThresholdResult:
    """Bisect the smallest quenching lambda of the flow described by ``base``.

    Timeouts count as stabilizing and are listed in ``ThresholdResult.timeouts``.
    Raises BracketInvalid unless ``lo`` stabilizes and ``hi`` quenches.
    """
    kind = kind_of(base)
    d_lo, d_hi = DEFAULT_BRACKETS[kind]
    lo = d_lo if lo is None else float(lo)
    hi = d_hi if hi is None else float(hi)
    if not 0 <= lo < hi:
        raise ValueError(f"need 0 <= lo < hi, got [{lo}, {hi}]")
    if not rel_tol > 0:
        raise ValueError("rel_tol must be positive")

    out_lo, out_hi = _parallel_map(lambda lam: classify(base, lam), [lo, hi])
    if not (_stabilizing(out_lo) and out_hi.quenched):
        raise BracketInvalid(
            f"bracket [{lo}, {hi}] gives {out_lo.kind.value} / {out_hi.kind.value}", out_lo, out_hi
        )
    runs = [(lo, out_lo), (hi, out_hi)]
    while (hi - lo) > rel_tol * lo:
        mid = 0.5 * (lo + hi)
        out = classify(base, mid)
        runs.append((mid, out))
        if out.quenched:
            hi = mid
        else:
            lo = mid
        log.info("bisect %s: lambda=%.6g -> %s", kind.value, mid, out.kind.value)
    runs.sort(key=lambda r: r[0])
    return ThresholdResult(0.5 * (lo + hi), (lo, hi), runs, kind, base)


# --------------------------------------------------------------------- sweeps


@dataclass
class SweepEntry:
    lam: float
    outcome: RunOutcome
    trajectory: Trajectory
    final_profile: np.ndarray


@dataclass
class SweepTable:
    model_kind: ModelKind
    entries: list
    probe: float

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([e.lam for e in self.entries])


def lambda_sweep(
    base: RunConfig,
    lambdas: Iterable[float],
    probe: float = 0.0,
    snapshot_times: Sequence[float] = (),
) -> SweepTable:
    """One run per lambda (independent, possibly concurrent); sorted by lambda."""
    lambdas = sorted(float(lam) for lam in lambdas)
    times = tuple(snapshot_times) or tuple(base.snapshot_times)

    def job(lam):
        traj, outcome = run_any(base.with_lambda(lam, probe=probe, snapshot_times=times, steady=None))
        return SweepEntry(lam, outcome, traj, traj.final_u)

    return SweepTable(kind_of(base), _parallel_map(job, lambdas), probe)


@dataclass
class MonotonicityReport:
    violations: list  # (t, lam_lo, lam_hi, u_lo, u_hi)
    checked_pairs: int
    first_violation_lambda: Optional[float]

    @property
    def count(self) -> int:
        return len(self.violations)


def probe_value(entry: SweepEntry, t: float, grid: Grid, probe: float) -> Optional[float]:
    """``u(t, probe)`` from a snapshot taken at (or within half a step of) ``t``.

    A run that stabilized before ``t`` is represented by its final state.
    """
    j = grid.nearest_node(probe)
    for ts, u in entry.trajectory.snapshots:
        if abs(ts - t) <= 1e-9 * max(1.0, abs(t)):
            return float(u[j])
    if entry.outcome.kind is OutcomeKind.STABILIZED and t >= entry.outcome.t_event and entry.final_profile is not None:
        return float(entry.final_profile[j])
    return None


def monotonicity_report(sweep: SweepTable, times: Sequence[float], grid: Grid, tol: float = 1e-10) -> MonotonicityReport:
    """Check ``u(t, probe; lam_i) >= u(t, probe; lam_{i+1}) - tol`` for consecutive lambdas.

    Pairs where either run has no value at ``t`` (for example it quenched
    earlier) are skipped.  ``first_violation_lambda`` is the larger lambda of
    the first violating pair in lambda order.
    """
    violations = []
    checked = 0
    for a, b in zip(sweep.entries, sweep.entries[1:]):
        for t in times:
            ua, ub = probe_value(a, t, grid, sweep.probe), probe_value(b, t, grid, sweep.probe)
            if ua is None or ub is None:
                continue
            checked += 1
            if ua < ub - tol:
                violations.append((float(t), a.lam, b.lam, ua, ub))
    first = min((v[2] for v in violations), default=None)
    return MonotonicityReport(violations, checked, first)


@dataclass
class QuenchReport:
    entries: list  # (lam, t_quench or None)
    strictly_decreasing: bool

    @property
    def excluded(self) -> list:
        return [lam for lam, tq in self.entries if tq is None]


def quench_monotonicity(base: RunConfig, lambdas: Iterable[float]) -> QuenchReport:
    """Quench time per lambda; lambdas that do not quench are marked absent."""
    lambdas = sorted(float(lam) for lam in lambdas)
    outcomes = _parallel_map(lambda lam: classify(base, lam), lambdas)
    entries = [(lam, out.t_event if out.quenched else None) for lam, out in zip(lambdas, outcomes)]
    times = [tq for _, tq in entries if tq is not None]
    decreasing = all(t1 > t2 for t1, t2 in zip(times, times[1:]))
    return QuenchReport(entries, decreasing)


# ----------------------------------------------------------------- rate fits


@dataclass(frozen=True)
class RateFit:
    gamma_hat: float
    c_hat: float
    fit_window: tuple
    r_squared: float
    alt_exponential_rate: float
    alt_r_squared: float
    sample_count: int


def _linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least-squares ``y = a + b x``; returns ``(b, a, r^2)``."""
    coeffs, ss_res, *_ = np.polyfit(x, y, 1, full=True)
    slope, intercept = coeffs
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    resid = float(ss_res[0]) if len(ss_res) else 0.0
    r2 = 1.0 - resid / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def fit_rate(
    t: np.ndarray,
    dist: np.ndarray,
    *,
    floor: float = 1e-12,
    min_samples: int = 20,
) -> RateFit:
    """Fit ``d(t) ~ C (1+t)^-gamma`` and ``d(t) ~ exp(rate t)`` on the last decade of time.

    The window is ``[t_f/10, t_f]``, where ``t_f`` is the last sample with
    ``d > floor``; only samples with ``d > floor`` enter.
    """
    t = np.asarray(t, dtype=float)
    d = np.asarray(dist, dtype=float)
    ok = np.isfinite(d) & (d > floor) & np.isfinite(t)
    if np.count_nonzero(ok) < min_samples:
        raise InsufficientSamples(f"{np.count_nonzero(ok)} samples above {floor:g}, need {min_samples}")
    t_f = float(np.max(t[ok]))
    window = ok & (t >= 0.1 * t_f) & (t <= t_f)
    n = int(np.count_nonzero(window))
    if n < min_samples:
        raise InsufficientSamples(f"{n} samples in the window [{0.1 * t_f:g}, {t_f:g}], need {min_samples}")
    tw, logd = t[window], np.log(d[window])
    slope, intercept, r2 = _linear_fit(np.log1p(tw), logd)
    rate, _, r2_exp = _linear_fit(tw, logd)
    return RateFit(-slope, float(np.exp(intercept)), (float(tw.min()), t_f), r2, rate, r2_exp, n)


def fit_trajectory_rate(traj: Trajectory, **kwargs) -> RateFit:
    """:func:`fit_rate` on the ``dist_to_steady`` column of a run."""
    return fit_rate(traj.column("t"), traj.column("dist_to_steady"), **kwargs)


# ------------------------------------------------------------ LS exponents


@dataclass(frozen=True)
class LSFit:
    theta_hat: float
    slope: float
    sample_count: int
    energy_range: tuple
    r_squared: float


def ls_regression(g: np.ndarray, delta_e: np.ndarray, *, floor: float = 1e-13, min_samples: int = 20) -> LSFit:
    """Slope of ``log g`` against ``log |dE|``; ``theta = 1 - slope``.

    Points with ``|dE| <= 10 floor`` (the decade above the floor) are dropped.
    """
    g = np.asarray(g, dtype=float)
    de = np.abs(np.asarray(delta_e, dtype=float))
    ok = np.isfinite(g) & np.isfinite(de) & (de > 10.0 * floor) & (g > 0)
    n = int(np.count_nonzero(ok))
    if n < min_samples:
        raise InsufficientSamples(f"{n} usable (g, dE) pairs, need {min_samples}")
    slope, _, r2 = _linear_fit(np.log(de[ok]), np.log(g[ok]))
    return LSFit(1.0 - slope, slope, n, (float(de[ok].min()), float(de[ok].max())), r2)


def ls_pairs(
    traj: Trajectory,
    psi: SteadySolution,
    p: Params,
    grid: Grid,
    kind: ModelKind = ModelKind.PARABOLIC,
) -> tuple[np.ndarray, np.ndarray]:
    """``(g, dE)`` for every snapshot of ``traj``.

    Parabolic: ``g`` is the L2 norm of the steady residual.  Hyperbolic: the
    dual norm of that residual, and ``dE`` includes the kinetic energy.
    """
    K_op = assemble_operator(grid, p.B, p.T)
    K = K_op.scaled()
    velocities = dict((t, v) for t, v in traj.velocity_snapshots)
    g, de = [], []
    for t, u in traj.snapshots:
        res = residual_change(u, psi.psi, p, K_op)
        gap = energy_gap(u, psi.psi, p, grid, K)
        if kind is ModelKind.HYPERBOLIC:
            v = velocities.get(t)
            if v is None:
                raise ValueError("hyperbolic LS pairs need velocity snapshots")
            gap += 0.5 * l2_norm(v, grid) ** 2
            g.append(dual_norm(res, grid, p.B, p.T))
        else:
            g.append(l2_norm(res, grid))
        de.append(gap)
    return np.array(g), np.array(de)


def estimate_ls_exponent(
    traj: Trajectory,
    psi: SteadySolution,
    p: Params,
    grid: Grid,
    kind: ModelKind = ModelKind.PARABOLIC,
    **kwargs,
) -> LSFit:
    g, de = ls_pairs(traj, psi, p, grid, kind)
    return ls_regression(g, de, **kwargs)
