"""Implicit Euler for ``u_t + B u'''' - T u'' = -lambda/(1+u)^2`` with clamped ends.

Each step solves ``(u - u_n)/dt + K_op u + lambda/(1+u)^2 = 0`` by damped
Newton.  On a failed step ``dt`` is halved; after ``max_halvings`` failures the
run is treated as approaching touchdown and ``dt`` keeps halving down to
``dt_min`` (quench refinement).
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .linsolve import NewtonReport, mems_newton
from .mesh_ops import Grid, OperatorMatrix, assemble_operator, l2_norm
from .model import Params, energy_parabolic
from .steady import SteadySolution

log = logging.getLogger(__name__)


class StepNewtonFailed(RuntimeError):
    def __init__(self, message: str, report: NewtonReport):
        super().__init__(message)
        self.report = report


class OutcomeKind(str, enum.Enum):
    STABILIZED = "Stabilized"
    QUENCHED = "Quenched"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class RunOutcome:
    kind: OutcomeKind
    t_event: float
    certificate: Optional[float] = None
    note: str = ""

    @property
    def quenched(self) -> bool:
        return self.kind is OutcomeKind.QUENCHED


@dataclass
class Trajectory:
    """Per-sample diagnostics plus optional field snapshots.

    ``l2_ut`` is the difference quotient ``||u_{n+1} - u_n|| / dt`` of the step
    ending at the sample (NaN for the initial sample).  ``l2_v`` and
    ``velocity_snapshots`` are only filled by the hyperbolic integrator.
    """

    t: list = field(default_factory=list)
    min_u: list = field(default_factory=list)
    u_probe: list = field(default_factory=list)
    l2_ut: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    dist_to_steady: list = field(default_factory=list)
    l2_v: list = field(default_factory=list)
    asymmetry: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    velocity_snapshots: list = field(default_factory=list)
    probe_coordinate: float = 0.0
    final_u: Optional[np.ndarray] = None

    def column(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=float)

    def __len__(self) -> int:
        return len(self.t)

    def value_at(self, t: float, name: str = "u_probe") -> float:
        """Linear interpolation of a sampled column at time ``t``."""
        return float(np.interp(t, self.column("t"), self.column(name)))

    def max_asymmetry(self) -> float:
        return float(np.max(self.asymmetry)) if self.asymmetry else 0.0


@dataclass
class ParabolicRunConfig:
    params: Params
    grid: Grid
    u0: np.ndarray
    dt: float = 1e-3
    t_end: float = 200.0
    steady_tol: float = 1e-8
    quench_floor: float = 1e-3
    snapshot_times: Sequence[float] = ()
    probe: float = 0.0
    sample_stride: int = 1
    snapshot_stride: int = 0
    steady: Optional[SteadySolution] = None
    dt_min: float = 1e-13
    max_halvings: int = 10
    newton_tol: float = 1e-10

    def __post_init__(self):
        self.u0 = np.asarray(self.u0, dtype=float)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.u0.shape != (self.grid.interior_count,):
            raise ValueError(f"u0 must have {self.grid.interior_count} entries")
        if not np.all(np.isfinite(self.u0)) or not np.min(1.0 + self.u0) > 0:
            raise ValueError("u0 must be finite with min(1 + u0) > 0")
        if self.sample_stride < 1:
            raise ValueError("sample_stride must be >= 1")

    def operator(self) -> OperatorMatrix:
        return assemble_operator(self.grid, self.params.B, self.params.T)

    def with_lambda(self, lam: float, **changes) -> "ParabolicRunConfig":
        import dataclasses

        return dataclasses.replace(self, params=self.params.with_lambda(lam), **changes)


def step(u_n: np.ndarray, cfg: ParabolicRunConfig, dt: Optional[float] = None, K_op: Optional[OperatorMatrix] = None) -> np.ndarray:
    """One implicit Euler step; raises StepNewtonFailed."""
    dt = cfg.dt if dt is None else dt
    K_op = K_op or cfg.operator()
    u_new, report = mems_newton(
        K_op.bands, 1.0 / dt, u_n / dt, cfg.params.lam, u_n, cfg.newton_tol, weight=cfg.grid.h, equivariant=True
    )
    if not report.converged:
        raise StepNewtonFailed(f"implicit step failed ({report.reason}) with dt={dt:.3e}", report)
    return u_new


def _asymmetry(u: np.ndarray) -> float:
    return float(np.max(np.abs(u - u[::-1]))) if u.size else 0.0


class _Recorder:
    def __init__(self, cfg, K, probe_index, with_velocity=False):
        self.cfg = cfg
        self.K = K
        self.probe_index = probe_index
        self.traj = Trajectory(probe_coordinate=cfg.probe)
        self.with_velocity = with_velocity

    def sample(self, t, u, l2_ut, energy, l2_v=None):
        tr = self.traj
        tr.t.append(t)
        tr.min_u.append(float(np.min(u)))
        tr.u_probe.append(float(u[self.probe_index]))
        tr.l2_ut.append(l2_ut)
        tr.energy.append(energy)
        steady = self.cfg.steady
        tr.dist_to_steady.append(l2_norm(u - steady.psi, self.cfg.grid) if steady is not None else np.nan)
        tr.asymmetry.append(_asymmetry(u))
        if self.with_velocity:
            tr.l2_v.append(np.nan if l2_v is None else l2_v)


def run(cfg: ParabolicRunConfig) -> tuple[Trajectory, RunOutcome]:
    """Integrate until touchdown, stabilization or ``t_end``."""
    p, grid = cfg.params, cfg.grid
    K_op = cfg.operator()
    K = K_op.scaled()
    rec = _Recorder(cfg, K, grid.nearest_node(cfg.probe))
    snaps = sorted(float(s) for s in cfg.snapshot_times if 0 <= s <= cfg.t_end)

    u = cfg.u0.copy()
    t = 0.0
    energy = energy_parabolic(u, p, grid, K)
    rec.sample(t, u, np.nan, energy)
    while snaps and snaps[0] <= 0.0:
        rec.traj.snapshots.append((snaps.pop(0), u.copy()))

    dt = cfg.dt
    halvings = 0
    n_steps = 0
    # t = t_anchor + k * dt avoids drift from repeated addition
    t_anchor, k = 0.0, 0
    floor = -1.0 + cfg.quench_floor
    while True:
        if t >= cfg.t_end * (1 - 1e-14):
            rec.traj.final_u = u.copy()
            return rec.traj, RunOutcome(OutcomeKind.TIMEOUT, t)
        dt_try = min(dt, cfg.t_end - t)
        hitting_snapshot = bool(snaps) and snaps[0] - t <= dt_try * (1 + 1e-12)
        if hitting_snapshot:
            dt_try = snaps[0] - t
        try:
            u_new = step(u, cfg, dt_try, K_op)
        except StepNewtonFailed:
            dt *= 0.5
            halvings += 1
            t_anchor, k = t, 0
            if halvings == cfg.max_halvings:
                log.debug("quench suspected at t=%.6g (min u=%.6g); refining dt", t, np.min(u))
            if dt < cfg.dt_min:
                rec.sample(t, u, rec.traj.l2_ut[-1], energy)
                rec.traj.final_u = u.copy()
                return rec.traj, RunOutcome(
                    OutcomeKind.QUENCHED, t, float(np.min(u)), note="dt exhausted before reaching the quench floor"
                )
            continue

        l2_ut = l2_norm(u_new - u, grid) / dt_try
        if hitting_snapshot or dt_try != dt:
            t = snaps.pop(0) if hitting_snapshot else t + dt_try
            t_anchor, k = t, 0
        else:
            k += 1
            t = t_anchor + k * dt
        u = u_new
        n_steps += 1
        energy = energy_parabolic(u, p, grid, K)
        min_u = float(np.min(u))
        quenched = min_u <= floor
        stabilized = l2_ut <= cfg.steady_tol
        if quenched or stabilized or n_steps % cfg.sample_stride == 0 or hitting_snapshot:
            rec.sample(t, u, l2_ut, energy)
        if hitting_snapshot:
            rec.traj.snapshots.append((t, u.copy()))
        elif cfg.snapshot_stride and n_steps % cfg.snapshot_stride == 0:
            rec.traj.snapshots.append((t, u.copy()))
        if quenched or stabilized:
            rec.traj.final_u = u.copy()
        if quenched:
            return rec.traj, RunOutcome(OutcomeKind.QUENCHED, t, min_u)
        if stabilized:
            return rec.traj, RunOutcome(OutcomeKind.STABILIZED, t, l2_ut)


def quench_time(cfg: ParabolicRunConfig) -> Optional[float]:
    """First time with ``min u <= -1 + quench_floor``; None if no touchdown."""
    _, outcome = run(cfg)
    return outcome.t_event if outcome.quenched else None
