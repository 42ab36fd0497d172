"""Scenario files (TOML), CSV series/profiles and JSON reports.

A scenario file holds one run description::

    model = "parabolic"        # or "hyperbolic"
    lambda = 0.4
    B = 0.01
    T = 1.0
    N = 256
    domain = [-1.0, 1.0]
    snapshot_times = [0.5, 78.39]

    [u0]
    kind = "scaled_bump"       # zero | scaled_bump | file
    amplitude = -0.1

Every numeric field is checked against the model invariants before anything
is computed.  CSV values use 17 significant digits, so they re-parse to the
same doubles.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import tomli

from . import __version__
from .mesh_ops import DegenerateGrid, Grid, build_grid
from .model import Params
from .parabolic import Trajectory


class ParseError(ValueError):
    """Unreadable scenario file; ``line`` and ``field`` locate the problem when known."""

    def __init__(self, message: str, *, line: Optional[int] = None, field: Optional[str] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.field = field


class ValidationError(ValueError):
    """A parsed value violates a model or grid invariant."""


MODEL_DEFAULTS = {
    "parabolic": {"B": 0.01, "T": 1.0, "dt": 1e-3, "t_end": 200.0},
    "hyperbolic": {"B": 1.0, "T": 1.0, "dt": 5e-4, "t_end": 50.0},
}

_U0_KINDS = ("zero", "scaled_bump", "file")


@dataclass(frozen=True)
class InitialData:
    kind: str = "zero"
    amplitude: float = 0.0
    path: Optional[str] = None

    def evaluate(self, grid: Grid, base_dir: Path = Path(".")) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros(grid.interior_count)
        if self.kind == "scaled_bump":
            # clamped bump (1 - s^2)^2 on the reference interval s in (-1, 1)
            s = (2.0 * grid.x - (grid.a + grid.b)) / (grid.b - grid.a)
            return self.amplitude * (1.0 - s**2) ** 2
        path = Path(self.path)
        if not path.is_absolute():
            path = base_dir / path
        values = read_profile(path)[1]
        if values.shape != (grid.interior_count,):
            raise ValidationError(
                f"profile {path} has {values.size} values, grid has {grid.interior_count} interior nodes"
            )
        return values


@dataclass(frozen=True)
class RunConfigFile:
    model: str = "parabolic"
    B: float = 0.01
    T: float = 1.0
    lam: float = 0.0
    kappa: float = 0.5
    domain: tuple = (-1.0, 1.0)
    N: int = 256
    dt: float = 1e-3
    t_end: float = 200.0
    u0: InitialData = InitialData()
    u1: InitialData = InitialData()
    probes: tuple = (0.0,)
    snapshot_times: tuple = ()
    output_dir: str = "mems4_out"
    steady_tol: float = 1e-8
    quench_floor: float = 1e-3
    sample_stride: int = 1
    bracket: Optional[tuple] = None
    rel_tol: float = 1e-3
    lambdas: tuple = ()
    lambda_max: Optional[float] = None
    dlambda: float = 0.01
    base_dir: str = field(default=".", repr=False)

    @property
    def params(self) -> Params:
        return Params(self.B, self.T, self.lam, self.kappa)

    @property
    def grid(self) -> Grid:
        return build_grid(self.domain[0], self.domain[1], self.N)

    def initial_u(self) -> np.ndarray:
        return self.u0.evaluate(self.grid, Path(self.base_dir))

    def initial_v(self) -> np.ndarray:
        return self.u1.evaluate(self.grid, Path(self.base_dir))

    def echo(self) -> dict:
        """All fields with defaults filled, in a JSON-friendly form."""
        out = asdict(self)
        out.pop("base_dir")
        out["lambda"] = out.pop("lam")
        for key in ("domain", "probes", "snapshot_times", "lambdas", "bracket"):
            if out[key] is not None:
                out[key] = list(out[key])
        return out

    def with_overrides(self, **changes) -> "RunConfigFile":
        changes = {k: v for k, v in changes.items() if v is not None}
        return validate(replace(self, **changes))


# file key -> (attribute, kind)
_FIELDS = {
    "model": ("model", str),
    "B": ("B", float),
    "T": ("T", float),
    "lambda": ("lam", float),
    "kappa": ("kappa", float),
    "domain": ("domain", "pair"),
    "N": ("N", int),
    "dt": ("dt", float),
    "t_end": ("t_end", float),
    "u0": ("u0", "initial"),
    "u1": ("u1", "initial"),
    "probes": ("probes", "list"),
    "snapshot_times": ("snapshot_times", "list"),
    "output_dir": ("output_dir", str),
    "steady_tol": ("steady_tol", float),
    "quench_floor": ("quench_floor", float),
    "sample_stride": ("sample_stride", int),
    "bracket": ("bracket", "pair"),
    "rel_tol": ("rel_tol", float),
    "lambdas": ("lambdas", "list"),
    "lambda_max": ("lambda_max", float),
    "dlambda": ("dlambda", float),
}


def _line_of(text: str, key: str) -> Optional[int]:
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith(key) and stripped[len(key):].lstrip().startswith(("=", "]")):
            return i
        if stripped == f"[{key}]":
            return i
    return None


def _number(value: Any, kind, key: str, text: str):
    line = _line_of(text, key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"expected a number, got {value!r}", line=line, field=key)
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise ParseError(f"expected an integer, got {value!r}", line=line, field=key)
        return int(value)
    return float(value)


def _initial(value: Any, key: str, text: str) -> InitialData:
    line = _line_of(text, key)
    if isinstance(value, str):
        value = {"kind": value}
    if not isinstance(value, dict):
        raise ParseError("expected a table or a kind name", line=line, field=key)
    unknown = set(value) - {"kind", "amplitude", "path"}
    if unknown:
        raise ParseError(f"unknown keys {sorted(unknown)}", line=line, field=key)
    kind = value.get("kind", "zero")
    if kind not in _U0_KINDS:
        raise ParseError(f"kind must be one of {_U0_KINDS}, got {kind!r}", line=line, field=key)
    amplitude = _number(value.get("amplitude", 0.0), float, key, text)
    path = value.get("path")
    if kind == "file" and not isinstance(path, str):
        raise ParseError("kind 'file' needs a string 'path'", line=line, field=key)
    return InitialData(kind, amplitude, path)


def parse_config_text(text: str, base_dir: Path = Path(".")) -> RunConfigFile:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(f"malformed TOML: {exc}", line=getattr(exc, "lineno", None)) from exc

    model = raw.get("model", "parabolic")
    if model not in MODEL_DEFAULTS:
        raise ParseError(f"model must be 'parabolic' or 'hyperbolic', got {model!r}", line=_line_of(text, "model"), field="model")
    values: dict = dict(MODEL_DEFAULTS[model])
    values["base_dir"] = str(base_dir)
    for key, value in raw.items():
        if key not in _FIELDS:
            raise ParseError("unknown field", line=_line_of(text, key), field=key)
        attr, kind = _FIELDS[key]
        if kind in (float, int):
            values[attr] = _number(value, kind, key, text)
        elif kind is str:
            if not isinstance(value, str):
                raise ParseError(f"expected a string, got {value!r}", line=_line_of(text, key), field=key)
            values[attr] = value
        elif kind == "initial":
            values[attr] = _initial(value, key, text)
        else:
            if not isinstance(value, list):
                raise ParseError(f"expected an array, got {value!r}", line=_line_of(text, key), field=key)
            items = tuple(_number(v, float, key, text) for v in value)
            if kind == "pair" and len(items) != 2:
                raise ParseError(f"expected two numbers, got {len(items)}", line=_line_of(text, key), field=key)
            values[attr] = items
    return validate(RunConfigFile(**values))


def parse_config(path: os.PathLike | str) -> RunConfigFile:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ParseError(f"config file not found: {path}") from exc
    except OSError as exc:
        raise ParseError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, path.parent)


def default_config(model: str = "parabolic", **changes) -> RunConfigFile:
    if model not in MODEL_DEFAULTS:
        raise ValidationError(f"model must be 'parabolic' or 'hyperbolic', got {model!r}")
    return validate(RunConfigFile(model=model, **{**MODEL_DEFAULTS[model], **changes}))


def validate(cfg: RunConfigFile) -> RunConfigFile:
    """Raise ValidationError naming the first violated invariant."""
    if cfg.model not in MODEL_DEFAULTS:
        raise ValidationError(f"model must be 'parabolic' or 'hyperbolic', got {cfg.model!r}")
    try:
        Params(cfg.B, cfg.T, cfg.lam, cfg.kappa)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    try:
        build_grid(cfg.domain[0], cfg.domain[1], cfg.N)
    except DegenerateGrid as exc:
        raise ValidationError(str(exc)) from exc
    checks = [
        (math.isfinite(cfg.dt) and cfg.dt > 0, f"dt must be > 0, got {cfg.dt}"),
        (math.isfinite(cfg.t_end) and cfg.t_end > 0, f"t_end must be > 0, got {cfg.t_end}"),
        (cfg.steady_tol > 0, f"steady_tol must be > 0, got {cfg.steady_tol}"),
        (0 < cfg.quench_floor < 1, f"quench_floor must lie in (0,1), got {cfg.quench_floor}"),
        (cfg.sample_stride >= 1, f"sample_stride must be >= 1, got {cfg.sample_stride}"),
        (cfg.rel_tol > 0, f"rel_tol must be > 0, got {cfg.rel_tol}"),
        (cfg.dlambda > 0, f"dlambda must be > 0, got {cfg.dlambda}"),
        (all(t >= 0 for t in cfg.snapshot_times), "snapshot_times must be >= 0"),
        (all(lam >= 0 for lam in cfg.lambdas), "lambdas must be >= 0"),
        (cfg.lambda_max is None or cfg.lambda_max >= 0, f"lambda_max must be >= 0, got {cfg.lambda_max}"),
        (
            all(cfg.domain[0] <= x <= cfg.domain[1] for x in cfg.probes),
            f"probes must lie in the domain {list(cfg.domain)}",
        ),
        (
            cfg.bracket is None or 0 <= cfg.bracket[0] < cfg.bracket[1],
            f"bracket must satisfy 0 <= lo < hi, got {cfg.bracket}",
        ),
    ]
    for ok, message in checks:
        if not ok:
            raise ValidationError(message)
    return cfg


# ------------------------------------------------------------------- output


def fmt(x: float) -> str:
    """17 significant digits: enough to re-read the identical double."""
    return format(float(x), ".17g")


def time_label(t: float) -> str:
    """Shortest round-trip text of ``t`` for file names (``78.39`` not ``78.390000000000001``)."""
    return repr(float(t))


def write_csv(path: os.PathLike | str, header: Sequence[str], columns: Sequence[Sequence[float]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in zip(*columns):
            writer.writerow([fmt(v) for v in row])
    return path


def read_csv(path: os.PathLike | str) -> dict:
    """Columns of a CSV written by :func:`write_csv`, as float arrays."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return {name: data[:, i].copy() for i, name in enumerate(header)}


TRAJECTORY_COLUMNS = ("t", "min_u", "u_probe", "l2_ut", "energy", "dist_to_steady")


def write_trajectory(path: os.PathLike | str, traj: Trajectory, hyperbolic: bool = False) -> Path:
    names = TRAJECTORY_COLUMNS + (("l2_v",) if hyperbolic else ())
    return write_csv(path, names, [traj.column(n) for n in names])


def write_profile(path: os.PathLike | str, grid: Grid, u: np.ndarray) -> Path:
    return write_csv(path, ("x", "u"), [grid.x, u])


def read_profile(path: os.PathLike | str) -> tuple[np.ndarray, np.ndarray]:
    try:
        cols = read_csv(path)
    except (OSError, StopIteration, ValueError) as exc:
        raise ValidationError(f"cannot read profile {path}: {exc}") from exc
    if "u" not in cols:
        raise ValidationError(f"profile {path} has no 'u' column")
    return cols.get("x", np.arange(cols["u"].size, dtype=float)), cols["u"]


def write_snapshots(out_dir: os.PathLike | str, grid: Grid, snapshots: Sequence) -> list[Path]:
    return [write_profile(Path(out_dir) / f"snap_t{time_label(t)}.csv", grid, u) for t, u in snapshots]


def write_branch(path: os.PathLike | str, branch) -> Path:
    eig = [np.nan if s.smallest_eig is None else s.smallest_eig for s in branch.points]
    return write_csv(
        path,
        ("lambda", "min_psi", "residual_norm", "smallest_eig"),
        [branch.lambdas, branch.min_values, [s.residual_norm for s in branch.points], eig],
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def report(command: str, cfg: RunConfigFile, results: dict) -> dict:
    return {"command": command, "config_echo": _jsonable(cfg.echo()), "results": _jsonable(results), "version": __version__}


def write_json(path: os.PathLike | str, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, allow_nan=False) + "\n", encoding="utf-8")
    return path
