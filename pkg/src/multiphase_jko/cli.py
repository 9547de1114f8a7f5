"""Command-line driver: configuration, runs, persistence and small utilities.

Subcommands::

    multiphase-jko run --config PATH [--tau T] [--steps K] [--epsilon E]
                       [--out DIR] [--exact-oracle] [--no-diagnostics]
    multiphase-jko bathtub solve INSTANCE.csv [--masses m0,m1,...] [--out DIR]
    multiphase-jko w2 compute MARGINALS.csv --cells N [--epsilon E] ...
    multiphase-jko convexity check (--config PATH | --cells N --kappa K)

``--config`` without a subcommand means ``run``.  All outputs are CSV
files whose first line is ``# schema=1``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diagnostics as diag
from .bathtub import BathtubInstance, solve_bathtub
from .energy import CapillaryModel, capillary_pressure_field, energy_floor, read_capillary_csv
from .geometry import (Medium, build_costs, build_grid, check_geodesic_convexity_isotropic,
                       gravity_potential, isotropic_medium, random_heterogeneous_medium,
                       read_medium_csv)
from .jko import JKOError, JKOOptions, Trajectory, run_simulation
from .transport import exact_w2, sinkhorn_w2, write_plan_csv

log = logging.getLogger("multiphase_jko")

SCHEMA = "# schema=1"
EXACT_CELL_CAP = 64


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------
# configuration

# key -> (parser, default); ``None`` default with ``required`` listed separately
_FLOATS = "floats"
_KEYS: dict[str, tuple[str, object]] = {
    "grid.cells": ("ints", None),
    "grid.extent": (_FLOATS, [1.0]),
    "grid.lower": (_FLOATS, [0.0]),
    "phases.count": ("int", 2),
    "medium.preset": ("str", "homogeneous"),
    "medium.porosity": ("float", 0.5),
    "medium.porosity_range": (_FLOATS, [0.3, 0.6]),
    "medium.kappa": ("float", 1.0),
    "medium.kappa_range": (_FLOATS, [1.0, 4.0]),
    "medium.anisotropic": ("bool", False),
    "medium.viscosity": (_FLOATS, None),
    "medium.densities": (_FLOATS, None),
    "medium.gravity": ("float", 1.0),
    "medium.csv": ("str", None),
    "capillary.strength": ("float", 1.0),
    "capillary.csv": ("str", None),
    "initial.profile": ("str", "uniform"),
    "initial.fractions": (_FLOATS, None),
    "initial.order": ("ints", None),
    "initial.masses": (_FLOATS, None),
    "initial.csv": ("str", None),
    "run.tau": ("float", None),
    "run.horizon": ("float", None),
    "run.steps": ("int", None),
    "run.mode": ("str", "entropic"),
    "run.inner": ("str", "newton"),
    "run.epsilon": ("float", None),
    "run.epsilon_factor": ("float", 1e-2),
    "run.fw_tol": ("float", 1e-6),
    "run.fw_max_iter": ("int", 500),
    "run.sinkhorn_tol": ("float", 1e-8),
    "run.stationary_tol": ("float", None),
    "run.seed": ("int", 0),
    "run.out": ("str", "out"),
    "run.diagnostics": ("bool", True),
}
_REQUIRED = ("grid.cells", "run.tau")


def _parse_value(kind: str, raw: str, key: str):
    try:
        if kind == "str":
            return raw
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        parts = [p.strip() for p in raw.replace(";", ",").split(",") if p.strip()]
        if kind == "ints":
            return [int(p) for p in parts]
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from exc


@dataclass
class RunConfig:
    """Validated run configuration (see :func:`parse_config` for the keys)."""

    values: dict
    base_dir: str = "."
    notes: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.values[key]

    def path(self, key) -> str | None:
        v = self.values[key]
        if v is None:
            return None
        return v if os.path.isabs(v) else os.path.join(self.base_dir, v)


def parse_config_text(text: str, base_dir: str = ".") -> RunConfig:
    """Parse flat ``section.key = value`` lines (``#`` starts a comment)."""
    values = {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in _KEYS.items()}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        values[key] = _parse_value(_KEYS[key][0], raw, key)
    missing = [k for k in _REQUIRED if values[k] is None]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    cfg = RunConfig(values, base_dir)
    _validate(cfg)
    return cfg


def parse_config(path) -> RunConfig:
    with open(path) as fh:
        text = fh.read()
    return parse_config_text(text, os.path.dirname(os.path.abspath(path)))


def _validate(cfg: RunConfig) -> None:
    v = cfg.values
    if v["run.tau"] <= 0:
        raise ConfigError("run.tau must be positive")
    if v["run.horizon"] is not None and v["run.horizon"] < 0:
        raise ConfigError("run.horizon must be nonnegative")
    if v["run.steps"] is not None and v["run.steps"] < 0:
        raise ConfigError("run.steps must be nonnegative")
    if v["run.epsilon"] is not None and v["run.epsilon"] <= 0:
        raise ConfigError("run.epsilon must be positive")
    if v["phases.count"] < 1:
        raise ConfigError("phases.count must be at least 1")
    if v["run.mode"] not in ("entropic", "exact"):
        raise ConfigError(f"run.mode must be entropic or exact, not {v['run.mode']!r}")
    if v["medium.preset"] not in ("homogeneous", "gravity_column", "heterogeneous", "csv"):
        raise ConfigError(f"unknown medium.preset {v['medium.preset']!r}")
    if v["initial.profile"] not in ("uniform", "stacked", "random", "csv"):
        raise ConfigError(f"unknown initial.profile {v['initial.profile']!r}")
    if any(c <= 0 for c in v["grid.cells"]) or not 1 <= len(v["grid.cells"]) <= 2:
        raise ConfigError("grid.cells must be one or two positive integers")


def _per_phase(values, count, key, default):
    if values is None:
        return np.full(count, default, dtype=float)
    arr = np.asarray(values, dtype=float)
    if arr.size == 1:
        return np.full(count, arr[0])
    if arr.size != count:
        raise ConfigError(f"{key} needs {count} entries, got {arr.size}")
    return arr


def build_medium(cfg: RunConfig) -> Medium:
    v = cfg.values
    count = v["phases.count"]
    mu = _per_phase(v["medium.viscosity"], count, "medium.viscosity", 1.0)
    preset = v["medium.preset"]
    if preset == "csv":
        return read_medium_csv(cfg.path("medium.csv"), mu)
    grid = build_grid(v["grid.cells"], v["grid.extent"] if len(v["grid.extent"]) > 1 else v["grid.extent"][0],
                      v["grid.lower"] if len(v["grid.lower"]) > 1 else v["grid.lower"][0])
    psi = 0.0
    if v["medium.densities"] is not None or preset == "gravity_column":
        rho = _per_phase(v["medium.densities"], count, "medium.densities", 1.0)
        psi = gravity_potential(grid, rho, v["medium.gravity"])
    if preset == "heterogeneous":
        return random_heterogeneous_medium(grid, mu, tuple(v["medium.kappa_range"]),
                                           tuple(v["medium.porosity_range"]),
                                           v["medium.anisotropic"], v["run.seed"], psi)
    return isotropic_medium(grid, v["medium.porosity"], v["medium.kappa"], mu, psi)


def build_capillary(cfg: RunConfig, medium: Medium) -> CapillaryModel:
    n, N = medium.grid.cell_count, medium.phase_count - 1
    if cfg.values["capillary.csv"] is not None:
        model = read_capillary_csv(cfg.path("capillary.csv"), n)
        if model.n_capillary != N:
            raise ConfigError(f"capillary.csv has {model.n_capillary} capillary phases, expected {N}")
        return model
    return CapillaryModel.scaled_identity(n, N, cfg.values["capillary.strength"])


def _read_state_csv(path, n, count):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.lstrip().startswith("#")))
    if len(rows) != n:
        raise ConfigError(f"{path}: {len(rows)} rows for {n} cells")
    s = np.zeros((count, n))
    for row in rows:
        for i in range(count):
            s[i, int(row["cell"])] = float(row[f"s_{i}"])
    return s


def initial_state(cfg: RunConfig, medium: Medium) -> np.ndarray:
    """Initial cell masses ``s^0``; mass mismatches up to ``1e-6`` are renormalised."""
    v = cfg.values
    cap = medium.pore_volume
    count = medium.phase_count
    total = cap.sum()
    fr = _per_phase(v["initial.fractions"], count, "initial.fractions", 1.0 / count)
    masses = None
    if v["initial.masses"] is not None:
        masses = _per_phase(v["initial.masses"], count, "initial.masses", 0.0)
        rel = abs(masses.sum() - total) / total
        if rel > 1e-6:
            raise ConfigError(f"initial.masses sum to {masses.sum()!r} but the pore volume is "
                              f"{total!r} (relative mismatch {rel:.3e} > 1e-6)")
        if rel > 0:
            cfg.notes.append(f"renormalised initial.masses by {rel:.3e}")
            log.info("renormalising initial masses (relative mismatch %.3e)", rel)
        fr = masses / masses.sum()
    elif abs(fr.sum() - 1.0) > 1e-6:
        raise ConfigError(f"initial.fractions sum to {fr.sum()!r}, expected 1 (mismatch > 1e-6)")
    fr = fr / fr.sum()
    profile = v["initial.profile"]
    if profile == "uniform":
        s = fr[:, None] * cap[None, :]
    elif profile == "random":
        rng = np.random.default_rng(v["run.seed"])
        w = rng.dirichlet(np.ones(count), size=cap.size).T
        s = _match_masses(w * cap[None, :], cap, fr * total)
    elif profile == "stacked":
        order = v["initial.order"] or list(range(count))
        if sorted(order) != list(range(count)):
            raise ConfigError("initial.order must be a permutation of the phases")
        s = _stacked(medium, [int(i) for i in order], fr * total)
    else:
        s = _read_state_csv(cfg.path("initial.csv"), cap.size, count)
        drift = np.abs(s.sum(axis=0) - cap).max() / total
        if drift > 1e-6:
            raise ConfigError(f"initial.csv violates saturation by {drift:.3e} (relative) > 1e-6")
        if masses is not None:
            err = np.abs(s.sum(axis=1) - masses).max() / total
            if err > 1e-6:
                raise ConfigError(f"initial.csv phase masses differ from initial.masses by {err:.3e}")
        if drift > 0:
            cfg.notes.append(f"renormalised initial saturation by {drift:.3e}")
        s = s * (cap / s.sum(axis=0))[None, :]
    return s


def _stacked(medium: Medium, order, masses):
    """Fill cells by increasing height (last coordinate) with phases in ``order``."""
    cap = medium.pore_volume
    grid = medium.grid
    keys = tuple(grid.centers[:, k] for k in range(grid.dim - 1)) + (grid.centers[:, -1],)
    cells = np.lexsort(keys)
    s = np.zeros((medium.phase_count, cap.size))
    k = 0
    left = cap.copy()
    for i in order:
        need = masses[i]
        while need > 1e-15 * cap.sum() and k < cells.size:
            x = cells[k]
            take = min(need, left[x])
            s[i, x] += take
            left[x] -= take
            need -= take
            if left[x] <= 1e-15 * cap[x]:
                k += 1
    s[order[-1]] += np.clip(left, 0.0, None)
    return s


def _match_masses(s, cap, masses):
    """Rescale a saturated field so the phase totals equal ``masses`` (Sinkhorn balancing)."""
    for _ in range(10_000):
        s = s * (masses / s.sum(axis=1))[:, None]
        s = s * (cap / s.sum(axis=0))[None, :]
        if np.abs(s.sum(axis=1) - masses).max() <= 1e-14 * cap.sum():
            break
    return s


# ----------------------------------------------------------------------
# persistence


def _fmt(x) -> str:
    return repr(float(x))


def write_state_csv(path, medium: Medium, s, p=None, pi=None) -> None:
    grid = medium.grid
    count = s.shape[0]
    axes = ["x", "y"][: grid.dim]
    head = (["cell"] + axes + [f"s_{i}" for i in range(count)] + [f"p_{i}" for i in range(count)]
            + [f"pi_{i}" for i in range(1, count)])
    n = grid.cell_count
    p = np.full((count, n), np.nan) if p is None else p
    pi = np.full((count, n), np.nan) if pi is None else pi
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        for x in range(n):
            w.writerow([x] + [_fmt(c) for c in grid.centers[x]] + [_fmt(s[i, x]) for i in range(count)]
                       + [_fmt(p[i, x]) for i in range(count)]
                       + [_fmt(pi[i, x]) for i in range(1, count)])


def read_state_csv(path, count: int):
    """Masses, pressures and capillary pressures from a ``state_{n}.csv`` file."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    n = len(rows)
    s = np.zeros((count, n))
    p = np.zeros((count, n))
    pi = np.zeros((count, n))
    for row in rows:
        x = int(row["cell"])
        for i in range(count):
            s[i, x] = float(row[f"s_{i}"])
            p[i, x] = float(row[f"p_{i}"])
            if i:
                pi[i, x] = float(row[f"pi_{i}"])
    return s, p, pi


def _write_rows(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA + "\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


@dataclass
class _Check:
    name: str
    value: float
    threshold: float
    passed: bool

    def row(self):
        return {"check": self.name, "value": float(self.value), "threshold": float(self.threshold),
                "passed": str(bool(self.passed)).lower()}


def summary_checks(traj: Trajectory, medium: Medium, model: CapillaryModel, costs,
                   with_transport: bool = True) -> list[_Check]:
    """Acceptance-style checks on a finished (or partial) run."""
    S = np.array(traj.states)
    cap = medium.pore_volume
    total = cap.sum()
    masses = S[0].sum(axis=1)
    mass = float(np.abs(S.sum(axis=2) - masses).max() / total)
    sat = float(np.abs(S.sum(axis=1) - cap).max() / total)
    out = [_Check("mass_drift", mass, 1e-9, mass <= 1e-9),
           _Check("saturation_drift", sat, 1e-9, sat <= 1e-9)]
    if traj.records:
        pn = diag.check_pressure_norms(traj, medium)
        out.append(_Check("capillary_residual", pn.capillary_residual, 1e-12,
                          pn.capillary_residual <= 1e-12))
        ed = diag.check_energy_decay(traj, model, medium)
        out.append(_Check("energy_monotone", ed.worst_increase, 0.0, ed.monotone))
        out.append(_Check("total_square_distance", ed.total_distance, ed.total_distance_bound,
                          ed.total_distance_ok))
        gaps = max(r.fw_gap for r in traj.records)
        out.append(_Check("steps_converged", gaps, float("nan"),
                          all(r.converged for r in traj.records)))
        if with_transport:
            ho = diag.check_holder(traj, costs, model, medium, max_adjacent=20)
            out.append(_Check("holder_constant", ho.constant, 2 * ho.reference, ho.passed))
        out.append(_Check("pressure_h1_integral", pn.p_h1, float("nan"), bool(np.isfinite(pn.p_h1))))
    return out


# ----------------------------------------------------------------------
# run


def run(cfg: RunConfig, tau: float | None = None, steps: int | None = None,
        epsilon: float | None = None, out: str | None = None, exact_oracle: bool = False,
        diagnostics: bool | None = None) -> int:
    """Execute a configured simulation and write its CSV outputs.

    Returns the process exit status: 0 when every summary check passes,
    1 when some check fails and 2 when the solver aborted.
    """
    v = cfg.values
    tau = v["run.tau"] if tau is None else tau
    if tau <= 0:
        raise ConfigError("tau must be positive")
    out = cfg.path("run.out") if out is None else out
    diagnostics = v["run.diagnostics"] if diagnostics is None else diagnostics
    medium = build_medium(cfg)
    model = build_capillary(cfg, medium)
    mode = "exact" if exact_oracle else v["run.mode"]
    n = medium.grid.cell_count
    if mode == "exact" and n > EXACT_CELL_CAP:
        raise ConfigError(f"exact transport is limited to {EXACT_CELL_CAP} cells (grid has {n})")
    s0 = initial_state(cfg, medium)
    if steps is None:
        steps = v["run.steps"]
    if steps is None:
        horizon = v["run.horizon"] if v["run.horizon"] is not None else tau
        steps = math.ceil(horizon / tau - 1e-9)
    opts = JKOOptions(mode=mode, inner=v["run.inner"],
                      epsilon=epsilon if epsilon is not None else v["run.epsilon"],
                      epsilon_factor=v["run.epsilon_factor"], fw_tol=v["run.fw_tol"],
                      fw_max_iter=v["run.fw_max_iter"], sinkhorn_tol=v["run.sinkhorn_tol"])
    os.makedirs(out, exist_ok=True)
    costs = build_costs(medium)
    tests = diag.quadratic_tests(medium.grid)
    names = [t.name for t in tests]
    rows: list[dict] = []
    pi0 = capillary_pressure_field(model, s0, medium)
    write_state_csv(os.path.join(out, "state_0.csv"), medium, s0, None, pi0)
    exact_cost = costs if n <= EXACT_CELL_CAP else None
    floor = energy_floor(model, medium)

    def persist(k, rec):
        write_state_csv(os.path.join(out, f"state_{k}.csv"), medium, rec.s_new, rec.p, rec.pi)
        if diagnostics:
            row = diag.step_row(k, rec, medium, model, floor, exact_cost, tests)
            rows.append(row.as_dict(names))

    status = 0
    try:
        traj = run_simulation(s0, tau, steps * tau, medium, model, costs, opts,
                              stationary_tol=v["run.stationary_tol"], callback=persist)
    except JKOError as exc:
        log.error("%s", exc)
        traj = exc.partial if exc.partial is not None else Trajectory(tau, [s0])
        status = 2
    if diagnostics:
        _write_rows(os.path.join(out, "diagnostics.csv"), rows)
    checks = summary_checks(traj, medium, model, costs, with_transport=diagnostics and n <= 256)
    _write_rows(os.path.join(out, "summary.csv"), [c.row() for c in checks])
    for note in cfg.notes:
        log.info("%s", note)
    if status == 0 and not all(c.passed for c in checks):
        status = 1
    return status


# ----------------------------------------------------------------------
# utilities


def read_bathtub_csv(path, masses=None) -> BathtubInstance:
    """Instance from CSV with columns ``cell, omega, F_0..F_N``.

    Phase masses come from ``masses`` or a ``# masses = m0, m1, ...`` line.
    """
    with open(path, newline="") as fh:
        lines = fh.readlines()
    for line in lines:
        if masses is None and line.startswith("#") and "masses" in line and "=" in line:
            masses = [float(t) for t in line.split("=", 1)[1].replace(";", ",").split(",") if t.strip()]
    rows = list(csv.DictReader(line for line in lines if not line.lstrip().startswith("#")))
    if masses is None:
        raise ConfigError("phase masses missing: use --masses or a '# masses = ...' line")
    count = len(masses)
    rows.sort(key=lambda r: int(r["cell"]))
    omega = np.array([float(r["omega"]) for r in rows])
    F = np.array([[float(r[f"F_{i}"]) for r in rows] for i in range(count)])
    return BathtubInstance(F, omega, np.asarray(masses, dtype=float))


def _emit(rows, path, stream):
    if path is None:
        stream.write(SCHEMA + "\n")
        if rows:
            w = csv.DictWriter(stream, fieldnames=list(rows[0].keys()), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    else:
        _write_rows(path, rows)


def cmd_bathtub(args, stream=None) -> int:
    stream = sys.stdout if stream is None else stream
    masses = None if args.masses is None else _parse_value(_FLOATS, args.masses, "--masses")
    inst = read_bathtub_csv(args.instance, masses)
    sol = solve_bathtub(inst)
    count = inst.F.shape[0]
    rows = [{"cell": x, "lambda": _fmt(sol.lam[x]),
             **{f"s_{i}": _fmt(sol.s[i, x]) for i in range(count)}} for x in range(inst.omega.size)]
    cert = ([{"key": "primal_value", "value": _fmt(sol.primal_value)},
             {"key": "dual_value", "value": _fmt(sol.dual_value)},
             {"key": "gap", "value": _fmt(sol.gap)}]
            + [{"key": f"alpha_{i}", "value": _fmt(sol.alpha[i])} for i in range(count)])
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _emit(rows, os.path.join(args.out, "bathtub_solution.csv"), stream)
        _emit(cert, os.path.join(args.out, "bathtub_certificate.csv"), stream)
    else:
        _emit(rows, None, stream)
        _emit(cert, None, stream)
    stream.write(f"value = {sol.primal_value!r}\n")
    return 0


def cmd_w2(args, stream=None) -> int:
    stream = sys.stdout if stream is None else stream
    cells = _parse_value("ints", args.cells, "--cells")
    grid = build_grid(cells, args.extent)
    medium = isotropic_medium(grid, 1.0, args.kappa, [args.viscosity])
    with open(args.marginals, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.lstrip().startswith("#")))
    a = np.zeros(grid.cell_count)
    b = np.zeros(grid.cell_count)
    for r in rows:
        a[int(r["cell"])] = float(r["a"])
        b[int(r["cell"])] = float(r["b"])
    C = build_costs(medium)[0]
    if args.epsilon is None:
        res = exact_w2(C, a, b)
    else:
        res = sinkhorn_w2(C, a, b, args.epsilon)[0]
    if args.plan:
        write_plan_csv(args.plan, res.plan)
    _emit([{"mode": res.mode, "w2": _fmt(res.value), "marginal_error": _fmt(res.marginal_error),
            "iterations": res.iterations}], None, stream)
    stream.write(f"w2 = {res.value!r}\n")
    return 0


def cmd_convexity(args, stream=None) -> int:
    stream = sys.stdout if stream is None else stream
    if args.config:
        medium = build_medium(parse_config(args.config))
    else:
        if args.cells is None:
            raise ConfigError("convexity check needs --config or --cells")
        grid = build_grid(_parse_value("ints", args.cells, "--cells"), args.extent)
        medium = isotropic_medium(grid, 0.5, args.kappa, [1.0])
    rep = check_geodesic_convexity_isotropic(medium, args.boundary_layer)
    _emit([{"passed": str(rep.passed).lower(), "checked_cells": rep.checked_cells,
            "offending_cells": " ".join(map(str, rep.offending_cells))}], None, stream)
    stream.write(str(rep) + "\n")
    return 0 if rep.passed else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="multiphase-jko",
                                 description="Minimizing-movement simulator for multiphase porous-media flow.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run a configured simulation")
    r.add_argument("--config", required=True)
    r.add_argument("--tau", type=float)
    r.add_argument("--steps", type=int)
    r.add_argument("--epsilon", type=float)
    r.add_argument("--out")
    r.add_argument("--exact-oracle", action="store_true",
                   help=f"use exact transport (grids up to {EXACT_CELL_CAP} cells)")
    r.add_argument("--no-diagnostics", action="store_true")

    b = sub.add_parser("bathtub", help="bathtub linear program")
    bsub = b.add_subparsers(dest="action", required=True)
    bs = bsub.add_parser("solve", parents=[common])
    bs.add_argument("instance")
    bs.add_argument("--masses")
    bs.add_argument("--out")

    w = sub.add_parser("w2", help="squared Wasserstein distance on a grid")
    wsub = w.add_subparsers(dest="action", required=True)
    wc = wsub.add_parser("compute", parents=[common])
    wc.add_argument("marginals", help="CSV with columns cell, a, b (cell masses)")
    wc.add_argument("--cells", required=True)
    wc.add_argument("--extent", type=float, default=1.0)
    wc.add_argument("--kappa", type=float, default=1.0)
    wc.add_argument("--viscosity", type=float, default=1.0)
    wc.add_argument("--epsilon", type=float)
    wc.add_argument("--plan")

    c = sub.add_parser("convexity", help="boundary test for geodesic convexity")
    csub = c.add_subparsers(dest="action", required=True)
    cc = csub.add_parser("check", parents=[common])
    cc.add_argument("--config")
    cc.add_argument("--cells")
    cc.add_argument("--extent", type=float, default=1.0)
    cc.add_argument("--kappa", type=float, default=1.0)
    cc.add_argument("--boundary-layer", type=float)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0].startswith("--config"):
        argv = ["run"] + argv
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = parse_config(args.config)
            return run(cfg, args.tau, args.steps, args.epsilon, args.out, args.exact_oracle,
                       False if args.no_diagnostics else None)
        if args.command == "bathtub":
            return cmd_bathtub(args)
        if args.command == "w2":
            return cmd_w2(args)
        return cmd_convexity(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
