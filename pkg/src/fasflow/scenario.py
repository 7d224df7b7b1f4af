"""Running scenarios and comparing solvers."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import (ConfigError, ScenarioConfig, build_mesh, build_wells, pvi_to_seconds,
                     seconds_to_pvi)
from .fvdiscr import State
from .hierarchy import build_hierarchy
from .io import emit_fields
from .nlsolve import initial_state, time_loop, time_step_sizes
from .partition import read_partition

log = logging.getLogger(__name__)

RECORD_FIELDS = ["step", "t_pvi", "t_seconds", "dt", "cfl", "iterations", "linear_iterations",
                 "wall_time", "cumulative_time", "converged", "normalized_residual"]
TIMING_FIELDS = ("wall_time", "cumulative_time")


@dataclass
class StepRecord:
    step: int
    t_pvi: float
    t_seconds: float
    dt: float
    cfl: float
    iterations: int
    linear_iterations: dict
    wall_time: float
    cumulative_time: float
    converged: bool
    normalized_residual: float

    def row(self) -> dict:
        d = dataclasses.asdict(self)
        d["linear_iterations"] = ";".join(f"{k}:{v}" for k, v in sorted(self.linear_iterations.items()))
        d["converged"] = int(self.converged)
        return d


@dataclass
class ScenarioResult:
    records: list
    state: State
    converged: bool
    failure: str
    setup_time: float
    solve_time: float
    seed: int
    solver_label: str
    mesh: object = None
    wells: list = field(default_factory=list)
    output_dir: Path | None = None


def solver_variant(cfg: ScenarioConfig, label: str) -> ScenarioConfig:
    """``newton`` or ``fasN`` (N levels; plain ``fas`` keeps the configured count)."""
    label = label.strip().lower()
    if label == "newton":
        return cfg.replace(solver="newton", fas=dataclasses.replace(cfg.fas, num_levels=1))
    if label.startswith("fas"):
        tail = label[3:]
        levels = int(tail) if tail else cfg.fas.num_levels
        if levels < 1:
            raise ConfigError(f"bad solver label {label!r}")
        return cfg.replace(solver="fas", fas=dataclasses.replace(cfg.fas, num_levels=levels))
    raise ConfigError(f"unknown solver {label!r}; use newton or fasN")


def solver_label(cfg: ScenarioConfig) -> str:
    return "newton" if cfg.solver == "newton" else f"fas{cfg.fas.num_levels}"


def _threads_from_env() -> None:
    n = os.environ.get("FASFLOW_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def write_records(path, records) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(r.row())
    return path


def read_records(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_scenario(cfg: ScenarioConfig, output_dir=None, write: bool = True) -> ScenarioResult:
    """Build mesh, wells and hierarchy, then march through the time steps.

    Setup time (hierarchy construction) is measured separately from the
    per-step solution time.  A failed step ends the run; the records and
    fields up to that point are still written.
    """
    _threads_from_env()
    cfg.validate()
    mesh = build_mesh(cfg)
    wells = build_wells(mesh, cfg)
    to_sec = (lambda v: pvi_to_seconds(v, mesh, wells)) if cfg.time.unit == "pvi" else (lambda v: v)
    dt0 = to_sec(cfg.time.dt0)
    if cfg.time.t_final is None:
        sizes = [dt0 * cfg.time.nu ** m for m in range(cfg.time.max_steps)]
    else:
        sizes = time_step_sizes(dt0, cfg.time.nu, to_sec(cfg.time.t_final), cfg.time.max_steps)

    levels = 1 if cfg.solver == "newton" else cfg.fas.num_levels
    partitions = None
    if cfg.partition_files:
        partitions = [read_partition(cfg.resolve(p)) for p in cfg.partition_files]
    t0 = time.perf_counter()
    hier = build_hierarchy(mesh, wells, num_levels=levels, coarsening_factor=cfg.coarsening_factor,
                           seed=cfg.partition_seed, partitions=partitions,
                           weighted_projection=cfg.weighted_projection)
    setup = time.perf_counter() - t0
    fas = dataclasses.replace(cfg.fas, num_levels=levels)
    x0 = initial_state(hier.levels[0], cfg.s0, wells)
    log.info("setup %.3fs, %d levels, %d steps", setup, levels, len(sizes))

    out_dir = None
    if write:
        out_dir = Path(output_dir or cfg.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    spacing = None if cfg.mesh.file else (cfg.mesh.dx, cfg.mesh.dy, cfg.mesh.dz)
    fine = hier.levels[0]

    def snapshot(rec, x):
        if out_dir is not None and cfg.write_fields and rec.converged:
            st = State.from_vector(x, fine.n_flux, fine.n_cells)
            emit_fields(st, mesh, out_dir / f"fields_step{rec.step:04d}", spacing)

    res = time_loop(hier, cfg.fluids, x0, sizes, solver=cfg.solver, config=fas, linear=cfg.linear,
                    callback=snapshot)
    records, cum = [], 0.0
    for r in res.steps:
        cum += r.wall_time
        records.append(StepRecord(
            step=r.step, t_pvi=seconds_to_pvi(r.t, mesh, wells), t_seconds=r.t, dt=r.dt, cfl=r.cfl,
            iterations=r.iterations, linear_iterations=r.linear_iterations, wall_time=r.wall_time,
            cumulative_time=cum, converged=r.converged, normalized_residual=r.normalized_residual))
    label = solver_label(cfg)
    result = ScenarioResult(records, res.state, res.converged, res.failure, setup, cum, cfg.partition_seed,
                            label, mesh, wells, out_dir)
    if out_dir is not None:
        write_records(out_dir / "steps.csv", records)
        info = {"solver": label, "levels": levels, "coarsening_factor": cfg.coarsening_factor,
                "partition_seed": cfg.partition_seed, "setup_time": setup, "solve_time": cum,
                "converged": res.converged, "failure": res.failure, "n_cells": mesh.n_cells,
                "n_steps_planned": len(sizes)}
        (out_dir / "run_info.json").write_text(json.dumps(info, indent=2) + "\n")
    if not res.converged:
        log.warning("%s: step %d failed: %s", label, len(records) - 1, res.failure)
    return result


def compare_solvers(cfg: ScenarioConfig, solvers, output_dir=None, write: bool = True):
    """Run every solver label on the same inputs and join the per-step records.

    Returns ``(results, rows)``; ``results`` maps labels to
    :class:`ScenarioResult` (or the exception raised), ``rows`` is the joined
    table keyed by step.  Time ratios are relative to the first solver.
    """
    solvers = [s for s in solvers if s]
    if len(solvers) < 2:
        raise ConfigError("compare needs at least two solvers")
    base = Path(output_dir or cfg.output_dir)
    results = {}
    for label in solvers:
        try:
            sub = solver_variant(cfg, label)
            results[label] = run_scenario(sub, base / label if write else None, write=write)
        except ConfigError:
            raise
        except Exception as exc:  # isolate failures of one solver from the others
            log.error("%s failed: %s", label, exc)
            results[label] = exc
    n = max((len(r.records) for r in results.values() if isinstance(r, ScenarioResult)), default=0)
    ref = results.get(solvers[0])
    ref = ref if isinstance(ref, ScenarioResult) else None
    cols = ("iterations", "wall_time", "time_ratio", "cfl", "status")

    def ratio(val, against):
        return val / against if against else ""

    def empty(label, status):
        return {f"{label}_{c}": "" for c in cols[:-1]} | {f"{label}_status": status}

    rows = []
    for m in range(n):
        row = {"step": m}
        ref_time = ref.records[m].wall_time if ref is not None and m < len(ref.records) else 0.0
        for label, r in results.items():
            rec = r.records[m] if isinstance(r, ScenarioResult) and m < len(r.records) else None
            if rec is None:
                row.update(empty(label, "failed" if not isinstance(r, ScenarioResult) or not r.converged else ""))
                continue
            row.update({f"{label}_iterations": rec.iterations, f"{label}_wall_time": rec.wall_time,
                        f"{label}_time_ratio": ratio(rec.wall_time, ref_time), f"{label}_cfl": rec.cfl,
                        f"{label}_status": "ok" if rec.converged else "failed"})
        rows.append(row)
    # last row: mean iterations over converged steps and total solution time
    summary = {"step": "total"}
    for label, r in results.items():
        if not isinstance(r, ScenarioResult):
            summary.update(empty(label, "failed"))
            continue
        its = [rec.iterations for rec in r.records if rec.converged]
        summary.update({f"{label}_iterations": f"{np.mean(its):.3f}" if its else "",
                        f"{label}_wall_time": r.solve_time,
                        f"{label}_time_ratio": ratio(r.solve_time, ref.solve_time if ref else 0.0),
                        f"{label}_cfl": "", f"{label}_status": "ok" if r.converged else "failed"})
    rows.append(summary)
    if write:
        base.mkdir(parents=True, exist_ok=True)
        fields = ["step"] + [f"{lab}_{c}" for lab in results for c in cols]
        with open(base / "comparison.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
    return results, rows
