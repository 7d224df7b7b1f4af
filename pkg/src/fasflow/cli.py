"""Command line entry point: ``fasflow simulate`` and ``fasflow compare``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import ConfigError, load_config
from .scenario import ScenarioResult, compare_solvers, run_scenario, solver_variant


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fasflow", description="Two-phase flow with nonlinear multigrid.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", help="run one scenario")
    sim.add_argument("--config", required=True)
    sim.add_argument("--solver", choices=["newton", "fas"])
    sim.add_argument("--levels", type=int)
    sim.add_argument("--coarsening-factor", type=float)
    sim.add_argument("--nu", type=float)
    sim.add_argument("--out")
    sim.add_argument("--seed", type=int)
    cmp_ = sub.add_parser("compare", help="run several solvers on one scenario")
    cmp_.add_argument("--config", required=True)
    cmp_.add_argument("--solvers", default="newton,fas2")
    cmp_.add_argument("--out")
    return ap


def _apply_overrides(cfg, args):
    if args.solver:
        cfg = cfg.replace(solver=args.solver)
    if args.levels is not None:
        cfg = cfg.replace(fas=dataclasses.replace(cfg.fas, num_levels=args.levels))
    if args.coarsening_factor is not None:
        cfg = cfg.replace(coarsening_factor=args.coarsening_factor)
    if args.nu is not None:
        cfg = cfg.replace(time=dataclasses.replace(cfg.time, nu=args.nu))
    if args.seed is not None:
        cfg = cfg.replace(partition_seed=args.seed)
    if args.out:
        cfg = cfg.replace(output_dir=args.out)
    cfg.validate()
    return cfg


def _print_records(res: ScenarioResult) -> None:
    print(f"# {res.solver_label}: setup {res.setup_time:.3f} s, solve {res.solve_time:.3f} s, "
          f"partition seed {res.seed}")
    print(f"{'step':>4} {'t[PVI]':>11} {'CFL':>9} {'iters':>5} {'time[s]':>8} ok")
    for r in res.records:
        print(f"{r.step:>4} {r.t_pvi:>11.4e} {r.cfl:>9.3g} {r.iterations:>5} {r.wall_time:>8.3f} "
              f"{'y' if r.converged else 'n'}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "simulate":
            cfg = _apply_overrides(cfg, args)
            res = run_scenario(cfg)
            _print_records(res)
            if not res.converged:
                print(f"step failure: {res.failure}", file=sys.stderr)
                return 1
            return 0
        if args.out:
            cfg = cfg.replace(output_dir=args.out)
        labels = [s.strip() for s in args.solvers.split(",")]
        for lab in labels:
            solver_variant(cfg, lab)
        results, _ = compare_solvers(cfg, labels)
        ok = True
        for lab, res in results.items():
            if isinstance(res, ScenarioResult):
                _print_records(res)
                ok &= res.converged
            else:
                print(f"# {lab}: failed with {res}", file=sys.stderr)
                ok = False
        return 0 if ok else 1
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
