"""Linear solvers for the Newton systems of every level."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .amg import AMGPreconditioner, build_amg
from .cpr import CPRPreconditioner, L1Jacobi, apply_cpr, build_l1_jacobi
from .ilu import ILUFactors, build_ilu, build_ilu0, build_ilu1
from .krylov import KrylovStats, gmres
from .reduction import ReducedSystem, hybridize_coarse, reduce_fine


class LinearSolveError(RuntimeError):
    pass


@dataclass
class LinearSolverConfig:
    backend: str = "gmres"  # "gmres" (reduced system + CPR) or "direct" (sparse LU of the full system)
    tol: float = 1e-8
    restart: int = 50
    max_iter: int = 400
    direct_fallback: bool = True

    def __post_init__(self):
        if self.backend not in ("gmres", "direct"):
            raise ValueError(f"unknown linear backend {self.backend!r}")


@dataclass
class LinearStats:
    solves: int = 0
    iterations: int = 0
    fallbacks: int = 0
    amg_fallbacks: int = 0
    per_level: dict = field(default_factory=dict)

    def record(self, level: int, iterations: int) -> None:
        self.solves += 1
        self.iterations += iterations
        self.per_level[level] = self.per_level.get(level, 0) + iterations


def reduce_system(level_data, jac, rhs) -> ReducedSystem:
    if level_data.level == 0:
        return reduce_fine(jac, rhs)
    return hybridize_coarse(level_data, jac, rhs)


def solve_reduced(system: ReducedSystem, config: LinearSolverConfig):
    pre = CPRPreconditioner.from_reduced(system)
    A = system.matrix()
    u, st = gmres(A, system.rhs(), M=pre, tol=config.tol, max_iter=config.max_iter, restart=config.restart)
    return u, st, pre


def solve_newton_system(level_data, jac, rhs, config: LinearSolverConfig | None = None,
                        stats: LinearStats | None = None) -> np.ndarray:
    """Solve ``J dx = rhs`` for the full ``[dsigma; dp; ds]`` correction."""
    config = config or LinearSolverConfig()
    rhs = np.asarray(rhs, dtype=float)
    if config.backend == "direct":
        dx = _direct(jac, rhs)
        if stats is not None:
            stats.record(level_data.level, 1)
        return dx
    system = reduce_system(level_data, jac, rhs)
    u, st, pre = solve_reduced(system, config)
    if stats is not None:
        stats.record(level_data.level, st.iterations)
        stats.amg_fallbacks += int(pre.stats["amg_fallback"])
    if not st.converged:
        if not config.direct_fallback:
            raise LinearSolveError(
                f"GMRES stopped at relative residual {st.relative_residual:.3e} after {st.iterations} iterations")
        if stats is not None:
            stats.fallbacks += 1
        return _direct(jac, rhs)
    return system.recover(u)


def _direct(jac, rhs) -> np.ndarray:
    J = jac.full().tocsc()
    try:
        dx = spla.splu(J).solve(rhs)
    except RuntimeError as exc:
        raise LinearSolveError(f"sparse LU failed: {exc}") from exc
    if not np.all(np.isfinite(dx)):
        raise LinearSolveError("sparse LU produced non-finite values")
    return dx


__all__ = [
    "AMGPreconditioner", "CPRPreconditioner", "ILUFactors", "KrylovStats", "L1Jacobi",
    "LinearSolveError", "LinearSolverConfig", "LinearStats", "ReducedSystem", "apply_cpr",
    "build_amg", "build_ilu", "build_ilu0", "build_ilu1", "build_l1_jacobi", "gmres",
    "hybridize_coarse", "reduce_fine", "reduce_system", "solve_newton_system", "solve_reduced",
]
