"""Nonlinear solvers: Newton smoothing, the FAS V-cycle and the time loop.

All level computations work on flat vectors ``x = [sigma; p; s]``.  One
Newton update solves ``J dx = r(x) - b`` and sets ``x <- x - dx``; on the fine
level saturations are chopped to ``[0, 1]`` afterwards, on coarse levels the
constant extension of the mobilities is relied upon instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fvdiscr import State
from .hierarchy import Hierarchy, LevelData, coarse_upwind_operator, level_residual
from .linsolve import LinearSolverConfig, LinearStats, solve_newton_system
from .physics import (
    FluidProps,
    cell_inflow,
    fractional_flow,
    fractional_flow_derivative,
    inverse_mobility_derivative,
    max_fractional_flow_derivative,
    producers,
    total_mobility,
)


class NonlinearSolveError(RuntimeError):
    pass


@dataclass
class FASConfig:
    num_levels: int = 2
    smoothing_steps: tuple = ()
    coarsest_max_iters: int = 10
    backtracking_theta: float = 0.5
    backtracking_budget: int = 8
    nonlinear_tol: float = 1e-6
    max_outer_cycles: int = 50
    # optional per-cell limit on fine-level Newton saturation changes (None: bounds chopping only)
    max_saturation_change: float | None = None

    def __post_init__(self):
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if not 0.0 < self.backtracking_theta < 1.0:
            raise ValueError("backtracking_theta must lie in (0, 1)")
        if self.coarsest_max_iters < 1 or self.max_outer_cycles < 1:
            raise ValueError("iteration limits must be positive")
        self.smoothing_steps = tuple(int(n) for n in self.smoothing_steps)
        if any(n < 1 for n in self.smoothing_steps):
            raise ValueError("smoothing step counts must be >= 1")
        if self.max_saturation_change is not None and self.max_saturation_change <= 0:
            raise ValueError("max_saturation_change must be positive")

    def steps(self, level: int) -> int:
        """Smoothing steps on ``level``; the coarsest level (if not the fine one) uses the iteration cap."""
        if level == self.num_levels - 1 and level > 0:
            return self.coarsest_max_iters
        if level < len(self.smoothing_steps):
            return self.smoothing_steps[level]
        return 1


@dataclass
class JacobianBlocks:
    dr_sigma_dsigma: sp.csr_matrix
    dr_sigma_ds: sp.csr_matrix
    dr_s_dsigma: sp.csr_matrix
    dr_s_ds: sp.csr_matrix
    D: sp.csr_matrix
    sigma: np.ndarray
    inv_mobility: np.ndarray
    d_inv_mobility: np.ndarray

    def full(self) -> sp.csr_matrix:
        nc = self.D.shape[0]
        zero = sp.csr_matrix((nc, nc))
        return sp.bmat([
            [self.dr_sigma_dsigma, -self.D.T, self.dr_sigma_ds],
            [self.D, zero, zero],
            [self.dr_s_dsigma, zero, self.dr_s_ds],
        ], format="csr")


def assemble_jacobian(level: LevelData, x, dt: float, fluids: FluidProps) -> JacobianBlocks:
    """Jacobian at ``x`` with the upwind directions frozen at ``x``'s flux."""
    sigma, _, s = level.split(np.asarray(x.vector() if isinstance(x, State) else x, dtype=float))
    nf, nc = level.n_flux, level.n_cells
    invlam = 1.0 / total_mobility(s, fluids)
    dinv = inverse_mobility_derivative(s, fluids)
    c, r, k, v = level.lm_cell, level.lm_row, level.lm_col, level.lm_val
    Jss_sig = sp.csr_matrix((v * invlam[c], (r, k)), shape=(nf, nf))
    Jsig_s = sp.csr_matrix((v * dinv[c] * sigma[k], (r, c)), shape=(nf, nc))
    U = coarse_upwind_operator(sigma, level)
    fw = fractional_flow(s, fluids)
    dfw = fractional_flow_derivative(s, fluids)
    J_s_sig = (level.D @ sp.diags(U @ fw)).tocsr()
    J_s_s = (sp.diags(level.pore_volume / dt) + level.D @ sp.diags(sigma) @ U @ sp.diags(dfw)).tocsr()
    return JacobianBlocks(Jss_sig, Jsig_s, J_s_sig, J_s_s, level.D, sigma.copy(), invlam, dinv)


# ---------------------------------------------------------------------------
# per-step context


@dataclass
class ResidualScale:
    """Block scaling of the residual norm: flux rows by ``p_ref``, cell rows by ``q_ref``."""

    p_ref: float = 1.0
    q_ref: float = 1.0

    def weights(self, level: LevelData) -> np.ndarray:
        return np.concatenate([np.full(level.n_flux, 1.0 / self.p_ref), np.full(2 * level.n_cells, 1.0 / self.q_ref)])

    @classmethod
    def for_problem(cls, fine: LevelData, s, fluids: FluidProps) -> "ResidualScale":
        q = float(np.sum(fine.f))
        q = q if q > 0 else 1.0
        m = float(np.median(fine.flux_mass(s, fluids).diagonal())) if fine.n_flux else 1.0
        return cls(p_ref=q * m if m > 0 else 1.0, q_ref=q)


@dataclass
class StepContext:
    hierarchy: Hierarchy
    fluids: FluidProps
    dt: float
    h: list
    scale: ResidualScale
    linear: LinearSolverConfig = field(default_factory=LinearSolverConfig)
    linear_stats: LinearStats = field(default_factory=LinearStats)
    denom: float = 1.0
    smoothing_count: dict = field(default_factory=dict)
    _weights: dict = field(default_factory=dict)

    @classmethod
    def create(cls, hierarchy: Hierarchy, fluids: FluidProps, dt: float, prev_s, scale=None,
               linear: LinearSolverConfig | None = None) -> "StepContext":
        if dt <= 0:
            raise ValueError("time step must be positive")
        h = hierarchy.restrict_h(hierarchy.fine_h(prev_s, dt))
        scale = scale or ResidualScale.for_problem(hierarchy.levels[0], prev_s, fluids)
        return cls(hierarchy, fluids, dt, h, scale, linear or LinearSolverConfig())

    def level(self, l: int) -> LevelData:
        return self.hierarchy.levels[l]

    def residual(self, l: int, x) -> np.ndarray:
        return level_residual(self.level(l), x, self.dt, self.h[l], self.fluids)

    def norm(self, l: int, r) -> float:
        if l not in self._weights:
            self._weights[l] = self.scale.weights(self.level(l))
        return float(np.linalg.norm(self._weights[l] * r))

    def normalized(self, x) -> float:
        return self.norm(0, self.residual(0, x)) / self.denom


def _vec(x):
    return x.vector() if isinstance(x, State) else np.asarray(x, dtype=float)


def _wrap(x_like, x, level: LevelData):
    return State.from_vector(x, level.n_flux, level.n_cells) if isinstance(x_like, State) else x


def _chop(level: LevelData, x) -> np.ndarray:
    nf, nc = level.n_flux, level.n_cells
    x[nf + nc:] = np.clip(x[nf + nc:], 0.0, 1.0)
    return x


def newton_update(l: int, x, b, ctx: StepContext, max_ds: float | None = None) -> np.ndarray:
    level = ctx.level(l)
    jac = assemble_jacobian(level, x, ctx.dt, ctx.fluids)
    dx = solve_newton_system(level, jac, ctx.residual(l, x) - b, ctx.linear, ctx.linear_stats)
    if l == 0 and max_ds is not None:
        k = level.n_flux + level.n_cells
        dx[k:] = np.clip(dx[k:], -max_ds, max_ds)
    x = x - dx
    if not np.all(np.isfinite(x)):
        raise NonlinearSolveError(f"non-finite Newton iterate on level {l}")
    return _chop(level, x) if l == 0 else x


def nonlinear_smoothing(l: int, x, b, n_steps: int, ctx: StepContext, config: FASConfig):
    """Up to ``n_steps`` Newton updates on level ``l`` for ``r(x) = b``."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    xv = _vec(x).copy()
    bv = _vec(b) if b is not None else np.zeros_like(xv)
    for _ in range(n_steps):
        if ctx.norm(l, ctx.residual(l, xv) - bv) <= config.nonlinear_tol * ctx.denom:
            break
        xv = newton_update(l, xv, bv, ctx, config.max_saturation_change)
        ctx.smoothing_count[l] = ctx.smoothing_count.get(l, 0) + 1
    return _wrap(x, xv, ctx.level(l))


def backtracking(x, direction, theta: float, l: int, b, ctx: StepContext, budget: int = 8):
    """Largest ``alpha`` in ``1, theta, theta^2, ...`` not increasing ``||r - b||``.

    Returns ``x`` itself when no trial within ``budget`` is accepted.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    xv = _vec(x)
    d = _vec(direction)
    if not np.any(d):
        return x
    bv = _vec(b) if b is not None else np.zeros_like(xv)
    level = ctx.level(l)
    base = ctx.norm(l, ctx.residual(l, xv) - bv)
    alpha = 1.0
    for _ in range(budget):
        trial = xv + alpha * d
        if l == 0:
            trial = _chop(level, trial)
        val = ctx.norm(l, ctx.residual(l, trial) - bv)
        if np.isfinite(val) and val <= base:
            return _wrap(x, trial, level)
        alpha *= theta
    return x


def fas_cycle(l: int, x, b, ctx: StepContext, config: FASConfig):
    """One FAS V-cycle started on level ``l`` for ``r^l(x) = b``."""
    xv = _vec(x).copy()
    bv = _vec(b) if b is not None else np.zeros_like(xv)
    n_levels = min(config.num_levels, ctx.hierarchy.num_levels)
    if l == n_levels - 1:
        return _wrap(x, _vec(nonlinear_smoothing(l, xv, bv, config.steps(l), ctx, config)), ctx.level(l))
    ns = config.steps(l)
    xv = nonlinear_smoothing(l, xv, bv, ns, ctx, config)
    ops = ctx.hierarchy.ops[l]
    xc = ops.project(xv)
    bc = ctx.residual(l + 1, xc) - ops.restrict(ctx.residual(l, xv) - bv)
    yc = fas_cycle(l + 1, xc, bc, ctx, config)
    xv = _vec(backtracking(xv, ops.interpolate(yc - xc), config.backtracking_theta, l, bv, ctx,
                           config.backtracking_budget))
    xv = nonlinear_smoothing(l, xv, bv, ns, ctx, config)
    return _wrap(x, xv, ctx.level(l))


# ---------------------------------------------------------------------------
# one time step and the time loop


@dataclass
class StepOutcome:
    x: np.ndarray
    iterations: int
    converged: bool
    normalized_residual: float
    history: list


def solve_time_step(ctx: StepContext, x0, solver: str, config: FASConfig) -> StepOutcome:
    """Iterate V-cycles (``fas``) or Newton updates (``newton``) on the fine level."""
    if solver not in ("fas", "newton"):
        raise ValueError(f"unknown solver {solver!r}")
    x = _vec(x0).copy()
    r0 = ctx.norm(0, ctx.residual(0, x))
    ctx.denom = r0 if r0 > 0 else 1.0
    hist = [ctx.normalized(x)]
    it = 0
    zero = np.zeros_like(x)
    while hist[-1] > config.nonlinear_tol and it < config.max_outer_cycles:
        if solver == "newton":
            x = _vec(nonlinear_smoothing(0, x, zero, 1, ctx, config))
        else:
            x = fas_cycle(0, x, zero, ctx, config)
        it += 1
        hist.append(ctx.normalized(x))
        if not np.isfinite(hist[-1]):
            break
    return StepOutcome(x, it, bool(hist[-1] <= config.nonlinear_tol), hist[-1], hist)


def time_step_sizes(dt0: float, nu: float, t_final: float, max_steps: int | None = None) -> list[float]:
    """``dt_m = nu dt_{m-1}``, with the last step truncated to land on ``t_final``."""
    if dt0 <= 0 or t_final <= 0:
        raise ValueError("dt0 and t_final must be positive")
    if nu < 1:
        raise ValueError("nu must be >= 1")
    out, t, dt = [], 0.0, dt0
    eps = 1e-12 * t_final
    while t < t_final - eps and (max_steps is None or len(out) < max_steps):
        step = min(dt, t_final - t)
        if t_final - (t + step) <= eps:
            step = t_final - t
        out.append(step)
        t += step
        dt *= nu
    return out


def initial_state(fine: LevelData, s0, wells=()) -> np.ndarray:
    """sigma = 0, p = BHP of the first producer (0 without producers), s = s0."""
    prods = producers(wells)
    p0 = prods[0].bhp if prods else 0.0
    s = np.broadcast_to(np.asarray(s0, dtype=float), (fine.n_cells,)).copy()
    return np.concatenate([np.zeros(fine.n_flux), np.full(fine.n_cells, p0), s])


def level_cfl(fine: LevelData, sigma, dt: float, fluids: FluidProps) -> float:
    inflow = cell_inflow(sigma, fine.face_cells, fine.n_cells, fine.f)
    if not np.any(inflow):
        return 0.0
    return float(np.max(dt * inflow / fine.pore_volume) * max_fractional_flow_derivative(fluids))


@dataclass
class StepResult:
    step: int
    t: float
    dt: float
    cfl: float
    iterations: int
    smoothing_steps: dict
    linear_iterations: dict
    wall_time: float
    converged: bool
    normalized_residual: float
    linear_fallbacks: int = 0


@dataclass
class TimeLoopResult:
    steps: list
    state: State
    converged: bool
    failure: str = ""


def time_loop(hierarchy: Hierarchy, fluids: FluidProps, x0, dt_sizes, solver: str = "fas",
              config: FASConfig | None = None, linear: LinearSolverConfig | None = None,
              scale: ResidualScale | None = None, callback=None) -> TimeLoopResult:
    """Advance through ``dt_sizes``; the run stops at the first failed step."""
    config = config or FASConfig()
    fine = hierarchy.levels[0]
    x = _vec(x0).copy()
    s_prev = x[fine.n_flux + fine.n_cells:].copy()
    scale = scale or ResidualScale.for_problem(fine, s_prev, fluids)
    steps, t = [], 0.0
    for m, dt in enumerate(dt_sizes):
        ctx = StepContext.create(hierarchy, fluids, dt, s_prev, scale, linear)
        start = time.perf_counter()
        failure = ""
        try:
            out = solve_time_step(ctx, x, solver, config)
        except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
            out = StepOutcome(x, 0, False, np.inf, [])
            failure = str(exc)
        wall = time.perf_counter() - start
        t += dt
        rec = StepResult(
            step=m, t=t, dt=dt,
            cfl=level_cfl(fine, out.x[:fine.n_flux], dt, fluids) if out.converged else float("nan"),
            iterations=out.iterations, smoothing_steps=dict(ctx.smoothing_count),
            linear_iterations=dict(ctx.linear_stats.per_level), wall_time=wall,
            converged=out.converged, normalized_residual=out.normalized_residual,
            linear_fallbacks=ctx.linear_stats.fallbacks)
        steps.append(rec)
        if callback is not None:
            callback(rec, out.x)
        if not out.converged:
            state = State.from_vector(x, fine.n_flux, fine.n_cells)
            return TimeLoopResult(steps, state, False, failure or "nonlinear iteration limit reached")
        x = out.x
        s_prev = x[fine.n_flux + fine.n_cells:].copy()
    return TimeLoopResult(steps, State.from_vector(x, fine.n_flux, fine.n_cells), True)


__all__ = [
    "FASConfig", "JacobianBlocks", "NonlinearSolveError", "ResidualScale", "StepContext", "StepOutcome",
    "StepResult", "TimeLoopResult", "assemble_jacobian", "backtracking", "fas_cycle", "initial_state",
    "level_cfl", "newton_update", "nonlinear_smoothing", "solve_time_step", "time_loop", "time_step_sizes",
]
