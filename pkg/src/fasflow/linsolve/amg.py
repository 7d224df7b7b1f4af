"""Aggregation AMG for the pressure block, built on pyamg.

Plain (unsmoothed) aggregation with symmetric strength of connection,
piecewise-constant tentative prolongation, Galerkin coarse operators and a
V(1,1) cycle with weighted Jacobi.  When coarsening stalls the operator falls
back to damped Jacobi and says so in its stats.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pyamg
import scipy.sparse as sp

STALL_RATIO = 1.1


@dataclass
class AMGStats:
    levels: int = 1
    sizes: list = field(default_factory=list)
    fallback: bool = False
    reason: str = ""


class AMGPreconditioner:
    """Stationary, linear approximation of ``A^{-1}`` (one V-cycle per call)."""

    def __init__(self, A, omega: float = 2.0 / 3.0, max_coarse: int = 50, max_levels: int = 10):
        A = sp.csr_matrix(A, dtype=float)
        if A.shape[0] != A.shape[1]:
            raise ValueError("AMG needs a square matrix")
        diag = A.diagonal()
        if np.any(diag == 0.0):
            raise ValueError("AMG needs a nonzero diagonal")
        self.shape = A.shape
        self.omega = omega
        self.stats = AMGStats(sizes=[A.shape[0]])
        self._inv_diag = 1.0 / diag
        self._ml = None
        if A.shape[0] <= max_coarse:
            self._direct = sp.linalg.splu(A.tocsc())
            return
        self._direct = None
        smoother = ("jacobi", {"omega": omega, "iterations": 1})
        try:
            ml = pyamg.smoothed_aggregation_solver(
                A, symmetry="symmetric", strength="symmetric", aggregate="standard", smooth=None,
                presmoother=smoother, postsmoother=smoother, max_coarse=max_coarse,
                max_levels=max_levels, coarse_solver="splu", keep=False, improve_candidates=None)
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            self._fallback(f"setup failed: {exc}")
            return
        sizes = [lvl.A.shape[0] for lvl in ml.levels]
        self.stats.sizes = sizes
        self.stats.levels = len(sizes)
        ratios = [a / b for a, b in zip(sizes[:-1], sizes[1:])]
        if len(sizes) < 2 or min(ratios) < STALL_RATIO:
            self._fallback("coarsening stalled")
            return
        # nodes without strong connections stay unaggregated: zero rows in P
        if any(np.any(np.diff(lvl.P.tocsr().indptr) == 0) for lvl in ml.levels[:-1]):
            self._fallback("coarsening stalled: unaggregated nodes")
            return
        self._ml = ml

    def _fallback(self, reason: str) -> None:
        self.stats.fallback = True
        self.stats.reason = reason
        self.stats.levels = 1

    def __call__(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self._direct is not None:
            return self._direct.solve(r)
        if self._ml is None:
            return self.omega * self._inv_diag * r
        return self._ml.solve(r, x0=np.zeros_like(r), tol=1e-300, maxiter=1, cycle="V", accel=None)

    apply = __call__


def build_amg(A11, **kwargs) -> AMGPreconditioner:
    return AMGPreconditioner(A11, **kwargs)
