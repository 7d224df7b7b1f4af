"""Restarted, right-preconditioned GMRES.

Right preconditioning keeps the minimized quantity equal to the true
residual ``b - A x``, so the stopping test needs no extra products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla


@dataclass
class KrylovStats:
    iterations: int = 0
    relative_residual: float = np.inf
    converged: bool = False
    breakdown: bool = False
    history: list = field(default_factory=list)


def _as_apply(op, n):
    if op is None:
        return lambda v: v
    if callable(op):
        return op
    return spla.aslinearoperator(op).matvec


def gmres(A, b, M=None, tol: float = 1e-8, max_iter: int = 400, restart: int = 50, x0=None):
    """Solve ``A x = b``; returns ``(x, KrylovStats)``.

    ``A`` and ``M`` may be matrices, linear operators or callables; ``M``
    approximates ``A^{-1}``.  Convergence means ``||b - A x|| <= tol ||b||``.
    """
    b = np.asarray(b, dtype=float)
    n = len(b)
    matvec = _as_apply(A, n)
    prec = _as_apply(M, n)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    stats = KrylovStats()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        stats.relative_residual = 0.0
        stats.converged = True
        return np.zeros(n), stats
    r = b - matvec(x)
    beta = np.linalg.norm(r)
    stats.history.append(beta / bnorm)
    while True:
        if beta <= tol * bnorm:
            stats.converged = True
            break
        if stats.iterations >= max_iter:
            break
        m = min(restart, max_iter - stats.iterations)
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k_used = 0
        for k in range(m):
            Z[k] = prec(V[k])
            w = matvec(Z[k])
            for j in range(k + 1):
                H[j, k] = np.dot(w, V[j])
                w = w - H[j, k] * V[j]
            # one reorthogonalization pass for robustness
            for j in range(k + 1):
                c = np.dot(w, V[j])
                H[j, k] += c
                w = w - c * V[j]
            hnext = np.linalg.norm(w)
            H[k + 1, k] = hnext
            for j in range(k):
                t = cs[j] * H[j, k] + sn[j] * H[j + 1, k]
                H[j + 1, k] = -sn[j] * H[j, k] + cs[j] * H[j + 1, k]
                H[j, k] = t
            denom = np.hypot(H[k, k], hnext)
            stats.iterations += 1
            if denom == 0.0:
                stats.breakdown = True
                break
            k_used = k + 1
            cs[k], sn[k] = H[k, k] / denom, hnext / denom
            H[k, k] = denom
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            stats.history.append(abs(g[k + 1]) / bnorm)
            # lucky breakdown: the Krylov space is invariant, the solution is exact
            if abs(g[k + 1]) <= tol * bnorm or hnext <= 1e-14 * denom:
                break
            V[k + 1] = w / hnext
        if k_used > 0:
            y = np.linalg.solve(np.triu(H[:k_used, :k_used]), g[:k_used])
            x = x + Z[:k_used].T @ y
        r = b - matvec(x)
        new_beta = np.linalg.norm(r)
        stalled = new_beta > tol * bnorm and (stats.breakdown or new_beta >= beta * (1.0 - 1e-12))
        beta = new_beta
        if stalled:
            stats.breakdown = True
            break
    stats.relative_residual = beta / bnorm
    stats.converged = stats.converged or beta <= tol * bnorm
    return x, stats
