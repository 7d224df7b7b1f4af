"""Level-of-fill incomplete LU factorization ILU(k), default k = 1.

scipy only ships a threshold-based ILU, so the symbolic and numeric phases
are implemented here.  The pattern of ILU(1) is that of ``A`` plus the
entries produced by one elimination between two original entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


@dataclass
class ILUFactors:
    L: sp.csr_matrix  # unit lower triangular (diagonal stored)
    U: sp.csr_matrix
    level: int
    pivots_replaced: int = 0

    @property
    def shape(self):
        return self.U.shape

    def solve(self, r) -> np.ndarray:
        y = spla.spsolve_triangular(self.L, r, lower=True, unit_diagonal=True)
        return spla.spsolve_triangular(self.U, y, lower=False)

    __call__ = solve


def symbolic_pattern(A: sp.csr_matrix, level: int = 1) -> sp.csr_matrix:
    """Boolean pattern of ILU(``level``) under the standard level-of-fill rule."""
    A = sp.csr_matrix(A)
    n = A.shape[0]
    absA = abs(A)
    base = (absA + sp.identity(n, format="csr")).tocsr()
    if level <= 1:
        if level == 1:
            fill = sp.tril(absA, k=-1, format="csr") @ sp.triu(absA, k=1, format="csr")
            base = (base + fill).tocsr()
        base.data[:] = 1.0
        base.sort_indices()
        return base.astype(bool)
    pat = base
    lev = [dict.fromkeys(pat.indices[pat.indptr[i]:pat.indptr[i + 1]].tolist(), 0) for i in range(n)]
    rows, cols = [], []
    upper = [None] * n
    for i in range(n):
        row = lev[i]
        done = set()
        while True:
            cand = [k for k in row if k < i and k not in done]
            if not cand:
                break
            k = min(cand)
            done.add(k)
            lik = row[k]
            for j, lkj in upper[k].items():
                new = lik + lkj + 1
                if new <= level and new < row.get(j, level + 1):
                    row[j] = new
        upper[i] = {j: v for j, v in row.items() if j > i}
        for j in row:
            rows.append(i)
            cols.append(j)
    return sp.csr_matrix((np.ones(len(rows), dtype=bool), (rows, cols)), shape=A.shape)


def build_ilu(A, level: int = 1, pivot_eps: float = 1e-12) -> ILUFactors:
    """IKJ incomplete factorization restricted to the ILU(``level``) pattern.

    A zero (or tiny) pivot is replaced by ``sign * pivot_eps * ||row||_2`` and
    counted in ``pivots_replaced``.
    """
    A = sp.csr_matrix(A, dtype=float)
    A.sort_indices()
    n = A.shape[0]
    if A.shape[1] != n:
        raise ValueError("ILU needs a square matrix")
    pat = symbolic_pattern(A, level)
    pat.sort_indices()
    indptr, indices = pat.indptr, pat.indices
    data = _values_on_pattern(A, pat)
    diag_pos = np.empty(n, dtype=np.int64)
    for i in range(n):
        seg = indices[indptr[i]:indptr[i + 1]]
        diag_pos[i] = indptr[i] + np.searchsorted(seg, i)
    row_norm = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
    replaced = 0
    pos = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        lo, hi = indptr[i], indptr[i + 1]
        cols = indices[lo:hi]
        pos[cols] = np.arange(lo, hi)
        for p in range(lo, diag_pos[i]):
            k = indices[p]
            data[p] /= data[diag_pos[k]]
            ks, ke = diag_pos[k] + 1, indptr[k + 1]
            kcols = indices[ks:ke]
            tgt = pos[kcols]
            ok = tgt >= 0
            data[tgt[ok]] -= data[p] * data[ks:ke][ok]
        d = data[diag_pos[i]]
        floor = pivot_eps * (row_norm[i] if row_norm[i] > 0 else 1.0)
        if abs(d) < floor:
            data[diag_pos[i]] = floor if d >= 0 else -floor
            replaced += 1
        pos[cols] = -1
    F = sp.csr_matrix((data, indices.copy(), indptr.copy()), shape=(n, n))
    L = sp.tril(F, k=-1, format="csr") + sp.identity(n, format="csr")
    U = sp.triu(F, format="csr")
    return ILUFactors(L=L.tocsr(), U=U, level=level, pivots_replaced=replaced)


def _values_on_pattern(A: sp.csr_matrix, pat: sp.csr_matrix) -> np.ndarray:
    # scatter A's entries onto the (superset) pattern via sorted global keys
    n = A.shape[1]
    prow = np.repeat(np.arange(pat.shape[0]), np.diff(pat.indptr))
    pkey = prow * n + pat.indices
    coo = A.tocoo()
    vals = np.zeros(pat.nnz)
    np.add.at(vals, np.searchsorted(pkey, coo.row.astype(np.int64) * n + coo.col), coo.data)
    return vals


def build_ilu1(A, pivot_eps: float = 1e-12) -> ILUFactors:
    return build_ilu(A, level=1, pivot_eps=pivot_eps)


def build_ilu0(A, pivot_eps: float = 1e-12) -> ILUFactors:
    return build_ilu(A, level=0, pivot_eps=pivot_eps)
