"""Two-stage CPR preconditioner for the reduced (pressure, saturation) system.

Stage one is the block lower-triangular approximation with an AMG pressure
solve and an l1-Jacobi saturation solve, stage two an ILU(1) sweep on the
monolithic matrix::

    B = B1 + B2 (I - A B1)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .amg import build_amg
from .ilu import ILUFactors, build_ilu1


@dataclass
class L1Jacobi:
    inv_diag: np.ndarray
    zero_rows: int = 0

    def __call__(self, r) -> np.ndarray:
        return self.inv_diag * np.asarray(r)


def build_l1_jacobi(A22) -> L1Jacobi:
    """``diag(sum_j |a_ij|)^{-1}``; empty rows get 1 and are counted."""
    sums = np.asarray(abs(sp.csr_matrix(A22)).sum(axis=1)).ravel()
    zero = sums == 0.0
    sums[zero] = 1.0
    return L1Jacobi(1.0 / sums, int(zero.sum()))


class CPRPreconditioner:
    def __init__(self, A11, A12, A21, A22, B11=None, B22=None, B2=None):
        self.A11, self.A12 = sp.csr_matrix(A11), sp.csr_matrix(A12)
        self.A21, self.A22 = sp.csr_matrix(A21), sp.csr_matrix(A22)
        self.n1 = self.A11.shape[0]
        self.A = sp.bmat([[self.A11, self.A12], [self.A21, self.A22]], format="csr")
        self.B11 = build_amg(self.A11) if B11 is None else B11
        self.B22 = build_l1_jacobi(self.A22) if B22 is None else B22
        self.B2 = build_ilu1(self.A) if B2 is None else B2

    @classmethod
    def from_reduced(cls, system) -> "CPRPreconditioner":
        return cls(system.A11, system.A12, system.A21, system.A22)

    @property
    def shape(self):
        return self.A.shape

    def first_stage(self, r) -> np.ndarray:
        r1, r2 = r[: self.n1], r[self.n1:]
        y1 = self.B11(r1)
        y2 = self.B22(r2 - self.A21 @ y1)
        return np.concatenate([y1, y2])

    def __call__(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        y = self.first_stage(r)
        if self.B2 is None or self.B2 is False:
            return y
        return y + self.B2(r - self.A @ y)

    @property
    def stats(self) -> dict:
        amg = getattr(self.B11, "stats", None)
        return {
            "amg_levels": getattr(amg, "levels", 0),
            "amg_fallback": bool(getattr(amg, "fallback", False)),
            "l1_zero_rows": getattr(self.B22, "zero_rows", 0),
            "ilu_pivots_replaced": getattr(self.B2, "pivots_replaced", 0) if isinstance(self.B2, ILUFactors) else 0,
        }


def apply_cpr(pre: CPRPreconditioner, r) -> np.ndarray:
    return pre(r)
