"""Reduction of the Newton system to a (pressure-like, saturation) system.

The full Jacobian system is::

    [ Jss_sigma  -D^T  J_sigma_s ] [dsigma]   [r_sigma]
    [ D           0    0         ] [dp    ] = [r_p    ]
    [ J_s_sigma   0    J_ss      ] [ds    ]   [r_s    ]

On the fine level the flux-mass block is diagonal and simply eliminated.  On
coarse levels it is block diagonal only after hybridization: every cell owns
one-sided copies of its face fluxes, continuity is imposed with face
pressures, and the per-cell saddle-point blocks are eliminated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from ..hierarchy import LevelData


@dataclass
class ReducedSystem:
    A11: sp.csr_matrix
    A12: sp.csr_matrix
    A21: sp.csr_matrix
    A22: sp.csr_matrix
    xi1: np.ndarray
    xi2: np.ndarray
    recovery: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kind: str = "fine"

    @property
    def n1(self) -> int:
        return self.A11.shape[0]

    @property
    def n2(self) -> int:
        return self.A22.shape[0]

    def matrix(self) -> sp.csr_matrix:
        return sp.bmat([[self.A11, self.A12], [self.A21, self.A22]], format="csr")

    def rhs(self) -> np.ndarray:
        return np.concatenate([self.xi1, self.xi2])

    def recover(self, u) -> np.ndarray:
        """Full ``[dsigma; dp; ds]`` from a solution ``u`` of the reduced system."""
        u = np.asarray(u)
        return self.recovery(u[: self.n1], u[self.n1:])


def _split_rhs(rhs, n_flux, n_cells):
    r = np.asarray(rhs.vector() if hasattr(rhs, "vector") else rhs, dtype=float)
    return r[:n_flux], r[n_flux:n_flux + n_cells], r[n_flux + n_cells:]


def reduce_fine(jac, rhs) -> ReducedSystem:
    """Eliminate the flux from a system whose flux-mass block is diagonal."""
    Mdiag = jac.dr_sigma_dsigma.diagonal()
    if np.any(Mdiag == 0.0) or (jac.dr_sigma_dsigma - sp.diags(Mdiag)).count_nonzero():
        raise ArithmeticError("flux-mass block is not an invertible diagonal")
    D = jac.D
    n_flux, n_cells = D.shape[1], D.shape[0]
    r_sig, r_p, r_s = _split_rhs(rhs, n_flux, n_cells)
    Minv = sp.diags(1.0 / Mdiag)
    DM = (D @ Minv).tocsr()
    JM = (jac.dr_s_dsigma @ Minv).tocsr()
    Jss = jac.dr_sigma_ds
    A11 = (DM @ D.T).tocsr()
    A12 = (-(DM @ Jss)).tocsr()
    A21 = (JM @ D.T).tocsr()
    A22 = (jac.dr_s_ds - JM @ Jss).tocsr()
    xi1 = r_p - DM @ r_sig
    xi2 = r_s - JM @ r_sig

    def recovery(dp, ds):
        dsig = (r_sig + D.T @ dp - Jss @ ds) / Mdiag
        return np.concatenate([dsig, dp, ds])

    return ReducedSystem(A11, A12, A21, A22, xi1, xi2, recovery, kind="fine")


@dataclass
class _HybridLayout:
    offsets: np.ndarray
    copy_dof: np.ndarray
    copy_cell: np.ndarray
    C: sp.csr_matrix
    average: sp.csr_matrix
    primary: np.ndarray


def _hybrid_layout(level: LevelData) -> _HybridLayout:
    nf = level.n_faces
    sizes = np.array([len(level.local_dofs(K)) for K in range(level.n_cells)], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    copy_dof = np.concatenate([level.local_dofs(K) for K in range(level.n_cells)]).astype(np.int64)
    copy_cell = np.repeat(np.arange(level.n_cells), sizes)
    is_face = copy_dof < nf
    k_side = np.zeros(len(copy_dof), dtype=bool)
    k_side[is_face] = level.face_cells[copy_dof[is_face], 0] == copy_cell[is_face]
    n_hat = len(copy_dof)
    idx = np.flatnonzero(is_face)
    C = sp.csr_matrix((np.where(k_side[idx], 1.0, -1.0), (copy_dof[idx], idx)), shape=(nf, n_hat))
    weight = np.where(is_face, 0.5, 1.0)
    average = sp.csr_matrix((weight, (copy_dof, np.arange(n_hat))), shape=(level.n_flux, n_hat))
    primary = np.flatnonzero(k_side | ~is_face)
    counts = np.bincount(copy_dof, minlength=level.n_flux)
    if np.any(counts[:nf] != 2) or np.any(counts[nf:] != 1):
        raise ArithmeticError("every face must appear in exactly two cells")
    return _HybridLayout(offsets, copy_dof, copy_cell, C, average, primary)


def hybridize_coarse(level: LevelData, jac, rhs) -> ReducedSystem:
    """Hybridize and eliminate the flux and cell pressure.

    Unknowns of the reduced system are the face pressures (one per interior
    face; the sign is chosen so that its block is positive semi-definite) and
    the cell saturations.
    """
    lay = _hybrid_layout(level)
    n_flux, n_cells = level.n_flux, level.n_cells
    r_sig, r_p, r_s = _split_rhs(rhs, n_flux, n_cells)
    sigma = jac.sigma
    n_hat = len(lay.copy_dof)

    z_blocks, zp_blocks, pz_blocks, pp_blocks, a_vals = [], [], [], [], []
    for K in range(n_cells):
        dofs = level.local_dofs(K)
        A = level.local_mass(K) * jac.inv_mobility[K]
        d = level.D[K, dofs].toarray().ravel()
        n = len(dofs)
        S = np.zeros((n + 1, n + 1))
        S[:n, :n] = A
        S[:n, n] = -d
        S[n, :n] = d
        # conditioning: scale the pressure column/row to the flux block
        scale = np.mean(np.abs(np.diag(A))) if n else 1.0
        S[:n, n] *= scale
        Z = np.linalg.inv(S)
        Z[n, :] *= scale
        z_blocks.append(Z[:n, :n])
        zp_blocks.append(Z[:n, n:])
        pz_blocks.append(Z[n:, :n])
        pp_blocks.append(Z[n:, n:])
        a_vals.append(jac.d_inv_mobility[K] * (level.local_mass(K) @ sigma[dofs]))

    Zss = sp.block_diag(z_blocks, format="csr")
    Zsp = sp.block_diag(zp_blocks, format="csr")
    Zps = sp.block_diag(pz_blocks, format="csr")
    Zpp = sp.block_diag(pp_blocks, format="csr")
    A_sig_s = sp.csr_matrix((np.concatenate(a_vals), (np.arange(n_hat), lay.copy_cell)), shape=(n_hat, n_cells))
    A_s_sig = (jac.dr_s_dsigma @ lay.average).tocsr()

    r_hat = np.zeros(n_hat)
    r_hat[lay.primary] = r_sig[lay.copy_dof[lay.primary]]
    C, Ct = lay.C, lay.C.T.tocsr()
    z_rhs_sig = Zss @ r_hat + Zsp @ r_p

    ZC = (Zss @ Ct).tocsr()
    ZA = (Zss @ A_sig_s).tocsr()
    A11 = (C @ ZC).tocsr()
    A11 = 0.5 * (A11 + A11.T)
    A12 = (C @ ZA).tocsr()
    A21 = (-(A_s_sig @ ZC)).tocsr()
    A22 = (jac.dr_s_ds - A_s_sig @ ZA).tocsr()
    xi1 = C @ z_rhs_sig
    xi2 = r_s - A_s_sig @ z_rhs_sig

    def recovery(lam, ds):
        q = r_hat - A_sig_s @ ds - Ct @ lam
        sig_hat = Zss @ q + Zsp @ r_p
        dp = Zps @ q + Zpp @ r_p
        return np.concatenate([lay.average @ sig_hat, dp, ds])

    return ReducedSystem(sp.csr_matrix(A11), A12, A21, A22, xi1, xi2, recovery, kind="hybrid")
