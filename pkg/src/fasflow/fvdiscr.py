"""Fine-level TPFA discretization of the mixed fractional-flow system.

Unknowns are ordered ``x = [sigma; p; s]`` where ``sigma`` holds the interior
face fluxes followed by one flux per producer.  The residual blocks are::

    r_sigma = M(s) sigma - D^T p - g
    r_p     = D sigma - f
    r_s     = W s / dt + D diag(sigma) U(sigma) f_w(s) - W s_prev / dt - h

``D`` maps fluxes to net cell outflow.  A producer flux is positive when
fluid leaves the reservoir, so its column carries ``+1`` in the perforated
cell row and ``g`` holds ``-p_bh`` in producer rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import Mesh
from .physics import FluidProps, fractional_flow, injectors, producers, total_mobility


@dataclass
class State:
    sigma: np.ndarray
    p: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        self.s = np.asarray(self.s, dtype=float)
        if len(self.p) != len(self.s):
            raise ValueError("pressure and saturation vectors differ in length")

    @property
    def n_flux(self) -> int:
        return len(self.sigma)

    @property
    def n_cells(self) -> int:
        return len(self.p)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.sigma, self.p, self.s])

    @classmethod
    def from_vector(cls, x: np.ndarray, n_flux: int, n_cells: int) -> "State":
        x = np.asarray(x, dtype=float)
        if len(x) != n_flux + 2 * n_cells:
            raise ValueError("vector length does not match the layout")
        return cls(x[:n_flux].copy(), x[n_flux:n_flux + n_cells].copy(), x[n_flux + n_cells:].copy())

    def copy(self) -> "State":
        return State(self.sigma.copy(), self.p.copy(), self.s.copy())


@dataclass
class ResidualVector:
    r_sigma: np.ndarray
    r_p: np.ndarray
    r_s: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.r_sigma, self.r_p, self.r_s])

    @classmethod
    def from_vector(cls, r, n_flux: int, n_cells: int) -> "ResidualVector":
        r = np.asarray(r, dtype=float)
        return cls(r[:n_flux], r[n_flux:n_flux + n_cells], r[n_flux + n_cells:])


@dataclass
class FineOperators:
    D: sp.csr_matrix
    W: sp.dia_matrix
    g: np.ndarray
    f: np.ndarray
    h_base: np.ndarray
    face_cells: np.ndarray
    well_cells: np.ndarray

    @property
    def n_faces(self) -> int:
        return len(self.face_cells)

    @property
    def n_flux(self) -> int:
        return self.D.shape[1]

    @property
    def n_cells(self) -> int:
        return self.D.shape[0]


def well_cells(wells) -> np.ndarray:
    return np.array([w.cell for w in producers(wells)], dtype=np.int64)


def assemble_divergence(mesh: Mesh, wells=()) -> sp.csr_matrix:
    """Signed cells x (faces + producers) incidence matrix (no mesh size)."""
    nf = mesh.n_faces
    wc = well_cells(wells)
    nw = len(wc)
    fc = mesh.face_cells
    rows = np.concatenate([fc[:, 0], fc[:, 1], wc])
    cols = np.concatenate([np.arange(nf), np.arange(nf), nf + np.arange(nw)])
    vals = np.concatenate([np.ones(nf), -np.ones(nf), np.ones(nw)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(mesh.n_cells, nf + nw))


def assemble_flux_mass(mesh: Mesh, wells, s, fluids: FluidProps) -> sp.dia_matrix:
    lam = total_mobility(s, fluids)
    fc = mesh.face_cells
    ht = mesh.half_trans
    face = 1.0 / (lam[fc[:, 0]] * ht[:, 0]) + 1.0 / (lam[fc[:, 1]] * ht[:, 1])
    prod = [1.0 / (lam[w.cell] * w.well_index) for w in producers(wells)]
    return sp.diags(np.concatenate([face, prod]))


def assemble_fine_operators(mesh: Mesh, wells=()) -> FineOperators:
    prods = producers(wells)
    f = np.zeros(mesh.n_cells)
    for w in injectors(wells):
        f[w.cell] += w.rate
    g = np.concatenate([np.zeros(mesh.n_faces), [-w.bhp for w in prods]])
    return FineOperators(
        D=assemble_divergence(mesh, wells),
        W=sp.diags(mesh.pore_volumes),
        g=g,
        f=f,
        h_base=f.copy(),  # injectors carry pure wetting phase
        face_cells=mesh.face_cells.copy(),
        well_cells=well_cells(wells),
    )


def upwind_operator(sigma, face_cells, well_cells, n_cells: int) -> sp.csr_matrix:
    """0/1 selector (faces + producers) x cells.

    Face rows pick cell K when sigma > 0 and cell L otherwise; producer rows
    always pick the perforated cell.
    """
    sigma = np.asarray(sigma, dtype=float)
    nf = len(face_cells)
    nw = len(well_cells)
    if len(sigma) != nf + nw:
        raise ValueError("flux vector length mismatch")
    cols = np.where(sigma[:nf] > 0.0, face_cells[:, 0], face_cells[:, 1])
    cols = np.concatenate([cols, well_cells]).astype(np.int64)
    return sp.csr_matrix((np.ones(nf + nw), (np.arange(nf + nw), cols)), shape=(nf + nw, n_cells))


def transport_operator(sigma, s, dt: float, ops: FineOperators, fluids: FluidProps) -> np.ndarray:
    if dt <= 0:
        raise ValueError("time step must be positive")
    U = upwind_operator(sigma, ops.face_cells, ops.well_cells, ops.n_cells)
    return ops.W @ s / dt + ops.D @ (np.asarray(sigma) * (U @ fractional_flow(s, fluids)))


def residual(state: State, prev_s, dt: float, ops: FineOperators, mesh: Mesh, wells,
             fluids: FluidProps) -> ResidualVector:
    if state.n_flux != ops.n_flux or state.n_cells != ops.n_cells or len(prev_s) != ops.n_cells:
        raise ValueError("state does not match the discretization")
    if dt <= 0:
        raise ValueError("time step must be positive")
    M = assemble_flux_mass(mesh, wells, state.s, fluids)
    h0 = ops.W @ np.asarray(prev_s, dtype=float) / dt + ops.h_base
    return ResidualVector(
        r_sigma=M @ state.sigma - ops.D.T @ state.p - ops.g,
        r_p=ops.D @ state.sigma - ops.f,
        r_s=transport_operator(state.sigma, state.s, dt, ops, fluids) - h0,
    )
