"""Multilevel structure: aggregation, intergrid operators and coarse operators.

Every level, including the fine one, is described by a :class:`LevelData`,
which is enough to evaluate the level residual and its Jacobian without
touching any other level:

* the flux-space mass matrix is stored as lambda-free local matrices, one per
  cell, and assembled as ``M(s) = sum_K M_K / lambda(s_K)``;
* ``D`` is the level divergence, ``pore_volume`` the diagonal of ``W``;
* ``p_neg`` holds, per face, the summed negative part of the level-0 flux
  basis on that face, which defines the generalized upwind operator.

On the fine level the local matrices are diagonal with entries
``1 / Upsilon`` and ``1 / WI``, and ``p_neg`` vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .fvdiscr import ResidualVector, State, assemble_fine_operators
from .grid import CellGraph, Mesh, graph_from_edges
from .partition import PartitionError, canonical_labels, partition_graph, split_disconnected
from .physics import FluidProps, fractional_flow, producers, total_mobility


@dataclass
class LevelData:
    level: int
    face_cells: np.ndarray
    well_cells: np.ndarray
    D: sp.csr_matrix
    pore_volume: np.ndarray
    volume: np.ndarray
    lm_cell: np.ndarray
    lm_row: np.ndarray
    lm_col: np.ndarray
    lm_val: np.ndarray
    p_neg: np.ndarray
    g: np.ndarray
    f: np.ndarray
    h_base: np.ndarray

    @property
    def n_cells(self) -> int:
        return len(self.pore_volume)

    @property
    def n_faces(self) -> int:
        return len(self.face_cells)

    @property
    def n_wells(self) -> int:
        return len(self.well_cells)

    @property
    def n_flux(self) -> int:
        return self.n_faces + self.n_wells

    @property
    def n_unknowns(self) -> int:
        return self.n_flux + 2 * self.n_cells

    @property
    def W(self) -> sp.dia_matrix:
        return sp.diags(self.pore_volume)

    @property
    def well_rows(self) -> np.ndarray:
        return self.n_faces + np.arange(self.n_wells)

    @cached_property
    def flux_cells(self) -> np.ndarray:
        """(n_flux, 2) array of the cells adjacent to each flux; wells repeat their cell."""
        return np.vstack([self.face_cells, np.column_stack([self.well_cells, self.well_cells])])

    @cached_property
    def _local_blocks(self):
        order = np.argsort(self.lm_cell, kind="stable")
        bounds = np.searchsorted(self.lm_cell[order], np.arange(self.n_cells + 1))
        blocks = []
        for K in range(self.n_cells):
            t = order[bounds[K]:bounds[K + 1]]
            dofs = np.unique(np.concatenate([self.lm_row[t], self.lm_col[t]]))
            pos = {int(d): i for i, d in enumerate(dofs)}
            A = np.zeros((len(dofs), len(dofs)))
            np.add.at(A, ([pos[int(r)] for r in self.lm_row[t]], [pos[int(c)] for c in self.lm_col[t]]),
                      self.lm_val[t])
            blocks.append((dofs, A))
        return blocks

    def local_dofs(self, K: int) -> np.ndarray:
        return self._local_blocks[K][0]

    def local_mass(self, K: int) -> np.ndarray:
        """Dense lambda-free local mass matrix of cell ``K`` over :meth:`local_dofs`."""
        return self._local_blocks[K][1]

    def flux_mass(self, s, fluids: FluidProps) -> sp.csr_matrix:
        invlam = 1.0 / total_mobility(s, fluids)
        return sp.csr_matrix((self.lm_val * invlam[self.lm_cell], (self.lm_row, self.lm_col)),
                             shape=(self.n_flux, self.n_flux))

    def split(self, x):
        nf, nc = self.n_flux, self.n_cells
        return x[:nf], x[nf:nf + nc], x[nf + nc:]


@dataclass
class CoarseFace:
    K: int
    L: int
    faces: np.ndarray
    signs: np.ndarray


@dataclass
class Aggregation:
    level: int
    cell_to_aggregate: np.ndarray
    coarse_faces: list[CoarseFace]

    @property
    def n_aggregates(self) -> int:
        return int(self.cell_to_aggregate.max()) + 1

    def members(self, a: int) -> np.ndarray:
        return np.flatnonzero(self.cell_to_aggregate == a)


@dataclass
class IntergridOps:
    """Transfer operators between a level and the next coarser one."""

    P_sigma: sp.csr_matrix
    P_s: sp.csr_matrix
    Q_sigma: sp.csr_matrix
    Q_s: sp.csr_matrix
    Q_p: sp.csr_matrix

    @property
    def P_p(self) -> sp.csr_matrix:
        return self.P_s

    @cached_property
    def R_sigma(self) -> sp.csr_matrix:
        return self.P_sigma.T.tocsr()

    @cached_property
    def R_s(self) -> sp.csr_matrix:
        return self.P_s.T.tocsr()

    @property
    def R_p(self) -> sp.csr_matrix:
        return self.R_s

    def _blocks(self, x, n_flux, n_cells):
        return x[:n_flux], x[n_flux:n_flux + n_cells], x[n_flux + n_cells:]

    def interpolate(self, x):
        """Coarse -> fine for a full ``[sigma; p; s]`` vector."""
        sig, p, s = self._blocks(x, self.P_sigma.shape[1], self.P_s.shape[1])
        return np.concatenate([self.P_sigma @ sig, self.P_s @ p, self.P_s @ s])

    def restrict(self, r):
        """Fine -> coarse for a full residual vector."""
        sig, p, s = self._blocks(r, self.P_sigma.shape[0], self.P_s.shape[0])
        return np.concatenate([self.R_sigma @ sig, self.R_s @ p, self.R_s @ s])

    def project(self, x):
        sig, p, s = self._blocks(x, self.P_sigma.shape[0], self.P_s.shape[0])
        return np.concatenate([self.Q_sigma @ sig, self.Q_p @ p, self.Q_s @ s])


# ---------------------------------------------------------------------------
# fine level


def fine_level(mesh: Mesh, wells=()) -> LevelData:
    ops = assemble_fine_operators(mesh, wells)
    fc = mesh.face_cells
    nf = mesh.n_faces
    prods = producers(wells)
    wc = np.array([w.cell for w in prods], dtype=np.int64)
    dof_face = np.arange(nf)
    dof_well = nf + np.arange(len(prods))
    lm_cell = np.concatenate([fc[:, 0], fc[:, 1], wc])
    lm_dof = np.concatenate([dof_face, dof_face, dof_well])
    wi = np.array([w.well_index for w in prods], dtype=float)
    lm_val = np.concatenate([1.0 / mesh.half_trans[:, 0], 1.0 / mesh.half_trans[:, 1], 1.0 / wi])
    return LevelData(
        level=0,
        face_cells=fc.copy(),
        well_cells=wc,
        D=ops.D,
        pore_volume=mesh.pore_volumes.copy(),
        volume=mesh.volumes.copy(),
        lm_cell=lm_cell,
        lm_row=lm_dof,
        lm_col=lm_dof.copy(),
        lm_val=lm_val,
        p_neg=np.zeros(nf),
        g=ops.g,
        f=ops.f,
        h_base=ops.h_base,
    )


def level_graph(level: LevelData) -> CellGraph:
    return graph_from_edges(level.n_cells, level.face_cells)


# ---------------------------------------------------------------------------
# aggregation and transfer operators


def partition_cells(graph: CellGraph, target_factor: float, well_cells=(), level: int = 1,
                    seed: int = 0, finer_face_cells=None) -> Aggregation:
    """Aggregate a level's cells; well cells stay singletons."""
    part = partition_graph(graph, target_factor, singletons=well_cells, seed=seed)
    faces = [] if finer_face_cells is None else build_coarse_faces(part, finer_face_cells)
    return Aggregation(level, part, faces)


def aggregation_from_map(part, finer_face_cells, graph: CellGraph, well_cells=(), level: int = 1) -> Aggregation:
    """Wrap an externally computed cell -> aggregate map (e.g. from a partition file)."""
    part = np.asarray(part, dtype=np.int64)
    for w in well_cells:
        if np.count_nonzero(part == part[w]) != 1:
            raise PartitionError(f"well cell {w} must be a singleton aggregate")
    part = canonical_labels(split_disconnected(graph.adjacency, part))
    return Aggregation(level, part, build_coarse_faces(part, finer_face_cells))


def build_coarse_faces(cell_to_aggregate, finer_face_cells) -> list[CoarseFace]:
    """Group finer faces by the (K < L) aggregate pair they separate.

    ``signs[j]`` is +1 when finer face ``faces[j]`` is oriented from K to L.
    """
    agg = np.asarray(cell_to_aggregate)
    fc = np.asarray(finer_face_cells).reshape(-1, 2)
    a, b = agg[fc[:, 0]], agg[fc[:, 1]]
    cross = np.flatnonzero(a != b)
    lo = np.minimum(a[cross], b[cross])
    hi = np.maximum(a[cross], b[cross])
    sign = np.where(a[cross] < b[cross], 1.0, -1.0)
    n = int(agg.max()) + 1
    keys, inv = np.unique(lo * n + hi, return_inverse=True)
    out = []
    order = np.argsort(inv, kind="stable")
    bounds = np.searchsorted(inv[order], np.arange(len(keys) + 1))
    for i, key in enumerate(keys):
        sel = order[bounds[i]:bounds[i + 1]]
        out.append(CoarseFace(int(key // n), int(key % n), cross[sel], sign[sel]))
    return out


def build_saturation_ops(agg: Aggregation, weights=None):
    """Indicator interpolation ``P_s``, ``R_s = P_s^T`` and ``Q_s = (R P)^-1 R``.

    With ``weights`` (pore volumes), ``Q_s = (R W P)^-1 R W`` instead.
    """
    part = agg.cell_to_aggregate
    n, nc = len(part), agg.n_aggregates
    counts = np.bincount(part, minlength=nc)
    if np.any(counts == 0):
        raise PartitionError("empty aggregate")
    P = sp.csr_matrix((np.ones(n), (np.arange(n), part)), shape=(n, nc))
    R = P.T.tocsr()
    if weights is None:
        Q = sp.diags(1.0 / counts) @ R
    else:
        w = np.asarray(weights, dtype=float)
        Q = sp.diags(1.0 / np.bincount(part, weights=w, minlength=nc)) @ R @ sp.diags(w)
    return P, R, sp.csr_matrix(Q)


def _local_problem_cells(agg: Aggregation, cf: CoarseFace):
    part = agg.cell_to_aggregate
    return np.flatnonzero((part == cf.K) | (part == cf.L))


def solve_local_flux_basis(finer: LevelData, agg: Aggregation, cf: CoarseFace):
    """Normalized flux basis of coarse face ``cf``.

    A mixed problem with unit mobility is solved on the union of the two
    aggregates with no-flow exterior boundary and source ``+|tau_k|/|tau_K|``
    in the cells of ``K`` and ``-|tau_k|/|tau_L|`` in those of ``L`` (the cell
    integrals of ``+-1/|tau|``).  Returns the finer flux indices of the
    support and the basis coefficients, normalized to unit total flux across
    ``cf`` in the K -> L direction.
    """
    part = agg.cell_to_aggregate
    cells = _local_problem_cells(agg, cf)
    in_union = np.zeros(finer.n_cells, dtype=bool)
    in_union[cells] = True
    fc = finer.face_cells
    faces = np.flatnonzero(in_union[fc[:, 0]] & in_union[fc[:, 1]])
    nfl, ncl = len(faces), len(cells)

    fpos = np.full(finer.n_flux, -1, dtype=np.int64)
    fpos[faces] = np.arange(nfl)
    sel = in_union[finer.lm_cell] & (fpos[finer.lm_row] >= 0) & (fpos[finer.lm_col] >= 0)
    A = np.zeros((nfl, nfl))
    np.add.at(A, (fpos[finer.lm_row[sel]], fpos[finer.lm_col[sel]]), finer.lm_val[sel])
    Dl = finer.D[cells][:, faces].toarray()

    vol_K = finer.volume[part == cf.K].sum()
    vol_L = finer.volume[part == cf.L].sum()
    src = np.where(part[cells] == cf.K, finer.volume[cells] / vol_K, -finer.volume[cells] / vol_L)

    # pin the pressure of the first cell; its conservation row is implied.
    # Scaling A only rescales the pressure, so normalize it for conditioning.
    keep = np.arange(1, ncl)
    S = np.zeros((nfl + ncl - 1, nfl + ncl - 1))
    S[:nfl, :nfl] = A / np.mean(np.abs(np.diag(A)))
    S[:nfl, nfl:] = -Dl[keep].T
    S[nfl:, :nfl] = Dl[keep]
    rhs = np.concatenate([np.zeros(nfl), src[keep]])
    try:
        sol = sla.solve(S, rhs, assume_a="sym")
    except sla.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular local problem for coarse face ({cf.K}, {cf.L})") from exc
    phi = sol[:nfl]
    total = float(np.dot(cf.signs, phi[fpos[cf.faces]]))
    if not np.isfinite(total) or abs(total) < 1e-300:
        raise np.linalg.LinAlgError(f"basis of coarse face ({cf.K}, {cf.L}) carries no flux")
    return faces, phi / total


def build_flux_ops(finer: LevelData, agg: Aggregation, bases):
    """``P_sigma`` (basis columns, then identity well columns), ``R_sigma``, ``Q_sigma``."""
    nfc = len(agg.coarse_faces)
    nw = finer.n_wells
    rows, cols, vals = [], [], []
    for i, (dofs, phi) in enumerate(bases):
        rows.append(dofs)
        cols.append(np.full(len(dofs), i))
        vals.append(phi)
    rows.append(finer.well_rows)
    cols.append(nfc + np.arange(nw))
    vals.append(np.ones(nw))
    shape = (finer.n_flux, nfc + nw)
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape)
    qr, qc, qv = [], [], []
    for i, cf in enumerate(agg.coarse_faces):
        qr.append(np.full(len(cf.faces), i))
        qc.append(cf.faces)
        qv.append(cf.signs)
    qr.append(nfc + np.arange(nw))
    qc.append(finer.well_rows)
    qv.append(np.ones(nw))
    Q = sp.csr_matrix((np.concatenate(qv), (np.concatenate(qr), np.concatenate(qc))), shape=shape[::-1])
    return P, P.T.tocsr(), Q


def build_intergrid_ops(finer: LevelData, agg: Aggregation, weighted_projection: bool = False):
    P_s, _, Q_p = build_saturation_ops(agg)
    Q_s = build_saturation_ops(agg, finer.pore_volume)[2] if weighted_projection else Q_p
    bases = [solve_local_flux_basis(finer, agg, cf) for cf in agg.coarse_faces]
    P_sigma, _, Q_sigma = build_flux_ops(finer, agg, bases)
    return IntergridOps(P_sigma=P_sigma, P_s=P_s, Q_sigma=Q_sigma, Q_s=Q_s, Q_p=Q_p)


def negative_flux_sums(P_composite: sp.csr_matrix, fine_face_cells, fine_to_level, coarse_face_cells):
    """Per coarse face, the sum of the negative normal parts of its level-0 basis."""
    fc = np.asarray(fine_face_cells)
    a, b = fine_to_level[fc[:, 0]], fine_to_level[fc[:, 1]]
    cross = np.flatnonzero(a != b)
    lo = np.minimum(a[cross], b[cross])
    hi = np.maximum(a[cross], b[cross])
    sign = np.where(a[cross] < b[cross], 1.0, -1.0)
    n = int(max(fine_to_level.max(), np.max(coarse_face_cells, initial=0))) + 1
    keys = coarse_face_cells[:, 0] * n + coarse_face_cells[:, 1]
    order = np.argsort(keys)
    pos = np.searchsorted(keys[order], lo * n + hi)
    col = order[np.minimum(pos, len(keys) - 1)]
    if len(keys) == 0:
        return np.zeros(0)
    vals = np.asarray(P_composite[cross, col]).ravel() * sign
    return np.bincount(col, weights=np.minimum(vals, 0.0), minlength=len(keys))


def coarsen_level(finer: LevelData, ops: IntergridOps, agg: Aggregation,
                  P_composite: sp.csr_matrix, fine_face_cells, fine_to_level) -> LevelData:
    """Variational coarse operators of level ``finer.level + 1``.

    ``P_composite`` is the product of flux interpolations from this new level
    down to level 0 and ``fine_to_level`` maps level-0 cells to new-level
    cells; both are only used to precompute ``p_neg``.
    """
    part = agg.cell_to_aggregate
    nc = agg.n_aggregates
    Pf = ops.P_sigma
    D = (ops.R_p @ finer.D @ Pf).tocsr()
    D.eliminate_zeros()
    nfc = len(agg.coarse_faces)
    face_cells = np.array([[cf.K, cf.L] for cf in agg.coarse_faces], dtype=np.int64).reshape(nfc, 2)

    lm_cell, lm_row, lm_col, lm_val = [], [], [], []
    coarse_cell_of_triplet = part[finer.lm_cell]
    order = np.argsort(coarse_cell_of_triplet, kind="stable")
    bounds = np.searchsorted(coarse_cell_of_triplet[order], np.arange(nc + 1))
    Pcsr = Pf.tocsr()
    for K in range(nc):
        t = order[bounds[K]:bounds[K + 1]]
        rows = np.unique(np.concatenate([finer.lm_row[t], finer.lm_col[t]]))
        rpos = np.full(finer.n_flux, -1, dtype=np.int64)
        rpos[rows] = np.arange(len(rows))
        A = np.zeros((len(rows), len(rows)))
        np.add.at(A, (rpos[finer.lm_row[t]], rpos[finer.lm_col[t]]), finer.lm_val[t])
        Psub = Pcsr[rows]
        cdofs = np.unique(Psub.indices)
        Pd = Psub[:, cdofs].toarray()
        Mh = Pd.T @ A @ Pd
        Mh = 0.5 * (Mh + Mh.T)
        ii, jj = np.meshgrid(cdofs, cdofs, indexing="ij")
        lm_cell.append(np.full(Mh.size, K))
        lm_row.append(ii.ravel())
        lm_col.append(jj.ravel())
        lm_val.append(Mh.ravel())

    p_neg = negative_flux_sums(P_composite, fine_face_cells, fine_to_level, face_cells)
    return LevelData(
        level=finer.level + 1,
        face_cells=face_cells,
        well_cells=part[finer.well_cells],
        D=D,
        pore_volume=np.bincount(part, weights=finer.pore_volume, minlength=nc),
        volume=np.bincount(part, weights=finer.volume, minlength=nc),
        lm_cell=np.concatenate(lm_cell).astype(np.int64),
        lm_row=np.concatenate(lm_row).astype(np.int64),
        lm_col=np.concatenate(lm_col).astype(np.int64),
        lm_val=np.concatenate(lm_val),
        p_neg=p_neg,
        g=ops.R_sigma @ finer.g,
        f=ops.R_p @ finer.f,
        h_base=ops.R_s @ finer.h_base,
    )


# ---------------------------------------------------------------------------
# level operators


def upwind_weights(level: LevelData, sigma):
    """Weights on (K, L) per face: generalized upwinding with ``p_neg``."""
    sig = np.asarray(sigma)[: level.n_faces]
    pn = level.p_neg
    pos = sig > 0.0
    wK = np.where(pos, 1.0 - pn, pn)
    wL = np.where(pos, pn, 1.0 - pn)
    return wK, wL


def coarse_upwind_operator(sigma, level: LevelData) -> sp.csr_matrix:
    wK, wL = upwind_weights(level, sigma)
    nf, nw = level.n_faces, level.n_wells
    fc = level.face_cells
    rows = np.concatenate([np.arange(nf), np.arange(nf), nf + np.arange(nw)])
    cols = np.concatenate([fc[:, 0], fc[:, 1], level.well_cells])
    vals = np.concatenate([wK, wL, np.ones(nw)])
    U = sp.csr_matrix((vals, (rows, cols)), shape=(level.n_flux, level.n_cells))
    U.eliminate_zeros()
    return U


def upwind_apply(level: LevelData, sigma, values) -> np.ndarray:
    """``U(sigma) @ values`` without forming the matrix."""
    wK, wL = upwind_weights(level, sigma)
    fc = level.face_cells
    return np.concatenate([wK * values[fc[:, 0]] + wL * values[fc[:, 1]], values[level.well_cells]])


def level_residual(level: LevelData, x, dt: float, h, fluids: FluidProps) -> np.ndarray:
    """Residual of ``[sigma; p; s]`` on any level; ``h`` is the full wetting-phase RHS."""
    sigma, p, s = level.split(np.asarray(x, dtype=float))
    invlam = 1.0 / total_mobility(s, fluids)
    Ms = np.bincount(level.lm_row, weights=level.lm_val * invlam[level.lm_cell] * sigma[level.lm_col],
                     minlength=level.n_flux)
    r_sigma = Ms - level.D.T @ p - level.g
    r_p = level.D @ sigma - level.f
    r_s = level.pore_volume * s / dt + level.D @ (sigma * upwind_apply(level, sigma, fractional_flow(s, fluids))) - h
    return np.concatenate([r_sigma, r_p, r_s])


def coarse_residual(level: LevelData, state: State, dt: float, fluids: FluidProps, h=None) -> ResidualVector:
    """Residual on ``level`` from level-local data only.

    ``h`` defaults to ``level.h_base`` (no accumulation term); pass the
    restricted ``W s_prev / dt + h`` to obtain the full time-step residual.
    """
    hh = level.h_base if h is None else h
    r = level_residual(level, state.vector(), dt, hh, fluids)
    return ResidualVector.from_vector(r, level.n_flux, level.n_cells)


# ---------------------------------------------------------------------------
# hierarchy


@dataclass
class Hierarchy:
    levels: list[LevelData]
    ops: list[IntergridOps] = field(default_factory=list)
    aggregations: list[Aggregation] = field(default_factory=list)
    P_composite: list[sp.csr_matrix] = field(default_factory=list)
    fine_to_level: list[np.ndarray] = field(default_factory=list)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def restrict_h(self, h0) -> list[np.ndarray]:
        """Wetting-phase RHS on every level by recursive restriction."""
        hs = [np.asarray(h0, dtype=float)]
        for op in self.ops:
            hs.append(op.R_s @ hs[-1])
        return hs

    def fine_h(self, prev_s, dt: float) -> np.ndarray:
        lv = self.levels[0]
        return lv.pore_volume * np.asarray(prev_s) / dt + lv.h_base


def build_hierarchy(mesh: Mesh, wells=(), num_levels: int = 2, coarsening_factor: float = 16,
                    seed: int = 0, partitions=None, weighted_projection: bool = False) -> Hierarchy:
    """Fine level plus ``num_levels - 1`` aggregated coarse levels.

    ``partitions[l]`` may supply the level-``l`` cell -> aggregate map
    instead of the built-in partitioner.
    """
    fine = fine_level(mesh, wells)
    hier = Hierarchy(levels=[fine], fine_to_level=[np.arange(fine.n_cells)],
                     P_composite=[sp.identity(fine.n_flux, format="csr")])
    for lvl in range(1, num_levels):
        finer = hier.levels[-1]
        graph = level_graph(finer)
        singles = np.unique(finer.well_cells)
        if partitions is not None and partitions[lvl - 1] is not None:
            agg = aggregation_from_map(partitions[lvl - 1], finer.face_cells, graph, singles, level=lvl)
        else:
            agg = partition_cells(graph, coarsening_factor, singles, level=lvl, seed=seed + lvl - 1,
                                  finer_face_cells=finer.face_cells)
        ops = build_intergrid_ops(finer, agg, weighted_projection)
        Pc = (hier.P_composite[-1] @ ops.P_sigma).tocsr()
        f2l = agg.cell_to_aggregate[hier.fine_to_level[-1]]
        coarse = coarsen_level(finer, ops, agg, Pc, fine.face_cells, f2l)
        hier.levels.append(coarse)
        hier.ops.append(ops)
        hier.aggregations.append(agg)
        hier.P_composite.append(Pc)
        hier.fine_to_level.append(f2l)
    return hier
