import dataclasses

import numpy as np
import pytest

from fasflow.fvdiscr import State, assemble_fine_operators, residual
from fasflow.grid import build_cartesian_mesh
from fasflow.hierarchy import (Aggregation, build_coarse_faces, build_hierarchy, build_saturation_ops,
                               coarse_residual, coarse_upwind_operator, fine_level, level_graph,
                               partition_cells, solve_local_flux_basis)

from conftest import (blockwise_rel_error, composite_ops, corner_wells, random_coarse_state,
                      random_hierarchy, random_mesh)


def fine_oracle(mesh, wells, hier, level, xc, prev_s, dt, fluids):
    """R r(P x) evaluated with the fine assembly code path."""
    lv = hier.levels[level]
    P_sig, P_s = composite_ops(hier, level)
    sig, p, s = lv.split(xc)
    st_ = State(P_sig @ sig, P_s @ p, P_s @ s)
    ops = assemble_fine_operators(mesh, wells)
    r = residual(st_, prev_s, dt, ops, mesh, wells, fluids)
    return np.concatenate([P_sig.T @ r.r_sigma, P_s.T @ r.r_p, P_s.T @ r.r_s])


@pytest.mark.parametrize("levels", [2, 3])
def test_coarse_residual_matches_restricted_fine(rng, fluids, levels):
    mesh, wells, hier = random_hierarchy(rng, levels, nx=9, ny=8, beta=4)
    dt = 86400.0
    prev = rng.uniform(0, 1, mesh.n_cells)
    h_all = hier.restrict_h(hier.fine_h(prev, dt))
    for l in range(1, levels):
        lv = hier.levels[l]
        xc = random_coarse_state(rng, lv)
        got = coarse_residual(lv, State.from_vector(xc, lv.n_flux, lv.n_cells), dt, fluids, h_all[l]).vector()
        ref = fine_oracle(mesh, wells, hier, l, xc, prev, dt, fluids)
        assert blockwise_rel_error(got, ref, lv) <= 1e-10


def test_projection_is_left_inverse(rng):
    _, _, hier = random_hierarchy(rng, 3)
    for op in hier.ops:
        for Q, P in ((op.Q_s, op.P_s), (op.Q_sigma, op.P_sigma)):
            E = (Q @ P).toarray() - np.eye(P.shape[1])
            assert np.abs(E).max() <= 1e-13


def test_weighted_projection_is_left_inverse(rng):
    mesh = random_mesh(6, 6, rng)
    hier = build_hierarchy(mesh, corner_wells(mesh), num_levels=2, coarsening_factor=4, weighted_projection=True)
    op = hier.ops[0]
    np.testing.assert_allclose((op.Q_s @ op.P_s).toarray(), np.eye(op.P_s.shape[1]), atol=1e-13)
    # pressure projection stays the plain mean
    assert op.Q_p is not op.Q_s


def test_basis_carries_unit_flux_across_own_face(rng):
    _, _, hier = random_hierarchy(rng, 3)
    for op, agg in zip(hier.ops, hier.aggregations):
        for i, cf in enumerate(agg.coarse_faces):
            col = op.P_sigma[:, i].toarray().ravel()
            assert abs(np.dot(cf.signs, col[cf.faces]) - 1.0) <= 1e-12


def test_upwind_rows_sum_to_one_all_levels(rng):
    _, _, hier = random_hierarchy(rng, 3)
    for lv in hier.levels:
        sigma = rng.standard_normal(lv.n_flux)
        U = coarse_upwind_operator(sigma, lv)
        assert np.abs(np.asarray(U.sum(axis=1)).ravel() - 1.0).max() <= 1e-13


def test_generalized_upwind_substitution():
    mesh = build_cartesian_mesh(2, 1, 1, (1.0, 1.0, 1.0), np.ones(2), np.full(2, 0.2))
    lv = dataclasses.replace(fine_level(mesh), p_neg=np.array([-0.25]))
    np.testing.assert_allclose(coarse_upwind_operator(np.array([4.0]), lv).toarray(), [[1.25, -0.25]])
    np.testing.assert_allclose(coarse_upwind_operator(np.array([-4.0]), lv).toarray(), [[-0.25, 1.25]])
    plain = fine_level(mesh)
    np.testing.assert_array_equal(coarse_upwind_operator(np.array([4.0]), plain).toarray(), [[1.0, 0.0]])


def test_galerkin_mass_and_divergence(rng, fluids):
    _, _, hier = random_hierarchy(rng, 3)
    for l, op in enumerate(hier.ops):
        finer, coarse = hier.levels[l], hier.levels[l + 1]
        s = rng.uniform(0, 1, coarse.n_cells)
        Mc = coarse.flux_mass(s, fluids).toarray()
        Mg = (op.R_sigma @ finer.flux_mass(op.P_s @ s, fluids) @ op.P_sigma).toarray()
        np.testing.assert_allclose(Mc, Mg, atol=1e-12 * np.abs(Mg).max())
        Dg = (op.R_p @ finer.D @ op.P_sigma).toarray()
        np.testing.assert_allclose(coarse.D.toarray(), Dg, atol=1e-12)


def test_saturation_mean_and_singleton_rows():
    agg = Aggregation(1, np.array([0, 0, 0, 1]), [])
    P, R, Q = build_saturation_ops(agg)
    np.testing.assert_allclose(Q @ np.array([0.2, 0.4, 0.6, 0.9]), [0.4, 0.9])
    np.testing.assert_array_equal(Q.toarray()[1], [0, 0, 0, 1])
    np.testing.assert_array_equal(R.toarray(), P.T.toarray())


def test_two_cell_basis_is_unit_on_shared_face():
    mesh = build_cartesian_mesh(2, 1, 1, (1.0, 1.0, 1.0), np.array([1.0, 7.0]), np.full(2, 0.2))
    fine = fine_level(mesh)
    part = np.array([0, 1])
    agg = Aggregation(1, part, build_coarse_faces(part, fine.face_cells))
    assert len(agg.coarse_faces) == 1
    dofs, phi = solve_local_flux_basis(fine, agg, agg.coarse_faces[0])
    np.testing.assert_array_equal(dofs, [0])
    np.testing.assert_allclose(phi, [1.0])


def test_coarse_faces_group_shared_fine_faces():
    mesh = build_cartesian_mesh(2, 3, 1, (1.0, 1.0, 1.0), np.ones(6), np.full(6, 0.2))
    part = np.array([0, 1, 0, 1, 0, 1])
    faces = build_coarse_faces(part, mesh.face_cells)
    assert len(faces) == 1
    assert (faces[0].K, faces[0].L) == (0, 1)
    assert len(faces[0].faces) == 3
    np.testing.assert_array_equal(faces[0].signs, 1.0)


def test_basis_matches_dense_local_solve(rng):
    """Direct dense solve of the two-aggregate mixed problem as an independent oracle."""
    mesh = random_mesh(4, 2, rng)
    fine = fine_level(mesh)
    part = np.array([0, 0, 1, 1, 0, 0, 1, 1])
    agg = Aggregation(1, part, build_coarse_faces(part, fine.face_cells))
    cf = agg.coarse_faces[0]
    dofs, phi = solve_local_flux_basis(fine, agg, cf)
    nf, nc = fine.n_faces, fine.n_cells
    A = np.diag(1 / mesh.half_trans[:, 0] + 1 / mesh.half_trans[:, 1])
    D = fine.D.toarray()[:, :nf]
    src = np.where(part == 0, 1 / 4, -1 / 4)
    # saddle point with a zero-mean pressure constraint
    S = np.zeros((nf + nc + 1, nf + nc + 1))
    S[:nf, :nf] = A
    S[:nf, nf:nf + nc] = -D.T
    S[nf:nf + nc, :nf] = D
    S[nf:nf + nc, -1] = 1.0
    S[-1, nf:nf + nc] = 1.0
    sol = np.linalg.solve(S, np.concatenate([np.zeros(nf), src, [0.0]]))
    ref = sol[:nf] / np.dot(cf.signs, sol[:nf][cf.faces])
    full = np.zeros(nf)
    full[dofs] = phi
    np.testing.assert_allclose(full, ref, atol=1e-12)


def test_identity_aggregation_reproduces_fine_level(rng, fluids):
    mesh = random_mesh(4, 3, rng)
    wells = corner_wells(mesh)
    fine = fine_level(mesh, wells)
    # well cells must be singletons, which identity aggregation satisfies
    hier = build_hierarchy(mesh, wells, num_levels=2, partitions=[np.arange(mesh.n_cells)])
    coarse, op = hier.levels[1], hier.ops[0]
    Pd = op.P_sigma.toarray()
    assert np.all(np.count_nonzero(Pd, axis=0) == 1) and np.all(np.count_nonzero(Pd, axis=1) == 1)
    np.testing.assert_allclose(np.abs(Pd).sum(axis=0), 1.0)
    np.testing.assert_allclose(coarse.D.toarray(), (fine.D @ op.P_sigma).toarray())
    np.testing.assert_allclose(coarse.pore_volume, fine.pore_volume)
    np.testing.assert_array_equal(coarse.p_neg, 0.0)
    s = rng.uniform(0, 1, mesh.n_cells)
    np.testing.assert_allclose(coarse.flux_mass(s, fluids).toarray(),
                               (op.P_sigma.T @ fine.flux_mass(s, fluids) @ op.P_sigma).toarray(), rtol=1e-12)
    np.testing.assert_allclose(op.P_sigma.T @ fine.g, coarse.g)


def test_wells_stay_singletons(rng):
    mesh = random_mesh(8, 8, rng)
    wells = corner_wells(mesh)
    hier = build_hierarchy(mesh, wells, num_levels=3, coarsening_factor=4)
    for agg, lv in zip(hier.aggregations, hier.levels):
        for w in lv.well_cells:
            assert np.count_nonzero(agg.cell_to_aggregate == agg.cell_to_aggregate[w]) == 1


def test_external_partition_must_isolate_wells(rng):
    mesh = random_mesh(4, 4, rng)
    wells = corner_wells(mesh)
    with pytest.raises(ValueError):
        build_hierarchy(mesh, wells, num_levels=2, partitions=[np.zeros(mesh.n_cells, dtype=int)])


def test_restrict_h_composes_levels(rng):
    mesh, _, hier = random_hierarchy(rng, 3, nx=8, ny=8, beta=4)
    h0 = rng.standard_normal(mesh.n_cells)
    _, P_s = composite_ops(hier, 2)
    np.testing.assert_allclose(hier.restrict_h(h0)[2], P_s.T @ h0)


def test_zero_flux_coarse_residual_is_accumulation(rng, fluids):
    _, _, hier = random_hierarchy(rng, 2, nx=6, ny=6, beta=4)
    lv = hier.levels[1]
    s = rng.uniform(0, 1, lv.n_cells)
    h = rng.standard_normal(lv.n_cells)
    st_ = State(np.zeros(lv.n_flux), np.zeros(lv.n_cells), s)
    r = coarse_residual(lv, st_, 2.0, fluids, h)
    np.testing.assert_allclose(r.r_s, lv.pore_volume * s / 2.0 - h)


def test_partition_cells_path_graph():
    mesh = build_cartesian_mesh(6, 1, 1, (1.0, 1.0, 1.0), np.ones(6), np.full(6, 0.2))
    agg = partition_cells(level_graph(fine_level(mesh)), 3, finer_face_cells=mesh.face_cells)
    assert sorted(np.bincount(agg.cell_to_aggregate)) == [3, 3]
    assert len(agg.coarse_faces) == 1
