import numpy as np
import pytest

from fasflow.fvdiscr import (State, assemble_divergence, assemble_fine_operators, residual, upwind_operator)
from fasflow.grid import build_cartesian_mesh
from fasflow.hierarchy import fine_level, level_residual
from fasflow.physics import FluidProps, Well, fractional_flow, total_mobility

from conftest import corner_wells, random_mesh


def two_cell():
    mesh = build_cartesian_mesh(2, 1, 1, (1.0, 1.0, 1.0), np.array([1.0, 1.0]), np.full(2, 0.5))
    wells = [Well.injector(0, 1.0), Well.producer(1, 2.0, 4.0)]
    return mesh, wells


def test_divergence_signs():
    mesh, wells = two_cell()
    D = assemble_divergence(mesh, wells).toarray()
    np.testing.assert_array_equal(D, [[1, 0], [-1, 1]])


def test_two_cell_residual_by_hand():
    mesh, wells = two_cell()
    fl = FluidProps()
    ops = assemble_fine_operators(mesh, wells)
    st_ = State(np.array([1.0, 1.0]), np.array([5.0, 3.0]), np.array([0.6, 0.2]))
    r = residual(st_, np.array([0.5, 0.0]), 0.5, ops, mesh, wells, fl)
    lam = total_mobility(st_.s, fl)
    # half transmissibility k A / (dx/2) = 2 on both sides
    m_face = 1 / (2 * lam[0]) + 1 / (2 * lam[1])
    np.testing.assert_allclose(r.r_sigma, [m_face * 1 - (5 - 3), 1 / (lam[1] * 4.0) - 3 + 2.0])
    np.testing.assert_allclose(r.r_p, [1 - 1, -1 + 1])
    f = fractional_flow(st_.s, fl)
    np.testing.assert_allclose(r.r_s, [0.5 * 0.6 / 0.5 + f[0] - (0.5 * 0.5 / 0.5 + 1.0),
                                       0.5 * 0.2 / 0.5 - f[0] + f[1]])


def test_upwind_rows_sum_to_one(rng):
    mesh = random_mesh(5, 4, rng)
    wells = corner_wells(mesh)
    ops = assemble_fine_operators(mesh, wells)
    for _ in range(5):
        sigma = rng.standard_normal(ops.n_flux)
        U = upwind_operator(sigma, ops.face_cells, ops.well_cells, ops.n_cells)
        np.testing.assert_allclose(np.asarray(U.sum(axis=1)).ravel(), 1.0, atol=1e-13)


def test_upwind_selects_by_sign():
    U = upwind_operator(np.array([1.0, -1.0, 0.0]), np.array([[0, 1], [1, 2], [0, 2]]), np.array([], int), 3)
    np.testing.assert_array_equal(U.toarray(), [[1, 0, 0], [0, 0, 1], [0, 0, 1]])
    with pytest.raises(ValueError):
        upwind_operator(np.ones(2), np.array([[0, 1]]), np.array([], int), 2)


def test_level_residual_matches_assembled_residual(rng, fluids):
    mesh = random_mesh(6, 5, rng)
    wells = corner_wells(mesh)
    ops = assemble_fine_operators(mesh, wells)
    lv = fine_level(mesh, wells)
    dt = 3600.0
    for _ in range(5):
        x = np.concatenate([rng.standard_normal(lv.n_flux) * 1e-3, 1e7 + rng.standard_normal(lv.n_cells) * 1e5,
                            rng.uniform(0, 1, lv.n_cells)])
        prev = rng.uniform(0, 1, lv.n_cells)
        ref = residual(State.from_vector(x, lv.n_flux, lv.n_cells), prev, dt, ops, mesh, wells, fluids).vector()
        h = lv.pore_volume * prev / dt + lv.h_base
        np.testing.assert_allclose(level_residual(lv, x, dt, h, fluids), ref, rtol=1e-12,
                                   atol=1e-12 * np.abs(ref).max())


def test_state_roundtrip():
    st_ = State(np.arange(3.0), np.arange(2.0), np.array([0.1, 0.2]))
    back = State.from_vector(st_.vector(), 3, 2)
    np.testing.assert_array_equal(back.vector(), st_.vector())


def test_residual_rejects_mismatched_state(rng, fluids):
    mesh, wells = two_cell()
    ops = assemble_fine_operators(mesh, wells)
    with pytest.raises(ValueError):
        residual(State(np.zeros(3), np.zeros(2), np.zeros(2)), np.zeros(2), 1.0, ops, mesh, wells, fluids)
    with pytest.raises(ValueError):
        residual(State(np.zeros(2), np.zeros(2), np.zeros(2)), np.zeros(2), 0.0, ops, mesh, wells, fluids)
