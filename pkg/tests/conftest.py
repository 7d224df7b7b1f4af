import numpy as np
import pytest
import scipy.sparse as sp

from fasflow.grid import build_cartesian_mesh
from fasflow.physics import FluidProps, Well, peaceman_well_index

ACCEPTANCE_RESULTS: dict = {}


def random_mesh(nx, ny, rng, orders=4.0, h=10.0, poro=0.2):
    """Cartesian mesh with random diagonal (anisotropic) permeability spanning ``orders`` decades."""
    n = nx * ny
    kx = 1e-13 * 10.0 ** rng.uniform(-orders / 2, orders / 2, n)
    ky = 1e-13 * 10.0 ** rng.uniform(-orders / 2, orders / 2, n)
    return build_cartesian_mesh(nx, ny, 1, (h, h, h), np.column_stack([kx, ky]), np.full(n, poro))


def corner_wells(mesh, rate=None, bhp=1e7, h=10.0):
    nx, ny, _ = mesh.shape
    inj = mesh.cell_index(0, 0)
    prod = mesh.cell_index(nx - 1, ny - 1)
    q = rate if rate is not None else 0.01 * mesh.pore_volumes.sum() / 86400.0
    k = mesh.permeability[prod]
    wi = peaceman_well_index(k[0, 0], k[1, 1], h, h, h)
    return [Well.injector(inj, q), Well.producer(prod, bhp, wi)]


def random_hierarchy(rng, levels, nx=None, ny=None, beta=None, attempts=50):
    """Random mesh, corner wells and a hierarchy on a random partition.

    Unspecified sizes are drawn from 4..12 and ``beta`` from {4, 9}; draws
    whose coarse levels have fewer partitionable cells than ``beta`` are
    rejected and redrawn.
    """
    from fasflow.hierarchy import build_hierarchy
    from fasflow.partition import PartitionError

    for _ in range(attempts):
        mx = nx or int(rng.integers(4, 13))
        my = ny or int(rng.integers(4, 13))
        b = beta or int(rng.choice([4, 9]))
        mesh = random_mesh(mx, my, rng)
        wells = corner_wells(mesh)
        try:
            hier = build_hierarchy(mesh, wells, num_levels=levels, coarsening_factor=b,
                                   seed=int(rng.integers(0, 2**31)))
        except PartitionError:
            continue
        return mesh, wells, hier
    raise RuntimeError("no valid random hierarchy drawn")


def composite_ops(hier, level):
    """Products of the transfer operators between level 0 and ``level``."""
    n0 = hier.levels[0]
    P_sig = sp.identity(n0.n_flux, format="csr")
    P_s = sp.identity(n0.n_cells, format="csr")
    for op in hier.ops[:level]:
        P_sig = P_sig @ op.P_sigma
        P_s = P_s @ op.P_s
    return P_sig.tocsr(), P_s.tocsr()


def random_coarse_state(rng, level, scale=1e-3):
    return np.concatenate([scale * rng.standard_normal(level.n_flux),
                           1e7 + 1e5 * rng.standard_normal(level.n_cells),
                           rng.uniform(0.0, 1.0, level.n_cells)])


def blockwise_rel_error(a, b, level):
    """Largest per-block ``max|a - b| / max|b|`` over the flux, pressure and saturation rows."""
    err = 0.0
    for x, y in zip(level.split(np.asarray(a)), level.split(np.asarray(b))):
        if len(y):
            err = max(err, np.abs(x - y).max() / max(np.abs(y).max(), 1e-300))
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fluids():
    return FluidProps()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, msg = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {msg}")


def upwind_safe_point(rng, level, sigma_scale=1e-3):
    """State with every flux bounded away from zero and saturations away from the clamp."""
    sig = sigma_scale * rng.choice([-1.0, 1.0], level.n_flux) * rng.uniform(0.2, 1.0, level.n_flux)
    return np.concatenate([sig, 1e7 + 1e5 * rng.standard_normal(level.n_cells),
                           rng.uniform(0.05, 0.95, level.n_cells)])


def fd_block_errors(level, x, dt, h, fluids, rel_step=1e-7):
    """Relative max-norm error of each Jacobian block against central differences."""
    from fasflow.hierarchy import level_residual
    from fasflow.nlsolve import assemble_jacobian

    nf, nc = level.n_flux, level.n_cells
    jac = assemble_jacobian(level, x, dt, fluids)
    J = jac.full().toarray()
    F = np.zeros_like(J)
    scale = np.concatenate([np.full(nf, np.abs(x[:nf]).max()), np.full(nc, np.abs(x[nf:nf + nc]).max()),
                            np.ones(nc)])
    for j in range(len(x)):
        e = rel_step * max(abs(x[j]), scale[j])
        xp, xm = x.copy(), x.copy()
        xp[j] += e
        xm[j] -= e
        F[:, j] = (level_residual(level, xp, dt, h, fluids) - level_residual(level, xm, dt, h, fluids)) / (2 * e)
    rows = {"sigma": slice(0, nf), "s": slice(nf + nc, nf + 2 * nc)}
    errs = {}
    for a, ra in rows.items():
        for b, cb in rows.items():
            ref = J[ra, cb]
            errs[(a, b)] = np.abs(F[ra, cb] - ref).max() / max(np.abs(ref).max(), 1e-300)
    return errs


def qfs_config(n=20, correlation=2.0, dt0=1e-4, nu=2.0, steps=8, tol=1e-8, cap=None, perm_seed=0):
    """Heterogeneous quarter-five-spot: log-normal K with log-std 2, direct linear backend."""
    from fasflow.config import MeshSpec, RockSpec, ScenarioConfig, TimeSpec
    from fasflow.linsolve import LinearSolverConfig
    from fasflow.nlsolve import FASConfig

    return ScenarioConfig(
        mesh=MeshSpec(nx=n, ny=n),
        rock=RockSpec(permeability="lognormal", sigma_log=2.0, correlation=correlation, perm_seed=perm_seed),
        time=TimeSpec(dt0=dt0, nu=nu, max_steps=steps),
        fas=FASConfig(num_levels=2, nonlinear_tol=tol, max_outer_cycles=60, max_saturation_change=cap),
        linear=LinearSolverConfig(backend="direct"), write_fields=False)


def mid_simulation_state(n=20, steps=4):
    """Converged state after ``steps`` Newton steps of :func:`qfs_config`, ready for the next step."""
    from fasflow.config import build_mesh, build_wells, pvi_to_seconds
    from fasflow.hierarchy import build_hierarchy
    from fasflow.nlsolve import initial_state, time_loop

    cfg = qfs_config(n)
    mesh = build_mesh(cfg)
    wells = build_wells(mesh, cfg)
    hier = build_hierarchy(mesh, wells, num_levels=2, coarsening_factor=16)
    dt0 = pvi_to_seconds(cfg.time.dt0, mesh, wells)
    sizes = [dt0 * cfg.time.nu ** m for m in range(steps + 1)]
    x0 = initial_state(hier.levels[0], 0.0, wells)
    res = time_loop(hier, cfg.fluids, x0, sizes[:steps], solver="newton", config=cfg.fas, linear=cfg.linear)
    assert res.converged
    return hier, cfg.fluids, res.state.vector(), sizes[steps]
