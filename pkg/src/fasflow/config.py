"""Scenario configuration read from INI files.

Sections and keys (all optional unless noted)::

    [mesh]      nx, ny, nz, dx, dy, dz        (Cartesian)  |  file = <mesh file>
                pv_threshold
    [rock]      permeability = constant | lognormal | <csv or SPE10 ascii file>
                perm_mean, sigma_log, correlation, perm_seed, porosity (value or file)
    [fluids]    mu_w, mu_nw, gamma
    [wells]     pattern = quarter_five_spot | explicit
                injection_rate, bhp, well_radius
    [well.NAME] kind = injector | producer, cell (index) or i, j[, k], rate, bhp, well_index
    [initial]   s0
    [time]      dt0, nu, t_final, unit = pvi | seconds, max_steps (t_final or max_steps required)
    [solver]    type = newton | fas, levels, coarsening_factor, smoothing_steps, coarsest_max_iters,
                theta, tol, max_cycles, max_saturation_change, weighted_projection, partition_seed, partition_files
    [linear]    backend = gmres | direct, tol, restart, max_iter
    [output]    dir, fields

``FASFLOW_OUTPUT_DIR`` overrides ``[output] dir``.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import Mesh, build_cartesian_mesh, read_cell_csv, read_mesh, read_spe10_ascii
from .linsolve import LinearSolverConfig
from .nlsolve import FASConfig
from .physics import FluidProps, Well, peaceman_well_index


class ConfigError(ValueError):
    pass


@dataclass
class MeshSpec:
    nx: int = 20
    ny: int = 20
    nz: int = 1
    dx: float = 10.0
    dy: float = 10.0
    dz: float = 10.0
    file: str | None = None
    pv_threshold: float = 0.0


@dataclass
class RockSpec:
    permeability: str = "constant"
    perm_mean: float = 1e-13
    sigma_log: float = 2.0
    correlation: float = 2.0
    perm_seed: int = 0
    porosity: str = "0.2"


@dataclass
class TimeSpec:
    dt0: float = 1e-4
    nu: float = 2.0
    t_final: float | None = None
    unit: str = "pvi"
    max_steps: int | None = None


@dataclass
class ScenarioConfig:
    mesh: MeshSpec = field(default_factory=MeshSpec)
    rock: RockSpec = field(default_factory=RockSpec)
    fluids: FluidProps = field(default_factory=FluidProps)
    wells_pattern: str = "quarter_five_spot"
    injection_rate: float | None = None
    injection_pvi_per_day: float = 0.01
    bhp: float = 1e7
    well_radius: float = 0.1
    explicit_wells: list = field(default_factory=list)
    s0: float = 0.0
    time: TimeSpec = field(default_factory=TimeSpec)
    solver: str = "fas"
    fas: FASConfig = field(default_factory=FASConfig)
    coarsening_factor: float = 16.0
    weighted_projection: bool = False
    partition_seed: int = 0
    partition_files: list = field(default_factory=list)
    linear: LinearSolverConfig = field(default_factory=LinearSolverConfig)
    output_dir: str = "fasflow_out"
    write_fields: bool = True
    base_dir: str = "."

    def validate(self) -> None:
        if self.mesh.file is None and min(self.mesh.nx, self.mesh.ny, self.mesh.nz) < 1:
            raise ConfigError("Cartesian mesh needs positive cell counts")
        if self.time.dt0 <= 0 or (self.time.t_final is not None and self.time.t_final <= 0):
            raise ConfigError("dt0 and t_final must be positive")
        if self.time.t_final is None and self.time.max_steps is None:
            raise ConfigError("[time] needs t_final, max_steps or both")
        if self.time.max_steps is not None and self.time.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if self.time.nu < 1:
            raise ConfigError("nu must be >= 1")
        if self.time.unit not in ("pvi", "seconds"):
            raise ConfigError("time unit must be 'pvi' or 'seconds'")
        if self.solver not in ("newton", "fas"):
            raise ConfigError("solver must be 'newton' or 'fas'")
        if not 0.0 <= self.s0 <= 1.0:
            raise ConfigError("s0 must lie in [0, 1]")
        if self.coarsening_factor < 2:
            raise ConfigError("coarsening factor must be >= 2")

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# parsing

_TRUE = {"1", "true", "yes", "on"}


def _get(sec, key, conv, default):
    if sec is None or key not in sec:
        return default
    raw = sec[key].strip()
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {key}: cannot parse {raw!r}") from exc


def _bool(raw: str) -> bool:
    return raw.lower() in _TRUE


def _ints(raw: str) -> tuple:
    return tuple(int(v) for v in raw.replace(",", " ").split())


def parse_config(text: str, base_dir=".") -> ScenarioConfig:
    try:
        return _parse(text, base_dir)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:  # component validation (fluids, solver settings)
        raise ConfigError(str(exc)) from exc


def _parse(text: str, base_dir) -> ScenarioConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    sec = {name: cp[name] for name in cp.sections()}
    known = {"mesh", "rock", "fluids", "wells", "initial", "time", "solver", "linear", "output"}
    for name in sec:
        if name not in known and not name.startswith("well."):
            raise ConfigError(f"unknown section [{name}]")
    m, r = sec.get("mesh"), sec.get("rock")
    mesh = MeshSpec(
        nx=_get(m, "nx", int, 20), ny=_get(m, "ny", int, 20), nz=_get(m, "nz", int, 1),
        dx=_get(m, "dx", float, 10.0), dy=_get(m, "dy", float, 10.0), dz=_get(m, "dz", float, 10.0),
        file=_get(m, "file", str, None), pv_threshold=_get(m, "pv_threshold", float, 0.0))
    if m is not None and "file" in m and any(k in m for k in ("nx", "ny", "nz")):
        raise ConfigError("[mesh] takes either a file or Cartesian dimensions, not both")
    rock = RockSpec(
        permeability=_get(r, "permeability", str, "constant"), perm_mean=_get(r, "perm_mean", float, 1e-13),
        sigma_log=_get(r, "sigma_log", float, 2.0), correlation=_get(r, "correlation", float, 2.0),
        perm_seed=_get(r, "perm_seed", int, 0), porosity=_get(r, "porosity", str, "0.2"))
    f = sec.get("fluids")
    fluids = FluidProps(mu_w=_get(f, "mu_w", float, 1e-3), mu_nw=_get(f, "mu_nw", float, 5e-3),
                        gamma=_get(f, "gamma", float, 2.0))
    w = sec.get("wells")
    t = sec.get("time")
    tm = TimeSpec(dt0=_get(t, "dt0", float, 1e-4), nu=_get(t, "nu", float, 2.0),
                  t_final=_get(t, "t_final", float, None), unit=_get(t, "unit", str, "pvi"),
                  max_steps=_get(t, "max_steps", int, None))
    s = sec.get("solver")
    levels = _get(s, "levels", int, 2)
    fas = FASConfig(
        num_levels=levels, smoothing_steps=_get(s, "smoothing_steps", _ints, ()),
        coarsest_max_iters=_get(s, "coarsest_max_iters", int, 10),
        backtracking_theta=_get(s, "theta", float, 0.5), nonlinear_tol=_get(s, "tol", float, 1e-6),
        max_outer_cycles=_get(s, "max_cycles", int, 50),
        max_saturation_change=_get(s, "max_saturation_change", float, None))
    ln = sec.get("linear")
    linear = LinearSolverConfig(backend=_get(ln, "backend", str, "gmres"), tol=_get(ln, "tol", float, 1e-8),
                                restart=_get(ln, "restart", int, 50), max_iter=_get(ln, "max_iter", int, 400))
    explicit = []
    for name, ws in sec.items():
        if not name.startswith("well."):
            continue
        kind = _get(ws, "kind", str, None)
        if kind not in ("injector", "producer"):
            raise ConfigError(f"[{name}] kind must be injector or producer")
        explicit.append({
            "name": name[5:], "kind": kind, "cell": _get(ws, "cell", int, None),
            "ijk": _get(ws, "ijk", _ints, None), "rate": _get(ws, "rate", float, None),
            "bhp": _get(ws, "bhp", float, None), "well_index": _get(ws, "well_index", float, None)})
    o = sec.get("output")
    cfg = ScenarioConfig(
        mesh=mesh, rock=rock, fluids=fluids,
        wells_pattern=_get(w, "pattern", str, "explicit" if explicit else "quarter_five_spot"),
        injection_rate=_get(w, "injection_rate", float, None),
        injection_pvi_per_day=_get(w, "injection_pvi_per_day", float, 0.01),
        bhp=_get(w, "bhp", float, 1e7), well_radius=_get(w, "well_radius", float, 0.1),
        explicit_wells=explicit, s0=_get(sec.get("initial"), "s0", float, 0.0), time=tm,
        solver=_get(s, "type", str, "fas"), fas=fas,
        coarsening_factor=_get(s, "coarsening_factor", float, 16.0),
        weighted_projection=_get(s, "weighted_projection", _bool, False),
        partition_seed=_get(s, "partition_seed", int, 0),
        partition_files=_get(s, "partition_files", lambda v: v.split(), []),
        linear=linear, output_dir=_get(o, "dir", str, "fasflow_out"),
        write_fields=_get(o, "fields", _bool, True), base_dir=str(base_dir))
    env_out = os.environ.get("FASFLOW_OUTPUT_DIR")
    if env_out:
        cfg.output_dir = env_out
    cfg.validate()
    return cfg


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent)


# ---------------------------------------------------------------------------
# building the physical problem


def lognormal_permeability(shape, mean: float, sigma_log: float, correlation: float, seed: int) -> np.ndarray:
    """Gaussian-filtered white noise, rescaled to log-std ``sigma_log``, exponentiated around ``mean``."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = shape
    z = rng.standard_normal((nz, ny, nx))
    if correlation > 0:
        z = gaussian_filter(z, sigma=correlation, mode="wrap")
    sd = z.std()
    z = (z - z.mean()) / (sd if sd > 0 else 1.0)
    return mean * np.exp(sigma_log * z).ravel()


def _field(spec: str, n: int, cfg: ScenarioConfig) -> np.ndarray:
    try:
        return np.full(n, float(spec))
    except ValueError:
        data = read_cell_csv(cfg.resolve(spec), n)
        return data[:, -1]


def build_mesh(cfg: ScenarioConfig) -> Mesh:
    ms, rs = cfg.mesh, cfg.rock
    if ms.file is not None:
        return read_mesh(cfg.resolve(ms.file))
    n = ms.nx * ms.ny * ms.nz
    if rs.permeability == "constant":
        k = np.full(n, rs.perm_mean)
        perm = np.column_stack([k, k, k])
    elif rs.permeability == "lognormal":
        k = lognormal_permeability((ms.nx, ms.ny, ms.nz), rs.perm_mean, rs.sigma_log, rs.correlation, rs.perm_seed)
        perm = np.column_stack([k, k, k])
    else:
        path = cfg.resolve(rs.permeability)
        if path.suffix.lower() == ".csv":
            perm = read_cell_csv(path, n)
            perm = perm[:, -3:] if perm.shape[1] >= 3 else np.repeat(perm[:, -1:], 3, axis=1)
        else:
            perm, poro = read_spe10_ascii(path, n)
            if poro is not None and rs.porosity == "0.2":
                return build_cartesian_mesh(ms.nx, ms.ny, ms.nz, (ms.dx, ms.dy, ms.dz), perm, poro, ms.pv_threshold)
    poro = _field(rs.porosity, n, cfg)
    return build_cartesian_mesh(ms.nx, ms.ny, ms.nz, (ms.dx, ms.dy, ms.dz), perm, poro, ms.pv_threshold)


def injection_rate(cfg: ScenarioConfig, mesh: Mesh) -> float:
    if cfg.injection_rate is not None:
        return cfg.injection_rate
    return cfg.injection_pvi_per_day * float(mesh.pore_volumes.sum()) / 86400.0


def _cell_well_index(mesh: Mesh, cell: int, cfg: ScenarioConfig) -> float:
    k = mesh.permeability[cell]
    ms = cfg.mesh
    return peaceman_well_index(k[0, 0], k[1, 1], ms.dx, ms.dy, ms.dz if mesh.dimension == 2 else ms.dz,
                               rw=cfg.well_radius)


def quarter_five_spot(mesh: Mesh, cfg: ScenarioConfig) -> list[Well]:
    """Injector in cell (0, 0), producer in cell (nx-1, ny-1)."""
    if mesh.shape is None:
        raise ConfigError("quarter_five_spot needs a Cartesian mesh")
    nx, ny, _ = mesh.shape
    inj = mesh.cell_index(0, 0)
    prod = mesh.cell_index(nx - 1, ny - 1)
    return [Well.injector(inj, injection_rate(cfg, mesh), name="I1"),
            Well.producer(prod, cfg.bhp, _cell_well_index(mesh, prod, cfg), name="P1")]


def build_wells(mesh: Mesh, cfg: ScenarioConfig) -> list[Well]:
    if cfg.wells_pattern == "quarter_five_spot":
        return quarter_five_spot(mesh, cfg)
    if cfg.wells_pattern != "explicit":
        raise ConfigError(f"unknown well pattern {cfg.wells_pattern!r}")
    if not cfg.explicit_wells:
        raise ConfigError("explicit well pattern without [well.*] sections")
    wells = []
    for spec in cfg.explicit_wells:
        if spec["cell"] is not None:
            cell = spec["cell"]
        elif spec["ijk"] is not None:
            cell = mesh.cell_index(*spec["ijk"])
        else:
            raise ConfigError(f"well {spec['name']} needs cell or ijk")
        if not 0 <= cell < mesh.n_cells:
            raise ConfigError(f"well {spec['name']} cell {cell} out of range")
        if spec["kind"] == "injector":
            rate = spec["rate"] if spec["rate"] is not None else injection_rate(cfg, mesh)
            wells.append(Well.injector(cell, rate, name=spec["name"]))
        else:
            wi = spec["well_index"] if spec["well_index"] is not None else _cell_well_index(mesh, cell, cfg)
            bhp = spec["bhp"] if spec["bhp"] is not None else cfg.bhp
            wells.append(Well.producer(cell, bhp, wi, name=spec["name"]))
    return wells


def pvi_to_seconds(pvi: float, mesh: Mesh, wells) -> float:
    """Time needed to inject ``pvi`` total pore volumes at the configured rates."""
    q = sum(w.rate for w in wells if not w.is_producer)
    if q <= 0:
        raise ConfigError("PVI time units need a positive total injection rate")
    return pvi * float(mesh.pore_volumes.sum()) / q


def seconds_to_pvi(t: float, mesh: Mesh, wells) -> float:
    q = sum(w.rate for w in wells if not w.is_producer)
    return t * q / float(mesh.pore_volumes.sum()) if q > 0 else float("nan")
