"""Constitutive laws, well models and the CFL number.

Mobilities follow the power law ``lambda_a = s_a**gamma / mu_a`` with
``s_w = s`` and ``s_nw = 1 - s``.  Saturations outside ``[0, 1]`` are clamped
before evaluation, so every function is extended by constants and its
derivative vanishes outside the unit interval.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize_scalar


class ConstitutiveError(ArithmeticError):
    pass


@dataclass(frozen=True)
class FluidProps:
    mu_w: float = 1e-3
    mu_nw: float = 5e-3
    gamma: float = 2.0

    def __post_init__(self):
        if self.mu_w <= 0 or self.mu_nw <= 0:
            raise ValueError("viscosities must be positive")
        if self.gamma < 1:
            raise ValueError("relative permeability exponent must be >= 1")


class WellKind(str, Enum):
    INJECTOR = "injector"
    PRODUCER = "producer"


@dataclass(frozen=True)
class Well:
    """Single-perforation well.

    Injectors are rate controlled and inject pure wetting phase at ``rate``
    [m^3/s].  Producers are BHP controlled with bottom-hole pressure ``bhp``
    [Pa] and Peaceman index ``well_index`` [m^3].
    """

    kind: WellKind
    cell: int
    rate: float = 0.0
    bhp: float = 0.0
    well_index: float = 0.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", WellKind(self.kind))
        if self.kind is WellKind.INJECTOR and self.rate < 0:
            raise ValueError("injection rate must be non-negative")
        if self.kind is WellKind.PRODUCER and self.well_index <= 0:
            raise ValueError("producer well index must be positive")

    @property
    def is_producer(self) -> bool:
        return self.kind is WellKind.PRODUCER

    @classmethod
    def injector(cls, cell, rate, name=""):
        return cls(WellKind.INJECTOR, int(cell), rate=float(rate), name=name)

    @classmethod
    def producer(cls, cell, bhp, well_index, name=""):
        return cls(WellKind.PRODUCER, int(cell), bhp=float(bhp), well_index=float(well_index), name=name)


def producers(wells) -> list[Well]:
    return [w for w in wells if w.is_producer]


def injectors(wells) -> list[Well]:
    return [w for w in wells if not w.is_producer]


def _clamp(s):
    return np.clip(s, 0.0, 1.0)


def _inside(s):
    # closed interval: one-sided derivatives at the end points
    s = np.asarray(s, dtype=float)
    return (s >= 0.0) & (s <= 1.0)


def phase_mobility(s, phase: str, fluids: FluidProps):
    s = _clamp(np.asarray(s, dtype=float))
    if phase == "w":
        return s ** fluids.gamma / fluids.mu_w
    if phase == "nw":
        return (1.0 - s) ** fluids.gamma / fluids.mu_nw
    raise ValueError(f"unknown phase {phase!r}")


def phase_mobility_derivative(s, phase: str, fluids: FluidProps):
    g = fluids.gamma
    sc = _clamp(np.asarray(s, dtype=float))
    inside = _inside(s)
    if phase == "w":
        d = g * sc ** (g - 1.0) / fluids.mu_w
    elif phase == "nw":
        d = -g * (1.0 - sc) ** (g - 1.0) / fluids.mu_nw
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return np.where(inside, d, 0.0)


def total_mobility(s, fluids: FluidProps):
    lam = phase_mobility(s, "w", fluids) + phase_mobility(s, "nw", fluids)
    if np.any(lam <= 0.0):
        raise ConstitutiveError("total mobility vanished")
    return lam


def total_mobility_derivative(s, fluids: FluidProps):
    return phase_mobility_derivative(s, "w", fluids) + phase_mobility_derivative(s, "nw", fluids)


def inverse_mobility_derivative(s, fluids: FluidProps):
    """d(1/lambda)/ds = -lambda'/lambda^2."""
    lam = total_mobility(s, fluids)
    return -total_mobility_derivative(s, fluids) / lam**2


def fractional_flow(s, fluids: FluidProps):
    lw = phase_mobility(s, "w", fluids)
    lam = lw + phase_mobility(s, "nw", fluids)
    if np.any(lam <= 0.0):
        raise ConstitutiveError("total mobility vanished")
    return lw / lam


def fractional_flow_derivative(s, fluids: FluidProps):
    lw = phase_mobility(s, "w", fluids)
    ln = phase_mobility(s, "nw", fluids)
    dlw = phase_mobility_derivative(s, "w", fluids)
    dln = phase_mobility_derivative(s, "nw", fluids)
    lam = lw + ln
    if np.any(lam <= 0.0):
        raise ConstitutiveError("total mobility vanished")
    return (dlw * ln - lw * dln) / lam**2


@lru_cache(maxsize=64)
def max_fractional_flow_derivative(fluids: FluidProps) -> float:
    """max over s in [0, 1] of f_w'(s): dense sampling refined by a bounded search."""
    grid = np.linspace(0.0, 1.0, 2001)
    vals = fractional_flow_derivative(grid, fluids)
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(lambda x: -float(fractional_flow_derivative(x, fluids)),
                          bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    return float(max(vals[i], -res.fun))


def producer_flux_coefficient(s, well: Well, fluids: FluidProps):
    """Diagonal flux-mass entry ``1 / (lambda(s) WI)`` of a producer flux unknown."""
    if well.well_index <= 0:
        raise ValueError("well index must be positive")
    return 1.0 / (total_mobility(s, fluids) * well.well_index)


def peaceman_well_index(kx: float, ky: float, dx: float, dy: float, h: float,
                        rw: float = 0.1, skin: float = 0.0) -> float:
    """Peaceman index of a vertical well in a Cartesian cell.

    Uses the isotropic form ``2 pi k h / (ln(re/rw) + skin)`` with
    ``re = 0.2 dx`` and ``k = sqrt(kx ky)``.
    """
    k = np.sqrt(kx * ky)
    re = 0.2 * dx
    if re <= rw:
        raise ValueError("equivalent radius must exceed the wellbore radius")
    return float(2.0 * np.pi * k * h / (np.log(re / rw) + skin))


def cell_inflow(sigma, face_cells, n_cells: int, injection=None):
    """Total inflow rate into each cell from face fluxes (and injection sources)."""
    sigma = np.asarray(sigma, dtype=float)[: len(face_cells)]
    inflow = np.zeros(n_cells)
    # positive sigma flows K -> L
    np.add.at(inflow, face_cells[:, 1], np.maximum(sigma, 0.0))
    np.add.at(inflow, face_cells[:, 0], np.maximum(-sigma, 0.0))
    if injection is not None:
        inflow += injection
    return inflow


def cfl_number(sigma, mesh, wells, dt: float, fluids: FluidProps) -> float:
    """max_K (dt / pv_K) * inflow_K * max f_w'.

    ``inflow_K`` collects positive face inflow and injector rates of cell K.
    """
    inj = np.zeros(mesh.n_cells)
    for w in injectors(wells):
        inj[w.cell] += w.rate
    inflow = cell_inflow(sigma, mesh.face_cells, mesh.n_cells, inj)
    if not np.any(inflow):
        return 0.0
    return float(np.max(dt * inflow / mesh.pore_volumes) * max_fractional_flow_derivative(fluids))
