"""Fully implicit two-phase Darcy flow with a nonlinear (FAS) multigrid solver.

Main entry points: :func:`fasflow.grid.build_cartesian_mesh`,
:func:`fasflow.hierarchy.build_hierarchy`, :func:`fasflow.nlsolve.time_loop`
and :func:`fasflow.scenario.run_scenario`.
"""

from .fvdiscr import State
from .grid import Mesh, build_cartesian_mesh
from .hierarchy import build_hierarchy
from .nlsolve import FASConfig, time_loop
from .physics import FluidProps, Well

__version__ = "0.1.0"

__all__ = ["FASConfig", "FluidProps", "Mesh", "State", "Well", "build_cartesian_mesh", "build_hierarchy",
           "time_loop", "__version__"]
