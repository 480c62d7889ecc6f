"""Numerical laboratory for compressible barotropic Navier-Stokes on the periodic box.

Modules: ``grid`` (spectral calculus), ``pressure`` (laws and hypothesis
checks), ``stress`` (isotropic and anisotropic viscous operators),
``solver`` (time integration and budgets), ``transport_weights`` (maximal
functions and penalized weights), ``kernels`` and ``diagnostics``
(oscillation functionals, Besov norms, rate fits), ``config`` and ``cli``.
"""

from .grid import ScalarField, TorusGrid, VectorField
from .pressure import PressureLaw, check_hypotheses
from .solver import FluidState, SolverConfig, run
from .stress import AnisotropySpec

__all__ = [
    "TorusGrid",
    "ScalarField",
    "VectorField",
    "PressureLaw",
    "check_hypotheses",
    "AnisotropySpec",
    "FluidState",
    "SolverConfig",
    "run",
]
__version__ = "0.1.0"
