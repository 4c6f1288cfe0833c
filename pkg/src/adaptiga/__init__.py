"""Adaptive immersed isogeometric analysis with truncated hierarchical B-splines."""

from .adapt import Simulation, adaptive_loop, dorfler_mark, refinement_mask, support_extension
from .assembly import StabilizationParams, assemble_laplace, assemble_stokes, solve
from .cases import case_catalog, make_case, run_convergence
from .constants import compute_extension_constants, compute_trace_constant
from .geom import Geometry, LevelSet
from .hmesh import AmbientGrid, ElementRef, HierMesh, build_background, refine
from .thb import build_basis

__all__ = [
    "AmbientGrid", "ElementRef", "Geometry", "HierMesh", "LevelSet", "Simulation", "StabilizationParams",
    "adaptive_loop", "assemble_laplace", "assemble_stokes", "build_background", "build_basis", "case_catalog",
    "compute_extension_constants", "compute_trace_constant", "dorfler_mark", "make_case", "refine",
    "refinement_mask", "run_convergence", "solve", "support_extension",
]
