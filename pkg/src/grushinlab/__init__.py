"""Numerical laboratory for Grushin-type degenerate parabolic equations.

The operator is G_γ = −Δ_x − |x|^{2γ} b(x) Δ_y on Ω₁ × (0, L) with Dirichlet
data.  Submodules:

    domain           uniform grids and box subdomains
    spectral         Dirichlet y-modes, dyadic blocks, spectral inequality
    operators        mode operators G_n, the full tensor operator, λ_n scaling
    evolution        implicit time stepping and dissipation checks
    carleman         weight construction and the weighted estimate
    lr_schedule      dyadic time/frequency schedule and its recursion
    observability    discrete observability constants
    inverse_source   forward map, adjoint and Tikhonov reconstruction
    control          dyadic penalized-HUM null control
    cli              config-driven experiment runner
"""

from .domain import Grid1D, TensorGrid, build_tensor_grid, subdomain_indices
from .evolution import SourceTerm, Trajectory, solve_full, solve_mode
from .operators import assemble_full_operator, assemble_mode_operator, smallest_eigenvalue
from .spectral import complete_basis, dirichlet_eigenpairs

__version__ = "0.1.0"

__all__ = [
    "Grid1D",
    "TensorGrid",
    "build_tensor_grid",
    "subdomain_indices",
    "SourceTerm",
    "Trajectory",
    "solve_full",
    "solve_mode",
    "assemble_full_operator",
    "assemble_mode_operator",
    "smallest_eigenvalue",
    "complete_basis",
    "dirichlet_eigenpairs",
]
