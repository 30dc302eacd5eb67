"""Mode operators -Δ_x + μ|x|^{2γ}b(x), the full Grushin operator, and the dissipation rate."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .domain import Grid1D, TensorGrid, as_tensor_grid
from .spectral import ModeBasis, tensor_grid_check, y_operator


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""


def check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"degeneracy exponent must lie in (0, 1], got {gamma}")
    return gamma


@dataclass(frozen=True)
class CoefficientB:
    """Samples of the positive coefficient b on every node of an x-grid (x-major)."""

    samples: np.ndarray
    grid_x: TensorGrid

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float).ravel()
        if s.size != self.grid_x.n_nodes:
            raise ValueError(f"expected {self.grid_x.n_nodes} samples of b, got {s.size}")
        if not np.all(np.isfinite(s)) or s.min() <= 0:
            raise ValueError("b must be finite and strictly positive on the closed domain")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def b_min(self) -> float:
        return float(self.samples.min())

    @property
    def b_max(self) -> float:
        return float(self.samples.max())

    @property
    def interior(self) -> np.ndarray:
        g = self.grid_x
        return self.samples.reshape(g.shape)[tuple(slice(1, -1) for _ in g.axes)].ravel()


def coefficient_b(grid_x: Grid1D | TensorGrid, b: float | Callable | Sequence[float] | CoefficientB = 1.0) -> CoefficientB:
    """Build b from a constant, a callable of the node coordinates, or a nodal table."""
    g = as_tensor_grid(grid_x)
    if isinstance(b, CoefficientB):
        if b.grid_x != g:
            raise ValueError("coefficient b was sampled on a different grid")
        return b
    if callable(b):
        vals = np.broadcast_to(b(*g.mesh(interior=False)), g.shape)
    elif np.isscalar(b):
        vals = np.full(g.shape, float(b))
    else:
        vals = np.asarray(b, dtype=float)
    return CoefficientB(np.ravel(vals), g)


def dirichlet_laplacian(grid: Grid1D | TensorGrid) -> sp.csr_matrix:
    """-Δ with the 3-point stencil per axis on interior nodes (x-major ordering)."""
    g = as_tensor_grid(grid)
    mats = []
    for ax in g.axes:
        m = ax.n_interior
        mats.append(sp.diags([-np.ones(m - 1), 2 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1]) / ax.h**2)
    if len(mats) == 1:
        return sp.csr_matrix(mats[0])
    out = None
    for k, mk in enumerate(mats):
        term = mk
        for j, other in enumerate(mats):
            if j < k:
                term = sp.kron(sp.identity(other.shape[0]), term)
            elif j > k:
                term = sp.kron(term, sp.identity(other.shape[0]))
        out = term if out is None else out + term
    return sp.csr_matrix(out)


def degenerate_weight(grid_x: TensorGrid, gamma: float, b: CoefficientB) -> np.ndarray:
    """|x|^{2γ} b(x) at interior x-nodes."""
    r = np.sqrt(sum(c**2 for c in grid_x.mesh())).ravel()
    return r ** (2 * gamma) * b.interior


@dataclass(frozen=True)
class ModeOperator:
    mu: float
    gamma: float
    matrix: sp.csr_matrix
    grid_x: TensorGrid
    b: CoefficientB
    potential: np.ndarray = field(repr=False)  # μ|x|^{2γ}b at interior nodes

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def quadratic_form(self, v: np.ndarray) -> float:
        return self.grid_x.inner(v, self.matrix @ v)

    def symmetry_defect(self) -> float:
        d = self.matrix - self.matrix.T
        return float(abs(d).max()) if d.nnz else 0.0


def assemble_mode_operator(
    grid_x: Grid1D | TensorGrid, mu: float, gamma: float, b: float | Callable | CoefficientB = 1.0
) -> ModeOperator:
    gamma = check_gamma(gamma)
    if not np.isfinite(mu) or mu < 0:
        raise ValueError(f"mode eigenvalue must be finite and nonnegative, got {mu}")
    g = as_tensor_grid(grid_x)
    if g.has_y:
        raise ValueError("mode operators act on the x-grid only")
    bb = coefficient_b(g, b)
    pot = float(mu) * degenerate_weight(g, gamma, bb)
    pot.setflags(write=False)
    A = dirichlet_laplacian(g) + sp.diags(pot)
    return ModeOperator(float(mu), gamma, sp.csr_matrix(A), g, bb, pot)


@dataclass(frozen=True)
class EigenResult:
    value: float
    vector: np.ndarray  # grid-normalized: grid_x.norm(vector) == 1
    iterations: int
    residual: float  # ‖Av − λv‖ / λ in the grid norm


def _jacobi(A: sp.spmatrix) -> LinearOperator:
    d = 1.0 / A.diagonal()
    return LinearOperator(A.shape, matvec=lambda x: d * x, dtype=float)


def smallest_eigenvalue(
    op: ModeOperator, tol: float = 1e-10, max_iter: int = 500, seed: int = 0
) -> EigenResult:
    """Inverse power iteration with Jacobi-preconditioned CG inner solves."""
    A = op.matrix
    n = A.shape[0]
    M = _jacobi(A)
    rng = np.random.default_rng(seed)
    # a positive start vector overlaps the (positive) ground state
    v = 1.0 + 0.1 * rng.random(n)
    v /= op.grid_x.norm(v)
    lam = op.quadratic_form(v)
    inner_tol = min(1e-3 * tol, 1e-12)
    for it in range(1, max_iter + 1):
        w, info = cg(A, v, x0=v / lam, rtol=inner_tol, atol=0.0, maxiter=20 * n, M=M)
        if info != 0:
            raise ConvergenceError(f"inner CG did not converge (info={info}) at outer step {it}")
        v_new = w / op.grid_x.norm(w)
        lam_new = op.quadratic_form(v_new)
        change = abs(lam_new - lam) / lam_new
        v, lam = v_new, lam_new
        if change < tol and it > 1:
            res = op.grid_x.norm(A @ v - lam * v) / lam
            return EigenResult(float(lam), v, it, float(res))
    res = op.grid_x.norm(A @ v - lam * v) / lam
    raise ConvergenceError(
        f"inverse power iteration did not reach tol={tol} in {max_iter} steps "
        f"(last relative change {change:.3e}, residual {res:.3e})"
    )


@dataclass(frozen=True)
class ScalingFit:
    gamma: float
    mus: np.ndarray
    lambdas: np.ndarray
    exponent: float
    intercept: float
    c_star: float
    c_star_upper: float

    @property
    def expected_exponent(self) -> float:
        return 1.0 / (1.0 + self.gamma)

    def ratios(self) -> np.ndarray:
        return self.lambdas * self.mus ** (-self.expected_exponent)


def fit_scaling_law(pairs: Sequence[tuple[float, float]], gamma: float) -> ScalingFit:
    """Least-squares slope of log λ against log μ plus the envelope of λ μ^{-1/(1+γ)}."""
    gamma = check_gamma(gamma)
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 5:
        raise ValueError("need at least 5 (mu, lambda) pairs")
    mus, lams = arr[:, 0], arr[:, 1]
    if np.any(mus <= 0) or np.any(lams <= 0):
        raise ValueError("mu and lambda must be positive for a log-log fit")
    if np.log10(mus.max() / mus.min()) < 3.0 - 1e-12:
        raise ValueError("pairs must span at least 3 decades of mu")
    slope, intercept = np.polyfit(np.log(mus), np.log(lams), 1)
    ratios = lams * mus ** (-1.0 / (1.0 + gamma))
    return ScalingFit(gamma, mus, lams, float(slope), float(intercept), float(ratios.min()), float(ratios.max()))


def assemble_full_operator(
    grid: TensorGrid,
    gamma: float,
    b: float | Callable | CoefficientB,
    basis: ModeBasis,
    y_kind: str = "spectral",
) -> sp.csr_matrix:
    """-Δ_x ⊗ I + diag(|x|^{2γ}b) ⊗ (-Δ_y) on interior nodes, x-major.

    ``y_kind="spectral"`` uses the complete discrete sine basis so every φ_n is
    an exact eigenvector with eigenvalue μ_n; ``"fd"`` uses the 3-point stencil,
    whose eigenvalues on φ_n are ``basis.mu_fd``.
    """
    gamma = check_gamma(gamma)
    tensor_grid_check(grid, basis)
    gx = grid.x_part
    bb = coefficient_b(gx, b)
    Ly = y_operator(basis, y_kind)
    Ly = sp.csr_matrix(Ly)
    Ly.eliminate_zeros()
    ny = grid.grid_y.n_interior
    Ax = dirichlet_laplacian(gx)
    W = sp.diags(degenerate_weight(gx, gamma, bb))
    G = sp.kron(Ax, sp.identity(ny)) + sp.kron(W, Ly)
    G = sp.csr_matrix(G)
    return sp.csr_matrix(0.5 * (G + G.T))
