"""Dirichlet spectrum of -d²/dy² on Ω₂, dyadic blocks and block projections."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .domain import Grid1D, IndexSet, TensorGrid


class ResolutionError(ValueError):
    pass


class SingularMassError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ModeBasis:
    """Eigenpairs (mu_n, phi_n) sampled on the interior nodes of ``grid_y``.

    ``phi`` has shape (n_modes, n_interior); rows are orthonormal under the
    grid quadrature, i.e. ``h * phi @ phi.T == I``.
    """

    grid_y: Grid1D
    mu: np.ndarray
    phi: np.ndarray
    method: str = "analytic"

    @property
    def n_modes(self) -> int:
        return int(self.mu.size)

    @cached_property
    def mu_fd(self) -> np.ndarray:
        """Eigenvalues of the 3-point Laplacian on the sampled sine vectors."""
        if self.method == "fd":
            return self.mu
        n = np.arange(1, self.n_modes + 1)
        h, L = self.grid_y.h, self.grid_y.length
        return (4.0 / h**2) * np.sin(n * np.pi * h / (2.0 * L)) ** 2

    @cached_property
    def orthonormality_defect(self) -> float:
        gram = self.grid_y.h * self.phi @ self.phi.T
        return float(np.max(np.abs(gram - np.eye(self.n_modes))))

    def boundary_values(self) -> np.ndarray:
        """Samples at the two boundary nodes (identically zero by layout)."""
        return np.zeros((self.n_modes, 2))

    def coefficients(self, field: np.ndarray, n_x: int) -> np.ndarray:
        """u_n(x) = ∫ u(x,y) φ_n(y) dy for an interior field of shape (n_x, n_y)."""
        u = np.reshape(field, (n_x, self.grid_y.n_interior))
        return self.grid_y.h * u @ self.phi.T

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`coefficients` on the span of the basis."""
        return np.asarray(coeffs) @ self.phi


def _sine_modes(grid_y: Grid1D, count: int) -> tuple[np.ndarray, np.ndarray]:
    L = grid_y.length
    n = np.arange(1, count + 1)
    mu = (n * np.pi / L) ** 2
    phi = np.sqrt(2.0 / L) * np.sin(np.outer(n, grid_y.interior - grid_y.a) * np.pi / L)
    return mu, phi


def _gram_schmidt(phi: np.ndarray, h: float) -> np.ndarray:
    q, r = np.linalg.qr(np.sqrt(h) * phi.T)
    q *= np.sign(np.diag(r))
    return q.T / np.sqrt(h)


def dirichlet_eigenpairs(grid_y: Grid1D, count: int, method: str = "analytic") -> ModeBasis:
    """First ``count`` Dirichlet eigenpairs of -d²/dy² on the interval of ``grid_y``.

    ``method="analytic"`` samples the classical sine modes; ``"fd"`` solves the
    tridiagonal 3-point Laplacian instead (used as an independent check).
    """
    if count < 1 or count > grid_y.n_interior // 2:
        raise ResolutionError(
            f"{count} modes requested but only {grid_y.n_interior // 2} are resolved by "
            f"{grid_y.n_interior} interior nodes"
        )
    return _basis(grid_y, count, method)


def complete_basis(grid_y: Grid1D, method: str = "analytic") -> ModeBasis:
    """All ``n_interior`` discrete modes; spans every interior grid function."""
    return _basis(grid_y, grid_y.n_interior, method)


def _basis(grid_y: Grid1D, count: int, method: str) -> ModeBasis:
    h = grid_y.h
    if method == "analytic":
        mu, phi = _sine_modes(grid_y, count)
    elif method == "fd":
        m = grid_y.n_interior
        d = np.full(m, 2.0 / h**2)
        e = np.full(m - 1, -1.0 / h**2)
        mu, vec = eigh_tridiagonal(d, e, select="i", select_range=(0, count - 1))
        phi = vec.T / np.sqrt(h)
        phi *= np.sign(phi[:, :1] + 1e-300)  # first sample positive
    else:
        raise ValueError(f"unknown method {method!r}")
    defect = np.max(np.abs(h * phi @ phi.T - np.eye(count)))
    if defect > 1e-10:
        phi = _gram_schmidt(phi, h)
    mu.setflags(write=False)
    phi.setflags(write=False)
    return ModeBasis(grid_y, mu, phi, method)


@dataclass(frozen=True)
class BlockIndex:
    j: int
    cutoff: float
    members: np.ndarray  # zero-based mode indices

    @property
    def mode_numbers(self) -> list[int]:
        return [int(m) + 1 for m in self.members]

    def __len__(self) -> int:
        return int(self.members.size)


def block_members(basis: ModeBasis, j: int) -> BlockIndex:
    """Modes with mu_n <= 2^(2j); the boundary case is included."""
    if j < 1:
        raise ValueError("block index j must be >= 1")
    cutoff = 4.0**j
    members = np.flatnonzero(basis.mu <= cutoff)
    return BlockIndex(int(j), cutoff, members)


def block_min_index(mu: float) -> int:
    """Smallest j >= 1 whose block contains an eigenvalue mu."""
    j = max(1, int(np.ceil(0.5 * np.log2(mu))))
    while 4.0**j < mu:
        j += 1
    while j > 1 and 4.0 ** (j - 1) >= mu:
        j -= 1
    return j


def project_block(field: np.ndarray, basis: ModeBasis, j: int | BlockIndex, n_x: int) -> np.ndarray:
    """Orthogonal projection onto E_j of an interior tensor-grid field."""
    block = j if isinstance(j, BlockIndex) else block_members(basis, j)
    shape = np.shape(field)
    u = np.reshape(field, (n_x, basis.grid_y.n_interior))
    phi = basis.phi[block.members]
    coeffs = basis.grid_y.h * u @ phi.T
    return (coeffs @ phi).reshape(shape)


@dataclass(frozen=True)
class SpectralInequalityResult:
    mu: float
    n_modes: int
    C_emp: float
    log_rate: float  # log(C_emp) / sqrt(mu)
    condition: float


def restricted_mass(basis: ModeBasis, omega2: IndexSet, members: np.ndarray) -> np.ndarray:
    """Gram matrix ∫_{ω₂} φ_k φ_l dy of the given modes (node-membership quadrature)."""
    mask = omega2.interior_mask()
    if mask.size != basis.grid_y.n_interior:
        raise ValueError("ω₂ index set does not belong to the y-grid")
    phi = basis.phi[members][:, mask]
    return basis.grid_y.h * phi @ phi.T


def spectral_inequality_constant(
    basis: ModeBasis, omega2: IndexSet, mu: float, cond_max: float = 1e13
) -> SpectralInequalityResult:
    """Empirical constant of Σ_{μ_k≤μ}|b_k|² ≤ C ∫_{ω₂}|Σ b_k φ_k|²."""
    members = np.flatnonzero(basis.mu <= mu)
    if members.size == 0:
        return SpectralInequalityResult(float(mu), 0, 1.0, 0.0, 1.0)
    if members.size == basis.n_modes and basis.mu[-1] < mu:
        raise ResolutionError(f"mu={mu} exceeds the largest available eigenvalue {basis.mu[-1]}")
    mass = restricted_mass(basis, omega2, members)
    w = np.linalg.eigvalsh(mass)
    cond = float(w[-1] / w[0]) if w[0] > 0 else np.inf
    if not np.isfinite(cond) or cond > cond_max:
        raise SingularMassError(
            f"restricted mass form is numerically singular (condition {cond:.3e} > {cond_max:.1e}); "
            "refine the y-grid or enlarge ω₂"
        )
    C = float(1.0 / w[0])
    return SpectralInequalityResult(float(mu), int(members.size), C, float(np.log(C) / np.sqrt(mu)), cond)


@dataclass(frozen=True)
class GrowthFit:
    slope: float  # C in log C_emp ≈ c + C √μ
    intercept: float
    residual: float  # RMS residual of the fit
    mus: np.ndarray
    log_C: np.ndarray


def fit_spectral_growth(results: list[SpectralInequalityResult]) -> GrowthFit:
    mus = np.array([r.mu for r in results])
    logc = np.log([r.C_emp for r in results])
    A = np.column_stack([np.ones_like(mus), np.sqrt(mus)])
    coef, *_ = np.linalg.lstsq(A, logc, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - logc) ** 2)))
    return GrowthFit(float(coef[1]), float(coef[0]), resid, mus, logc)


def y_operator(basis: ModeBasis, kind: str = "spectral"):
    """-d²/dy² on interior y-nodes: dense spectral (exact sine spectrum) or sparse FD."""
    import scipy.sparse as sp

    g = basis.grid_y
    if kind == "spectral":
        if basis.n_modes != g.n_interior:
            raise ValueError("spectral y-operator needs the complete basis")
        return g.h * (basis.phi.T * basis.mu) @ basis.phi
    if kind == "fd":
        m = g.n_interior
        return sp.diags([-np.ones(m - 1), 2 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1]) / g.h**2
    raise ValueError(f"unknown y-operator kind {kind!r}")


def mode_eigenvalues(basis: ModeBasis, kind: str = "spectral") -> np.ndarray:
    """Eigenvalue of the y-operator of the given kind on each basis vector."""
    return basis.mu if kind == "spectral" else basis.mu_fd


def tensor_grid_check(grid: TensorGrid, basis: ModeBasis) -> None:
    if not grid.has_y or grid.grid_y != basis.grid_y:
        raise ValueError("mode basis was built on a different y-grid")
