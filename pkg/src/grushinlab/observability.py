"""Empirical observability constants: the largest eigenvalue of the pencil (‖u(T)‖², ∫∫_ω|u|²).

Two realizations of the pencil are provided.  :func:`reduced_pencil` works in the
eigen-coordinates of the (small, dense) generator, where one implicit step is a
diagonal amplification.  The raw Gramian is numerically singular (fast modes
supported off ω are almost unobservable), so it is never formed: the observation
map is QR-factored instead and the fast coordinates are eliminated exactly.
:class:`EvolutionPencil` applies both forms matrix-free through the time stepper
(forward pass, then reverse accumulation with the self-adjoint step); it is only
usable on coarse grids where its Gramian is still well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh, solve_triangular
from scipy.sparse.linalg import LinearOperator, cg

from .domain import Grid1D, IndexSet, TensorGrid, as_tensor_grid, build_tensor_grid, subdomain_indices
from .evolution import Stepper, normalize_scheme, time_nodes
from .operators import CoefficientB, assemble_mode_operator, check_gamma
from .parallel import parallel_map
from .spectral import ModeBasis, block_members, complete_basis


class NonObservableError(RuntimeError):
    """The observation Gramian is numerically singular at this resolution."""


# The exact discrete constant hinges on cancellations among fast modes with huge
# coefficients and is not reproducible in double precision.  The reported
# constant is the relaxed one,
#     ‖u(T)‖² ≤ C (∫∫_ω|u|² + ε r₁^{2K} ‖u0‖²),
# with r₁^{2K} the squared decay of the slowest mode, so C ≤ 1/ε.  Monotonicity
# in T and the full-observation bound C ≤ 1/T remain exact.
DEFAULT_REG = 1e-10


# --- pencils -----------------------------------------------------------------


def _amplification(lam: np.ndarray, dt: float, scheme: str) -> np.ndarray:
    if scheme == "backward-euler":
        return 1.0 / (1.0 + lam * dt)
    return (1.0 - 0.5 * lam * dt) / (1.0 + 0.5 * lam * dt)


def trapezoid_geometric(q: np.ndarray, K: int, dt: float) -> np.ndarray:
    """dt·[Σ_{k=0}^{K} q^k − (1 + q^K)/2], the trapezoid rule applied to k ↦ q^k."""
    q = np.asarray(q, dtype=float)
    qK = q**K
    with np.errstate(divide="ignore", invalid="ignore"):
        # expm1 form stays accurate as q → 1 from either side (q > 0)
        lq = np.log(np.where(q > 0, q, 1.0))
        stable = np.expm1((K + 1) * lq) / np.expm1(lq)
        geo = np.where(q == 1.0, K + 1.0, np.where(q > 0, stable, (1.0 - qK * q) / (1.0 - q)))
    return dt * (geo - 0.5 * (1.0 + qK))


@dataclass
class SpectralPencil:
    """Dense symmetric pencil (A, B) with B positive definite."""

    A: np.ndarray
    B: np.ndarray
    scale: float = 1.0  # the pencil quotient is scale·(cᵀAc)/(cᵀBc)

    @property
    def size(self) -> int:
        return self.A.shape[0]

    def apply_A(self, c):
        return self.A @ c

    def apply_B(self, c):
        return self.B @ c

    def diag_B(self):
        return np.diag(self.B).copy()

    def dense(self):
        return self.A, self.B


@dataclass
class ReducedPencil(SpectralPencil):
    """Pencil on the weakly damped eigen-coordinates L.

    The observation map is factored F = QR with the strongly damped coordinates H
    ordered first, so R_LLᵀR_LL is the Schur complement of the Gramian after the
    H-coordinates have been chosen optimally.  Their contribution to ‖u(T)‖² is
    below ``threshold`` relative to the slowest mode and is dropped.
    """

    R_LL: np.ndarray = field(default=None, repr=False)
    e_L: np.ndarray = field(default=None, repr=False)  # amplification r^K of each kept coordinate
    kept: np.ndarray = field(default=None, repr=False)
    threshold: float = 0.0
    reg: float = 0.0
    _b_scale: float = 1.0

    def solve_B(self, y):
        """B⁻¹y through the triangular factor (B = R_LLᵀR_LL up to the stored scale)."""
        z = solve_triangular(self.R_LL, y, trans="T")
        return self._b_scale * solve_triangular(self.R_LL, z)

    def svd_constant(self) -> float:
        """σ_max(E_L R_LL⁻¹)², an eigen-free evaluation of the same constant."""
        X = np.linalg.solve(self.R_LL.T, np.diag(self.e_L))
        return float(np.linalg.norm(X, 2) ** 2)


def trapezoid_weights_time(K: int, dt: float) -> np.ndarray:
    w = np.full(K + 1, dt)
    w[[0, -1]] = 0.5 * dt
    return w


def reduced_pencil(
    amplification: np.ndarray,
    observe: np.ndarray,
    K: int,
    dt: float,
    threshold: float = 1e-30,
    chunk: int = 64,
    reg: float = DEFAULT_REG,
) -> ReducedPencil:
    """Pencil of ‖Σ r^K c‖² against Σ_k w_k ‖O diag(r^k) c‖² + reg·max(r)^{2K}‖c‖².

    ``observe`` maps coordinates to observed values (rows already carry any
    spatial quadrature weight); ``amplification`` holds the per-step factor r.
    """
    r = np.asarray(amplification, dtype=float)
    with np.errstate(under="ignore"):
        a = r ** (2 * K)
    L = a >= threshold * a.max()
    order = np.concatenate([np.flatnonzero(~L), np.flatnonzero(L)])
    O = observe[:, order]
    if O.shape[0] > O.shape[1]:
        O = np.linalg.qr(O, mode="r")  # same ‖O c‖ with fewer rows
    ro = r[order]
    w = trapezoid_weights_time(K, dt)
    n = len(order)
    R = np.sqrt(reg * a.max()) * np.eye(n) if reg > 0 else np.zeros((0, n))
    with np.errstate(under="ignore"):
        for k0 in range(0, K + 1, chunk):
            ks = np.arange(k0, min(K + 1, k0 + chunk))
            blocks = [np.sqrt(w[k]) * O * ro**k for k in ks]
            R = np.linalg.qr(np.vstack([R] + blocks), mode="r")
    m = int(L.sum())
    R_LL = R[n - m :, n - m :] if R.shape[0] >= n else None
    if R_LL is None or np.any(np.abs(np.diag(R_LL)) == 0):
        raise NonObservableError("observation map is rank deficient on the slow modes")
    e_L = np.sqrt(a[L])
    S = R_LL.T @ R_LL
    S = 0.5 * (S + S.T)
    sa, sb = a[L].max(), np.trace(S) / m
    return ReducedPencil(
        np.diag(a[L] / sa), S / sb, sa / sb, R_LL, e_L, np.flatnonzero(L), threshold, reg, sb
    )


class EvolutionPencil:
    """Matrix-free pencil: A u0 = S^K S^K u0, B u0 = Σ_k w_k S^k D S^k u0 + reg_abs·u0.

    ``reg_abs`` is the absolute relaxation weight (ε r₁^{2K} for the relaxed constant).
    """

    def __init__(
        self, op, mask: np.ndarray, T: float, dt: float, scheme: str = "backward-euler", reg_abs: float = 0.0
    ):
        self.stepper = Stepper(op, dt, scheme)
        self.reg = float(reg_abs)
        self.K = len(time_nodes(T, dt)) - 1
        self.dt = dt
        self.mask = np.asarray(mask, dtype=float)
        w = np.full(self.K + 1, dt)
        w[[0, -1]] = 0.5 * dt
        self.w = w

    @property
    def size(self) -> int:
        return self.stepper.n

    def _S(self, u):
        return self.stepper.solve(self.stepper.apply_explicit(u))

    def _St(self, u):
        return self.stepper.apply_explicit_transpose(self.stepper.solve_transpose(u))

    def forward(self, u0):
        xs = [np.asarray(u0, dtype=float)]
        for _ in range(self.K):
            xs.append(self._S(xs[-1]))
        return xs

    def apply_A(self, u0):
        x = self.forward(u0)[-1]
        for _ in range(self.K):
            x = self._St(x)
        return x

    def apply_B(self, u0):
        xs = self.forward(u0)
        y = self.w[-1] * self.mask * xs[-1]
        for k in range(self.K - 1, -1, -1):
            y = self.w[k] * self.mask * xs[k] + self._St(y)
        return y + self.reg * xs[0]

    def diag_B(self):
        return None

    def dense(self):
        I = np.eye(self.size)
        A = np.column_stack([self.apply_A(e) for e in I])
        B = np.column_stack([self.apply_B(e) for e in I])
        return 0.5 * (A + A.T), 0.5 * (B + B.T)


# --- the constant ----------------------------------------------------------------


@dataclass(frozen=True)
class ObsReport:
    C_obs: float
    iterations: int
    residual: float
    u0: np.ndarray = field(repr=False)
    quotient: float = 0.0  # A(u0)/B(u0) for the returned optimizer


def empirical_obs_constant(
    pencil, tol: float = 1e-6, max_iter: int = 2000, cg_rtol: float = 1e-10, seed: int = 0
) -> ObsReport:
    """Power iteration u ← B⁻¹Au.

    Inner solves use the pencil's own factorization when it has one and
    preconditioned CG otherwise.
    """
    n = pencil.size
    direct = getattr(pencil, "solve_B", None)
    Bop = LinearOperator((n, n), matvec=pencil.apply_B, dtype=float)
    d = pencil.diag_B()
    M = None
    if d is not None:
        if np.any(d <= 0):
            raise NonObservableError("observation Gramian has a zero diagonal entry")
        M = LinearOperator((n, n), matvec=lambda x: x / d, dtype=float)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(n)
    u /= np.linalg.norm(u)
    q_old = None
    x = None
    for it in range(1, max_iter + 1):
        Au = pencil.apply_A(u)
        if direct is not None:
            x, info = direct(Au), 0
        else:
            x, info = cg(Bop, Au, x0=x, rtol=cg_rtol, atol=0.0, maxiter=10 * n, M=M)
        if info != 0:
            r = np.linalg.norm(pencil.apply_B(x) - Au) / np.linalg.norm(Au)
            raise NonObservableError(
                f"CG on the observation Gramian failed (info={info}, relative residual {r:.2e}); "
                "the system is not observable at this resolution"
            )
        nx = np.linalg.norm(x)
        if nx == 0 or not np.isfinite(nx):
            raise NonObservableError("power iteration collapsed")
        u = x / nx
        x = x / nx
        Au = pencil.apply_A(u)
        Bu = pencil.apply_B(u)
        q = float(u @ Au / (u @ Bu))
        if q_old is not None and abs(q - q_old) <= tol * abs(q):
            res = float(np.linalg.norm(Au - q * Bu) / np.linalg.norm(Au))
            c = q * getattr(pencil, "scale", 1.0)
            return ObsReport(c, it, res, u, c)
        q_old = q
    raise NonObservableError(f"power iteration did not converge in {max_iter} steps")


def dense_obs_constant(pencil) -> float:
    """Largest generalized eigenvalue by a dense symmetric-definite solve (oracle)."""
    A, B = pencil.dense()
    return float(eigh(A, B, eigvals_only=True)[-1]) * getattr(pencil, "scale", 1.0)


# --- problems ------------------------------------------------------------------


@dataclass(frozen=True)
class ObsProblem:
    """Mode system on an x-grid, observed on ω₁ (or a box ω of the tensor grid)."""

    gamma: float
    grid_x: TensorGrid
    omega1: IndexSet
    T: float
    dt: float
    b: float | CoefficientB = 1.0
    scheme: str = "backward-euler"

    def mode_pencil(self, mu: float, realization: str = "spectral"):
        op = assemble_mode_operator(self.grid_x, mu, self.gamma, self.b)
        mask = self.omega1.interior_mask()
        lam, V = np.linalg.eigh(op.matrix.toarray())
        K = len(time_nodes(self.T, self.dt)) - 1
        r = _amplification(lam, self.dt, normalize_scheme(self.scheme))
        if realization == "evolution":
            return EvolutionPencil(op.matrix, mask, self.T, self.dt, self.scheme, DEFAULT_REG * r.max() ** (2 * K))
        return reduced_pencil(r, V[mask], K, self.dt)


def mode_problem(
    gamma: float,
    x_interval: tuple[float, float],
    omega1: tuple[float, float],
    T: float,
    N: int = 101,
    dt: float | None = None,
    b: float = 1.0,
) -> ObsProblem:
    g = as_tensor_grid(Grid1D(*x_interval, N))
    dt = T / 1000 if dt is None else dt
    return ObsProblem(check_gamma(gamma), g, subdomain_indices(g, [omega1]), float(T), float(dt), b)


def mode_obs_constant(problem: ObsProblem, mu: float, tol: float = 1e-6) -> ObsReport:
    return empirical_obs_constant(problem.mode_pencil(mu), tol)


@dataclass(frozen=True)
class UniformityTable:
    n: np.ndarray
    mu: np.ndarray
    C: np.ndarray
    T: float

    @property
    def sup(self) -> float:
        return float(self.C.max())

    @property
    def argmax_n(self) -> int:
        return int(self.n[int(np.argmax(self.C))])

    def tail_nonincreasing(self, count: int = 5, rtol: float = 1e-6) -> bool:
        tail = self.C[-count:]
        return bool(np.all(np.diff(tail) <= rtol * tail[:-1]))


def uniformity_study(
    problem: ObsProblem, mus: Sequence[float], ns: Sequence[int] | None = None, workers: int | None = None
) -> UniformityTable:
    ns = np.arange(1, len(mus) + 1) if ns is None else np.asarray(ns)
    Cs = parallel_map(lambda m: mode_obs_constant(problem, m).C_obs, list(mus), workers)
    return UniformityTable(np.asarray(ns), np.asarray(mus, dtype=float), np.asarray(Cs), problem.T)


def growth_slope(mus: np.ndarray, Cs: np.ndarray) -> float:
    """Least-squares slope of log C_n against √μ_n."""
    return float(np.polyfit(np.sqrt(mus), np.log(Cs), 1)[0])


@dataclass(frozen=True)
class MinimalTimeResult:
    T_hat: float
    bracket: tuple[float, float]
    slopes: dict  # T -> slope
    tables: dict = field(repr=False)  # T -> C_n array

    @property
    def width(self) -> float:
        return self.bracket[1] - self.bracket[0]


def minimal_time_study(
    x_interval: tuple[float, float],
    omega1: tuple[float, float],
    T_list: Sequence[float],
    mus: Sequence[float],
    N: int = 161,
    steps: int = 400,
    rel_width: float = 0.1,
    max_bisect: int = 30,
    workers: int | None = None,
) -> MinimalTimeResult:
    """γ = 1: slope of log C_n vs √μ_n across T, and the sign change located by bisection.

    ``steps`` time steps are used on every horizon so that dt scales with T.
    """
    mus = np.asarray(mus, dtype=float)
    slopes, tables = {}, {}

    def slope_at(T):
        prob = mode_problem(1.0, x_interval, omega1, T, N, T / steps)
        Cs = np.array(parallel_map(lambda m: mode_obs_constant(prob, m).C_obs, list(mus), workers))
        tables[float(T)] = Cs
        s = growth_slope(mus, Cs)
        slopes[float(T)] = s
        return s

    Ts = sorted(float(t) for t in T_list)
    vals = [slope_at(t) for t in Ts]
    lo = hi = None
    for (t0, s0), (t1, s1) in zip(zip(Ts, vals), zip(Ts[1:], vals[1:])):
        if s0 > 0 >= s1:
            lo, hi = t0, t1
            break
    if lo is None:
        raise RuntimeError(f"slope does not change sign on {Ts}: {vals}")
    for _ in range(max_bisect):
        if hi - lo <= rel_width * 0.5 * (lo + hi):
            break
        mid = 0.5 * (lo + hi)
        if slope_at(mid) > 0:
            lo = mid
        else:
            hi = mid
    return MinimalTimeResult(0.5 * (lo + hi), (lo, hi), slopes, tables)


def fit_negative_power(Ts: Sequence[float], sups: Sequence[float], p: float) -> tuple[float, float]:
    """Least-squares (c0, c1) in log sup_n C_n(T) ≈ c0 + c1 T^{−p}."""
    Ts = np.asarray(Ts, dtype=float)
    c1, c0 = np.polyfit(Ts ** (-p), np.log(sups), 1)
    return float(c0), float(c1)


# --- full tensor system ----------------------------------------------------------


@dataclass(frozen=True)
class FullObsResult:
    report: ObsReport
    n_modes: int
    refinement: ObsReport | None
    relative_change: float | None


def _tensor_pencil(
    grid: TensorGrid, gamma: float, omega: Sequence, T: float, dt: float, n_modes: int, b=1.0, scheme="backward-euler",
    basis: ModeBasis | None = None,
):
    gx = grid.x_part
    basis = basis or complete_basis(grid.grid_y)
    if n_modes > basis.n_modes:
        raise ValueError("more modes requested than the y-grid resolves")
    box = list(omega)
    om_x = subdomain_indices(gx, box[: gx.ndim])
    om_y = subdomain_indices(grid.grid_y, [box[-1]])
    mask_x = om_x.interior_mask()
    my = om_y.interior_mask()
    # ∫_{ω_y}|Σ v_n φ_n|² = ‖R_y v‖² with R_y from a QR of the sampled modes
    psi = np.sqrt(grid.grid_y.h) * basis.phi[:n_modes][:, my]
    R_y = np.linalg.qr(psi.T, mode="r")
    amp, cols = [], []
    scheme = normalize_scheme(scheme)
    for n, mu in enumerate(basis.mu[:n_modes]):
        op = assemble_mode_operator(gx, mu, gamma, b)
        lam, V = np.linalg.eigh(op.matrix.toarray())
        amp.append(_amplification(lam, dt, scheme))
        cols.append(np.kron(R_y[:, n : n + 1], V[mask_x]))
    K = len(time_nodes(T, dt)) - 1
    return reduced_pencil(np.concatenate(amp), np.hstack(cols), K, dt)


def full_observability_check(
    grid: TensorGrid,
    gamma: float,
    omega: Sequence,
    T: float,
    dt: float | None = None,
    n_modes: int = 8,
    refine: bool = True,
    b=1.0,
    tol: float = 1e-8,
) -> FullObsResult:
    """Observability constant of the y-truncated tensor system, with a mode-doubling check."""
    dt = T / 1000 if dt is None else dt
    rep = empirical_obs_constant(_tensor_pencil(grid, gamma, omega, T, dt, n_modes, b), tol)
    ref = change = None
    if refine:
        ref = empirical_obs_constant(_tensor_pencil(grid, gamma, omega, T, dt, 2 * n_modes, b), tol)
        change = abs(ref.C_obs - rep.C_obs) / ref.C_obs
    return FullObsResult(rep, n_modes, ref, change)


# --- surrogate constants for the recursion ----------------------------------------


@dataclass(frozen=True)
class LRConstants:
    C1: float
    C2: float
    C3: float
    c_star: float
    block_C: dict  # n -> block observability constant on τ_n


def block_obs_constant(
    grid: TensorGrid, gamma: float, omega: Sequence, basis: ModeBasis, j: int, tau: float, steps: int = 200, b=1.0
) -> float | None:
    """‖u(τ)‖² ≤ C∫_0^τ∫_ω|u|² for data in the block E_j (None if the block is empty)."""
    blk = block_members(basis, j)
    if len(blk) == 0:
        return None
    pen = _tensor_pencil(grid, gamma, omega, tau, tau / steps, len(blk), b, basis=basis)
    return empirical_obs_constant(pen, 1e-8).C_obs


def lr_surrogate_constants(
    grid: TensorGrid,
    gamma: float,
    omega: Sequence,
    schedule,
    c_star: float,
    n_max: int = 5,
    steps: int = 200,
    b=1.0,
) -> LRConstants:
    """Calibrated stand-ins for the block constants feeding the recursion.

    C₁ = max_n log(2 C_n)/2ⁿ, C₂ = max_n 2^{n(ρ+2/(1+γ))}(τ_n/λ(2ⁿ) + e^{C₁(1−2ⁿ)}/2),
    C₃ = max_n τ_n e^{−λ(2ⁿ)τ_n}, with C_n the block observability constant on τ_n.
    """
    from .lr_schedule import lambda_cutoff

    basis = complete_basis(grid.grid_y)
    Cn = {}
    for n in range(1, n_max + 1):
        c = block_obs_constant(grid, gamma, omega, basis, n, float(schedule.tau[n - 1]), steps, b)
        if c is not None:
            Cn[n] = c
    if not Cn:
        raise ValueError("every block up to n_max is empty")
    C1 = max(np.log(2 * c) / 2.0**n for n, c in Cn.items())
    C1 = max(C1, 1e-12)
    e = schedule.rho + 2.0 / (1.0 + gamma)
    C2 = max(
        2.0 ** (n * e) * (schedule.tau[n - 1] / lambda_cutoff(n, c_star, gamma) + 0.5 * np.exp(C1 * (1 - 2.0**n)))
        for n in range(1, n_max + 1)
    )
    C3 = max(
        schedule.tau[n - 1] * np.exp(-lambda_cutoff(n, c_star, gamma) * schedule.tau[n - 1]) for n in range(1, n_max + 1)
    )
    return LRConstants(float(C1), float(C2), float(C3), float(c_star), Cn)
