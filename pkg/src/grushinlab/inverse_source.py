"""Inverse source problem g = R(t,x) f(x,y): forward measurements, reconstruction, stability ratios.

The measurement of a source f with initial state u0 is the pair

    (∂_t u on the window [T₀, T₁] restricted to ω,  G_γ u(T₁) on Ω),

measured in the norm h Σ_k w_k |∂_t u_k|²_ω + h |G_γ u(T₁)|² (trapezoid weights w_k
over the window nodes).  ∂_t u is taken from the semi-discrete identity
∂_t u = −G_γ u + g, so it is exact for the discrete system.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.integrate import trapezoid
from scipy.sparse.linalg import LinearOperator, cg

from .domain import Grid1D, TensorGrid, as_tensor_grid, subdomain_indices
from .evolution import Stepper, normalize_scheme, time_nodes
from .operators import assemble_full_operator, assemble_mode_operator, check_gamma
from .parallel import parallel_map
from .spectral import complete_basis

DEFAULT_ETA = 0.1
DEFAULT_U0_REG = 1e-10


class HypothesisError(ValueError):
    """R does not stay bounded away from zero at T₁."""


class StabilityError(RuntimeError):
    """A nonzero source produced a zero measurement, or the pointwise chain bound failed."""


class ReconstructionError(RuntimeError):
    def __init__(self, message: str, history: Sequence[float]):
        super().__init__(message)
        self.history = list(history)


# --- source description --------------------------------------------------------


@dataclass(frozen=True)
class SourceSpec:
    """Samples of R on the time nodes × interior x-nodes and of f on the interior grid."""

    R: np.ndarray  # (K+1, n_x)
    f: np.ndarray  # (n_x * n_y,)
    times: np.ndarray
    T1: float
    dR: np.ndarray | None = None  # ∂_t R samples; finite differences of R when absent

    def __post_init__(self):
        if self.R.shape[0] != self.times.size:
            raise ValueError("R needs one row per time node")
        if not np.all(np.isfinite(self.R)) or (self.dR is not None and not np.all(np.isfinite(self.dR))):
            raise HypothesisError("R and ∂_t R must be finite")
        if not self.times[0] < self.T1 <= self.times[-1] + 1e-12:
            raise ValueError("T₁ must lie in (0, T]")

    @classmethod
    def from_functions(
        cls,
        grid: TensorGrid | Grid1D,
        R_fn: Callable,
        f_fn: Callable | np.ndarray | None,
        T1: float,
        dt: float,
        T: float | None = None,
        dR_fn: Callable | None = None,
    ) -> "SourceSpec":
        """``R_fn(t, *x)`` and ``f_fn(*x, y)`` evaluated on interior nodes."""
        grid = as_tensor_grid(grid)
        times = time_nodes(T1 if T is None else T, dt)
        xs = grid.x_part.mesh()
        shape = grid.x_part.interior_shape

        def sample(fn):
            return np.array([np.broadcast_to(fn(t, *xs), shape).ravel() for t in times])

        if f_fn is None:
            f = np.zeros(grid.n_interior)
        elif callable(f_fn):
            f = grid.sample(f_fn)
        else:
            f = np.asarray(f_fn, dtype=float).ravel()
        return cls(sample(R_fn), f, times, float(T1), None if dR_fn is None else sample(dR_fn))

    @property
    def k1(self) -> int:
        return int(np.argmin(np.abs(self.times - self.T1)))

    @property
    def R0(self) -> float:
        return float(self.R[self.k1].min())

    def time_derivative(self) -> np.ndarray:
        if self.dR is not None:
            return self.dR
        return np.gradient(self.R, self.times, axis=0)

    def variation(self, T0: float = 0.0) -> float:
        """(∫_{T₀}^{T₁} ‖∂_t R(t)‖²_∞ dt)^{1/2}."""
        sel = (self.times >= T0 - 1e-12) & (self.times <= self.T1 + 1e-12)
        if sel.sum() < 2:
            return 0.0
        sup = np.max(np.abs(self.time_derivative()[sel]), axis=1)
        return float(np.sqrt(trapezoid(sup**2, self.times[sel])))


def validate_source_spec(spec: SourceSpec, T0: float = 0.0, eta: float = DEFAULT_ETA) -> tuple[float, float]:
    """Return (R₀, V); R₀ ≤ 0 is an error, V/R₀ ≥ η only a warning."""
    R0 = spec.R0
    if not R0 > 0:
        raise HypothesisError(f"R(T₁, ·) must stay positive, min is {R0:g}")
    V = spec.variation(T0)
    if V / R0 >= eta:
        warnings.warn(f"time variation of R is not small: V/R₀ = {V / R0:.3g} ≥ η = {eta}", stacklevel=2)
    return R0, V


# --- forward map and adjoint ------------------------------------------------------


@dataclass(frozen=True)
class Measurement:
    times: np.ndarray  # window nodes
    weights: np.ndarray  # trapezoid weights on the window
    dtu: np.ndarray  # (n_window, n_obs)
    Gu: np.ndarray  # G_γ u(T₁) on the interior grid
    cell_volume: float
    noise: float = 0.0
    dtu_final: np.ndarray | None = field(default=None, repr=False)  # ∂_t u(T₁) on all of Ω

    @property
    def dtu_sq(self) -> float:
        return float(self.cell_volume * np.einsum("k,ki,ki->", self.weights, self.dtu, self.dtu))

    @property
    def Gu_sq(self) -> float:
        return float(self.cell_volume * self.Gu @ self.Gu)

    @property
    def norm_sq(self) -> float:
        return self.dtu_sq + self.Gu_sq

    def inner(self, other: "Measurement") -> float:
        h = self.cell_volume
        return float(h * np.einsum("k,ki,ki->", self.weights, self.dtu, other.dtu) + h * self.Gu @ other.Gu)

    def __sub__(self, other: "Measurement") -> "Measurement":
        return Measurement(self.times, self.weights, self.dtu - other.dtu, self.Gu - other.Gu, self.cell_volume, self.noise)


class ForwardMap:
    """(f, u0) ↦ Measurement for u' + Au = R(t,x) f, integrated to T₁.

    Batched: ``f`` and ``u0`` may carry a trailing column axis.
    """

    def __init__(
        self,
        A,
        grid: TensorGrid,
        R: np.ndarray,
        times: np.ndarray,
        T0: float,
        T1: float,
        obs_mask: np.ndarray,
        scheme: str = "crank-nicolson",
    ):
        self.grid = grid
        self.A = sp.csr_matrix(A)
        self.scheme = normalize_scheme(scheme)
        k1 = int(np.argmin(np.abs(times - T1)))
        if abs(times[k1] - T1) > 1e-9 * max(1.0, T1):
            raise ValueError(f"T₁ = {T1} is not a time node")
        if not 0.0 <= T0 < T1:
            raise ValueError("need 0 ≤ T₀ < T₁")
        self.times = np.asarray(times[: k1 + 1], dtype=float)
        self.R = np.asarray(R[: k1 + 1], dtype=float)
        self.K = k1
        self.dt = float(times[1] - times[0])
        self.stepper = Stepper(self.A, self.dt, self.scheme)
        self.theta = self.stepper.theta
        self.n = self.A.shape[0]
        self.n_x = self.R.shape[1]
        if self.n % self.n_x:
            raise ValueError("R's x-size does not divide the state size")
        self.n_y = self.n // self.n_x
        self.mask = np.asarray(obs_mask, dtype=bool)
        win = np.flatnonzero(self.times >= T0 - 1e-12)
        self.window = win
        w = np.full(win.size, self.dt)
        w[[0, -1]] = 0.5 * self.dt
        if win.size == 1:
            w[:] = 0.0
        self.weights = w
        self.cell_volume = grid.cell_volume

    # D_k f = R(t_k, x) f(x, y)
    def _D(self, k: int, f: np.ndarray) -> np.ndarray:
        m = f.shape[1]
        return (self.R[k][:, None, None] * f.reshape(self.n_x, self.n_y, m)).reshape(self.n, m)

    @staticmethod
    def _cols(v, n):
        v = np.asarray(v, dtype=float)
        return (v.reshape(n, 1), True) if v.ndim == 1 else (v, False)

    def apply(self, f, u0=None, keep_final: bool = False) -> Measurement:
        f, single = self._cols(f, self.n)
        m = f.shape[1]
        u = np.zeros((self.n, m)) if u0 is None else self._cols(u0, self.n)[0].copy()
        if u.shape[1] != m:
            u = np.broadcast_to(u, (self.n, m)).copy()
        wset = {int(k): i for i, k in enumerate(self.window)}
        dtu = np.empty((self.window.size, int(self.mask.sum()), m))
        g_prev = self._D(0, f)
        if 0 in wset:
            dtu[wset[0]] = (-(self.A @ u) + g_prev)[self.mask]
        for k in range(1, self.K + 1):
            g_next = self._D(k, f)
            rhs = self.stepper.apply_explicit(u) + self.dt * (self.theta * g_next + (1 - self.theta) * g_prev)
            u = self.stepper.solve(rhs)
            if k in wset:
                dtu[wset[k]] = (-(self.A @ u) + g_next)[self.mask]
            g_prev = g_next
        Gu = self.A @ u
        final = (-Gu + g_prev) if keep_final else None
        if single:
            dtu, Gu = dtu[..., 0], Gu[:, 0]
            final = None if final is None else final[:, 0]
        return Measurement(self.times[self.window], self.weights, dtu, Gu, self.cell_volume, 0.0, final)

    def adjoint(self, m: Measurement) -> np.ndarray:
        """F* with respect to the measurement norm and the grid L² norm on f."""
        dtu = np.asarray(m.dtu, dtype=float)
        single = dtu.ndim == 2
        if single:
            dtu = dtu[..., None]
        Gu = m.Gu.reshape(self.n, -1)
        cols = dtu.shape[2]
        At = self.A.T
        idx = {int(k): i for i, k in enumerate(self.window)}

        def obs(k):  # Pᵀ(w_k a_k)
            out = np.zeros((self.n, cols))
            out[self.mask] = self.weights[idx[k]] * dtu[idx[k]]
            return out

        fbar = np.zeros((self.n, cols))
        lam = At @ Gu
        if self.K in idx:
            o = obs(self.K)
            lam = lam - At @ o
            fbar += self._D(self.K, o)
        for k in range(self.K - 1, -1, -1):
            p = self.stepper.solve_transpose(lam)
            fbar += self.dt * (self.theta * self._D(k + 1, p) + (1 - self.theta) * self._D(k, p))
            lam = self.stepper.apply_explicit_transpose(p)
            if k in idx:
                o = obs(k)
                lam = lam - At @ o
                fbar += self._D(k, o)
        return fbar[:, 0] if single else fbar

    def normal(self, f: np.ndarray) -> np.ndarray:
        return self.adjoint(self.apply(f))


def build_forward_map(
    spec: SourceSpec,
    gamma: float,
    omega: Sequence,
    T0: float,
    grid: TensorGrid | Grid1D,
    b=1.0,
    mu: float | None = None,
    scheme: str = "crank-nicolson",
) -> ForwardMap:
    """Full tensor system when the grid has a y-axis, otherwise the mode system for ``mu``."""
    grid = as_tensor_grid(grid)
    gamma = check_gamma(gamma)
    if grid.has_y:
        A = assemble_full_operator(grid, gamma, b, complete_basis(grid.grid_y))
    else:
        if mu is None:
            raise ValueError("a mode problem needs its frequency mu")
        A = assemble_mode_operator(grid, mu, gamma, b).matrix
    mask = subdomain_indices(grid, list(omega)).interior_mask()
    return ForwardMap(A, grid, spec.R, spec.times, T0, spec.T1, mask, scheme)


def chain_bound_margin(f: np.ndarray, m: Measurement, R0: float) -> float:
    """(2/R₀²)(‖∂_t u(T₁)‖² + ‖G_γ u(T₁)‖²) − ‖f‖²; nonnegative whenever R(T₁,·) ≥ R₀."""
    h = m.cell_volume
    rhs = (2.0 / R0**2) * h * (m.dtu_final @ m.dtu_final + m.Gu @ m.Gu)
    return float(rhs - h * f @ f)


def forward_measurement(
    spec: SourceSpec,
    u0: np.ndarray | None,
    gamma: float,
    omega: Sequence,
    T0: float,
    grid: TensorGrid | Grid1D,
    b=1.0,
    mu: float | None = None,
    noise: float = 0.0,
    seed: int = 0,
    fmap: ForwardMap | None = None,
) -> Measurement:
    """Measurement of spec.f, with the pointwise chain bound asserted on the run.

    ``noise`` is an additive Gaussian level relative to the RMS of each component.
    """
    R0 = spec.R0
    fmap = fmap or build_forward_map(spec, gamma, omega, T0, grid, b, mu)
    m = fmap.apply(spec.f, u0, keep_final=True)
    if R0 > 0:
        margin = chain_bound_margin(spec.f, m, R0)
        scale = m.cell_volume * (spec.f @ spec.f)
        if margin < -1e-10 * max(scale, 1e-300):
            raise StabilityError(f"pointwise chain bound violated by {-margin:.3e}")
    if noise > 0:
        rng = np.random.default_rng(seed)

        def perturb(a):
            rms = np.sqrt(np.mean(a**2)) if a.size else 0.0
            return a + noise * rms * rng.standard_normal(a.shape)

        m = Measurement(m.times, m.weights, perturb(m.dtu), perturb(m.Gu), m.cell_volume, float(noise), m.dtu_final)
    return m


def refined_measurement(
    R_fn: Callable,
    f_fn: Callable,
    grid: TensorGrid,
    gamma: float,
    omega: Sequence,
    T0: float,
    T1: float,
    dt: float,
    u0_fn: Callable | None = None,
    b=1.0,
    mu: float | None = None,
) -> Measurement:
    """Data computed on the 2×-refined grid and time step, sampled back on the coarse layout."""
    grid = as_tensor_grid(grid)
    fine = grid.refined(2)
    spec = SourceSpec.from_functions(fine, R_fn, f_fn, T1, dt / 2)
    u0 = None if u0_fn is None else fine.sample(u0_fn)
    fmap = build_forward_map(spec, gamma, omega, T0, fine, b, mu)
    m = fmap.apply(spec.f, u0, keep_final=True)
    # coarse interior nodes are the odd interior nodes of the fine grid
    sel = [np.arange(1, g.n_interior, 2) for g in fine.axes]
    pick = np.ix_(*sel)
    full_sel = np.zeros(fine.interior_shape, dtype=bool)
    full_sel[pick] = True
    full_sel = full_sel.ravel()
    coarse_mask = subdomain_indices(grid, list(omega)).interior_mask()
    fine_obs = fmap.mask
    # restrict window rows (every other time node) and observed columns
    obs_fine_idx = np.flatnonzero(fine_obs)
    keep_cols = np.isin(obs_fine_idx, np.flatnonzero(full_sel))
    dtu = m.dtu[:, keep_cols]
    t_keep = np.isclose(np.mod(np.round((m.times - m.times[0]) / (dt / 2)), 2), 0)
    times = m.times[t_keep]
    dtu = dtu[t_keep]
    if dtu.shape[1] != coarse_mask.sum():
        raise ValueError("observation sets of the coarse and refined grids do not match")
    w = np.full(times.size, dt)
    w[[0, -1]] = 0.5 * dt
    return Measurement(times, w, dtu, m.Gu[full_sel], grid.cell_volume, 0.0, m.dtu_final[full_sel])


# --- reconstruction -------------------------------------------------------------


@dataclass(frozen=True)
class ReconstructionResult:
    f_hat: np.ndarray
    rel_error: float | None
    lam_reg: float
    iterations: int
    ratio: float | None
    history: list = field(default_factory=list, repr=False)


def lipschitz_ratio(f: np.ndarray, m: Measurement) -> float | None:
    """‖f‖² / (∫∫_{window×ω}|∂_t u|² + ‖G_γ u(T₁)‖²); None for f = 0."""
    num = m.cell_volume * float(np.dot(f, f))
    if num == 0:
        return None
    den = m.norm_sq
    if den == 0:
        raise StabilityError("nonzero source with zero measurement")
    return num / den


def reconstruct_source(
    measurement: Measurement,
    fmap: ForwardMap,
    u0: np.ndarray | None = None,
    lam_reg: float = 1e-10,
    f_true: np.ndarray | None = None,
    rtol: float = 1e-12,
    maxiter: int = 5000,
) -> ReconstructionResult:
    """Tikhonov solution of F f = m − F(0, u0) by CG on F*F + λ_reg."""
    data = measurement
    if u0 is not None and np.any(u0):
        data = measurement - fmap.apply(np.zeros(fmap.n), u0)
    rhs = fmap.adjoint(data)
    n = fmap.n
    history: list[float] = []
    if not np.any(rhs):
        f_hat = np.zeros(n)
        it = 0
    else:
        op = LinearOperator((n, n), matvec=lambda v: fmap.normal(v) + lam_reg * v, dtype=float)
        bnorm = np.linalg.norm(rhs)

        def cb(xk):
            history.append(float(np.linalg.norm(op.matvec(xk) - rhs) / bnorm))

        f_hat, info = cg(op, rhs, rtol=rtol, atol=0.0, maxiter=maxiter, callback=cb)
        it = len(history)
        if info != 0:
            tail = history[-50:]
            if len(tail) < 2 or tail[-1] > 0.5 * tail[0]:
                raise ReconstructionError(
                    f"CG stagnated after {it} iterations at relative residual {history[-1]:.2e}", history
                )
    err = None
    if f_true is not None and np.any(f_true):
        err = float(np.linalg.norm(f_hat - f_true) / np.linalg.norm(f_true))
    ratio = lipschitz_ratio(f_true, measurement) if f_true is not None and np.any(f_true) else None
    return ReconstructionResult(f_hat, err, float(lam_reg), it, ratio, history)


# --- uniform mode study ------------------------------------------------------------


@dataclass(frozen=True)
class ModeRatio:
    n: int
    mu: float
    sup_joint: float  # sup over (f, u0) of the ratio
    max_random: float  # max over random f with u0 = 0


@dataclass(frozen=True)
class ModeRatioTable:
    rows: list
    gamma: float
    T0: float
    T1: float

    @property
    def n(self) -> np.ndarray:
        return np.array([r.n for r in self.rows])

    @property
    def mu(self) -> np.ndarray:
        return np.array([r.mu for r in self.rows])

    @property
    def sup_joint(self) -> np.ndarray:
        return np.array([r.sup_joint for r in self.rows])

    @property
    def max_random(self) -> np.ndarray:
        return np.array([r.max_random for r in self.rows])


def _weighted_rows(m: Measurement) -> np.ndarray:
    """Stack √(h w_k)·∂_t u and √h·G_γ u into one matrix with Euclidean norm = measurement norm."""
    h = m.cell_volume
    d = np.sqrt(h * m.weights)[:, None, None] * m.dtu
    return np.vstack([d.reshape(-1, m.dtu.shape[-1]), np.sqrt(h) * m.Gu])


def mode_ratio(fmap: ForwardMap, n_random: int = 20, seed: int = 0, reg: float = DEFAULT_U0_REG) -> tuple[float, float]:
    """(sup over (f, u0), max over random f at u0 = 0) of ‖f‖²/‖F(f, u0)‖².

    The joint supremum is h/σ_min(S)², S the part of the f-response orthogonal
    to the (relaxed) u0-response.  Initial states that cancel the source almost
    exactly have exponentially large norm and their cancellation cannot be
    resolved in double precision, so u0 is charged reg·‖E‖²‖u0‖² on top of its
    measurement, as in the relaxed observability constant.
    """
    n = fmap.n
    F = _weighted_rows(fmap.apply(np.eye(n)))
    E = _weighted_rows(fmap.apply(np.zeros((n, n)), np.eye(n)))
    pen = np.sqrt(reg) * np.linalg.norm(E, 2) * np.eye(n)
    top = np.hstack([E, F])
    bottom = np.hstack([pen, np.zeros((n, n))])
    R = np.linalg.qr(np.vstack([top, bottom]), mode="r")
    S = R[n:, n:]
    smin = np.linalg.svd(S, compute_uv=False)[-1]
    h = fmap.cell_volume
    joint = np.inf if smin == 0 else h / smin**2
    rng = np.random.default_rng(seed)
    fs = rng.standard_normal((n, n_random))
    Ff = F @ fs
    rnd = h * np.sum(fs**2, axis=0) / np.sum(Ff**2, axis=0)
    return float(joint), float(rnd.max())


def uniform_mode_ratio_study(
    gamma: float,
    x_interval: tuple[float, float],
    omega1: tuple[float, float],
    R_fn: Callable,
    T0: float,
    T1: float,
    mus: Sequence[float],
    N: int = 81,
    dt: float | None = None,
    n_random: int = 20,
    seed: int = 0,
    b=1.0,
    workers: int | None = None,
    scheme: str = "backward-euler",
) -> ModeRatioTable:
    """Per-mode stability ratios over a list of frequencies.

    Backward Euler by default: Crank-Nicolson leaves stiff components undamped
    (amplification → −1), and initial states exploiting them inflate the joint
    supremum with n regardless of γ.
    """
    gx = as_tensor_grid(Grid1D(*x_interval, N))
    dt = T1 / 200 if dt is None else dt
    spec = SourceSpec.from_functions(gx, R_fn, None, T1, dt)
    validate_source_spec(spec, T0)

    def one(args):
        i, mu = args
        fmap = build_forward_map(spec, gamma, [omega1], T0, gx, b, mu, scheme)
        joint, rnd = mode_ratio(fmap, n_random, seed + i)
        return ModeRatio(i + 1, float(mu), joint, rnd)

    rows = parallel_map(one, list(enumerate(mus)), workers)
    return ModeRatioTable(rows, float(gamma), float(T0), float(T1))


# --- small-variation threshold --------------------------------------------------------


@dataclass(frozen=True)
class VariationThreshold:
    T0: float
    ratios: np.ndarray  # scanned V/R₀
    constants: np.ndarray  # sup over f of ‖f‖²/‖F f‖² at each ratio
    eta_hat: float  # largest scanned V/R₀ whose constant stays within the allowed growth


def source_constant(fmap: ForwardMap) -> float:
    """sup_f ‖f‖²/‖F f‖² at u0 = 0, from the smallest singular value of the assembled map."""
    F = _weighted_rows(fmap.apply(np.eye(fmap.n)))
    smin = np.linalg.svd(F, compute_uv=False)[-1]
    return np.inf if smin == 0 else float(fmap.cell_volume / smin**2)


def variation_threshold_study(
    gamma: float,
    grid: TensorGrid,
    omega: Sequence,
    T1: float,
    T0_list: Sequence[float],
    slopes: Sequence[float],
    dt: float,
    shape: Callable | None = None,
    growth: float = 10.0,
    b=1.0,
) -> list[VariationThreshold]:
    """Empirical stand-in for the smallness constant η(T₀).

    R_s(t, x) = 1 + s (t − T₁) φ(x) keeps R₀ = 1 while V grows linearly in s.
    For each T₀ the source constant is tracked along ``slopes``; η̂ is the largest
    V/R₀ before it exceeds ``growth`` times its value at s = 0 (0 if the first
    nonzero slope already does).
    """
    grid = as_tensor_grid(grid)
    phi = (lambda x: 1 + 0 * x) if shape is None else shape
    slopes = np.concatenate([[0.0], np.sort(np.asarray([s for s in slopes if s > 0], dtype=float))])
    specs = [SourceSpec.from_functions(grid, lambda t, x, s=s: 1 + s * (t - T1) * phi(x), None, T1, dt) for s in slopes]
    out = []
    for T0 in T0_list:
        ratios, consts = [], []
        for spec in specs:
            R0 = spec.R0
            if not R0 > 0:
                raise HypothesisError(f"R(T₁, ·) must stay positive, min is {R0:g}")
            ratios.append(spec.variation(T0) / R0)
            consts.append(source_constant(build_forward_map(spec, gamma, omega, T0, grid, b, scheme="backward-euler")))
        consts = np.array(consts)
        ok = consts <= growth * consts[0]
        bad = np.flatnonzero(~ok)
        stop = bad[0] if bad.size else len(ok)
        out.append(VariationThreshold(float(T0), np.array(ratios), consts, float(ratios[stop - 1])))
    return out
