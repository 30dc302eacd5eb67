"""Implicit time stepping for u' + Au = g, the ∂_t u system, and the Duhamel dissipation check."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.integrate import trapezoid
from scipy.sparse.linalg import splu

from .domain import TensorGrid, as_tensor_grid
from .operators import ModeOperator

SCHEMES = ("backward-euler", "crank-nicolson")
_ALIASES = {"be": "backward-euler", "cn": "crank-nicolson"}


class SolverError(RuntimeError):
    pass


def normalize_scheme(scheme: str) -> str:
    s = _ALIASES.get(scheme.lower(), scheme.lower())
    if s not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    return s


def time_nodes(T: float, dt: float, t0: float = 0.0) -> np.ndarray:
    if not dt > 0 or not T > t0:
        raise ValueError(f"need dt > 0 and T > t0, got dt={dt}, T={T}, t0={t0}")
    K = int(round((T - t0) / dt))
    if K < 1 or abs(K * dt - (T - t0)) > 1e-9 * max(1.0, T - t0):
        raise ValueError(f"horizon {T - t0} is not an integer multiple of dt={dt}")
    t = t0 + dt * np.arange(K + 1)
    t[-1] = T
    return t


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # shape (K+1, n)
    scheme: str
    grid: TensorGrid | None = None
    label: str = ""

    def __post_init__(self):
        if self.states.shape[0] != self.times.size:
            raise ValueError("one state per time node is required")
        if not np.all(np.isfinite(self.states)):
            raise SolverError("trajectory contains NaN or Inf")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def norms_sq(self) -> np.ndarray:
        vol = self.grid.cell_volume if self.grid is not None else 1.0
        return vol * np.einsum("ij,ij->i", self.states, self.states)


@dataclass(frozen=True)
class SourceTerm:
    """g(t_k) as samples on the time nodes, or the separated form R(t,x) f(x,y)."""

    values: np.ndarray | None = None  # (K+1, n)
    R: np.ndarray | None = None  # (K+1, n_x) at interior x-nodes
    f: np.ndarray | None = None  # (n_x * n_y,)
    n_y: int = 1
    fn: Callable[[float], np.ndarray] | None = field(default=None, compare=False)

    @classmethod
    def zero(cls) -> "SourceTerm":
        return cls()

    @classmethod
    def sampled(cls, values: np.ndarray) -> "SourceTerm":
        return cls(values=np.asarray(values, dtype=float))

    @classmethod
    def separated(cls, R: np.ndarray, f: np.ndarray, n_y: int = 1) -> "SourceTerm":
        R = np.atleast_2d(np.asarray(R, dtype=float))
        f = np.asarray(f, dtype=float).ravel()
        if f.size != R.shape[1] * n_y:
            raise ValueError("f does not match R's x-size times n_y")
        return cls(R=R, f=f, n_y=int(n_y))

    @classmethod
    def from_callable(cls, fn: Callable[[float], np.ndarray]) -> "SourceTerm":
        return cls(fn=fn)

    @property
    def is_zero(self) -> bool:
        return self.values is None and self.R is None and self.fn is None

    def check_nodes(self, times: np.ndarray) -> None:
        for arr in (self.values, self.R):
            if arr is not None and arr.shape[0] != times.size:
                raise ValueError(f"source has {arr.shape[0]} time samples, trajectory has {times.size}")

    def at(self, k: int, t: float, n: int) -> np.ndarray:
        if self.values is not None:
            return self.values[k]
        if self.R is not None:
            return (self.R[k][:, None] * self.f.reshape(-1, self.n_y)).ravel()
        if self.fn is not None:
            return np.broadcast_to(np.asarray(self.fn(t), dtype=float), (n,))
        return np.zeros(n)

    def sample(self, times: np.ndarray, n: int) -> np.ndarray:
        self.check_nodes(times)
        return np.array([self.at(k, t, n) for k, t in enumerate(times)])


class Stepper:
    """One implicit step of u' + Au = g with a cached sparse LU factorization."""

    def __init__(self, A, dt: float, scheme: str = "crank-nicolson"):
        self.scheme = normalize_scheme(scheme)
        self.dt = float(dt)
        A = sp.csc_matrix(A) if sp.issparse(A) else sp.csc_matrix(np.asarray(A))
        self.A = A
        n = A.shape[0]
        I = sp.identity(n, format="csc")
        theta = 1.0 if self.scheme == "backward-euler" else 0.5
        self.theta = theta
        try:
            self._lu = splu(sp.csc_matrix(I + theta * self.dt * A))
        except RuntimeError as exc:  # singular factor
            raise SolverError(f"implicit step matrix could not be factorized: {exc}") from exc
        self._explicit = None if theta == 1.0 else sp.csr_matrix(I - (1 - theta) * self.dt * A)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(rhs)

    def solve_transpose(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(rhs, trans="T")

    def rhs(self, u: np.ndarray, g_prev: np.ndarray | None, g_next: np.ndarray | None) -> np.ndarray:
        r = u.copy() if self._explicit is None else self._explicit @ u
        if self.theta == 1.0:
            if g_next is not None:
                r = r + self.dt * g_next
        else:
            if g_prev is not None:
                r = r + 0.5 * self.dt * g_prev
            if g_next is not None:
                r = r + 0.5 * self.dt * g_next
        return r

    def step(self, u: np.ndarray, g_prev: np.ndarray | None = None, g_next: np.ndarray | None = None) -> np.ndarray:
        out = self.solve(self.rhs(u, g_prev, g_next))
        if not np.all(np.isfinite(out)):
            raise SolverError("linear solve produced non-finite values")
        return out

    def apply_explicit(self, u: np.ndarray) -> np.ndarray:
        return u if self._explicit is None else self._explicit @ u

    def apply_explicit_transpose(self, u: np.ndarray) -> np.ndarray:
        return u if self._explicit is None else self._explicit.T @ u


def integrate(
    A,
    u0: np.ndarray,
    g: SourceTerm | None,
    T: float,
    dt: float,
    scheme: str = "crank-nicolson",
    t0: float = 0.0,
    grid: TensorGrid | None = None,
    label: str = "",
) -> Trajectory:
    times = time_nodes(T, dt, t0)
    stepper = Stepper(A, dt, scheme)
    u = np.asarray(u0, dtype=float).ravel().copy()
    if u.size != stepper.n:
        raise ValueError(f"initial state has size {u.size}, operator has {stepper.n}")
    g = g or SourceTerm.zero()
    g.check_nodes(times)
    out = np.empty((times.size, u.size))
    out[0] = u
    g_prev = None if g.is_zero else g.at(0, times[0], u.size)
    for k in range(1, times.size):
        g_next = None if g.is_zero else g.at(k, times[k], u.size)
        u = stepper.step(u, g_prev, g_next)
        out[k] = u
        g_prev = g_next
    return Trajectory(times, out, stepper.scheme, grid, label)


def solve_mode(
    op: ModeOperator,
    u0_n: np.ndarray,
    g_n: SourceTerm | None,
    T: float,
    dt: float,
    scheme: str = "crank-nicolson",
    t0: float = 0.0,
) -> Trajectory:
    return integrate(op.matrix, u0_n, g_n, T, dt, scheme, t0, op.grid_x, f"mode mu={op.mu:g}")


def solve_full(
    G,
    grid: TensorGrid,
    u0: np.ndarray,
    g: SourceTerm | None,
    T: float,
    dt: float,
    scheme: str = "crank-nicolson",
    t0: float = 0.0,
) -> Trajectory:
    return integrate(G, u0, g, T, dt, scheme, t0, as_tensor_grid(grid), "full")


def time_derivative_trajectory(traj: Trajectory, g: SourceTerm | None, A) -> Trajectory:
    """v_k = -A u_k + g(t_k); at k = 0 this is the initial datum of the ∂_t u system."""
    n = traj.states.shape[1]
    gs = (g or SourceTerm.zero()).sample(traj.times, n)
    v = -(A @ traj.states.T).T + gs
    return Trajectory(traj.times, np.asarray(v), traj.scheme, traj.grid, "dt " + traj.label)


@dataclass(frozen=True)
class DerivativeCheck:
    residual: float  # max_k ‖v_identity − v_resolved‖ in the grid norm
    initial_defect: float  # ‖v(0) + A u0 − g(0)‖


def derivative_residual(traj: Trajectory, g: SourceTerm | None, dg: SourceTerm | None, A) -> DerivativeCheck:
    """Compare v = -Au + g with a fresh solve of v' + Av = ∂_t g, v(0) = -Au0 + g(0)."""
    v = time_derivative_trajectory(traj, g, A)
    n = traj.states.shape[1]
    g0 = (g or SourceTerm.zero()).at(0, traj.times[0], n)
    v0 = -(A @ traj.states[0]) + g0
    resolved = integrate(A, v0, dg, traj.T, traj.dt, traj.scheme, traj.times[0], traj.grid)
    vol = traj.grid.cell_volume if traj.grid is not None else 1.0
    diff = v.states - resolved.states
    res = np.sqrt(vol * np.max(np.einsum("ij,ij->i", diff, diff)))
    init = np.sqrt(vol) * np.linalg.norm(v.states[0] + A @ traj.states[0] - g0)
    return DerivativeCheck(float(res), float(init))


def time_integral(times: np.ndarray, values: np.ndarray, lo: float, hi: float) -> float:
    """Trapezoid integral over [lo, hi] of the piecewise-linear interpolant of ``values``."""
    lo, hi = max(lo, times[0]), min(hi, times[-1])
    if hi <= lo:
        return 0.0
    inside = (times > lo) & (times < hi)
    t = np.concatenate([[lo], times[inside], [hi]])
    y = np.interp(t, times, values)
    return float(trapezoid(y, t))


@dataclass(frozen=True)
class DissipationReport:
    margin: float
    lhs: float  # ‖u(T)‖²
    rhs: float


def dissipation_check(traj: Trajectory, lam: float, g: SourceTerm | None = None) -> DissipationReport:
    """Margin of ‖u(T)‖² ≤ (6/T) e^{-2λT/3} ∫_{T/3}^{2T/3}‖u‖² + ‖g‖²_{L²(0,T)}/λ."""
    t0, T = traj.times[0], traj.T
    L = T - t0
    nrm = traj.norms_sq()
    window = time_integral(traj.times, nrm, t0 + L / 3, t0 + 2 * L / 3)
    g_norm = 0.0
    if g is not None and not g.is_zero:
        gs = g.sample(traj.times, traj.states.shape[1])
        vol = traj.grid.cell_volume if traj.grid is not None else 1.0
        g_norm = float(trapezoid(vol * np.einsum("ij,ij->i", gs, gs), traj.times))
    rhs = (6.0 / L) * np.exp(-2.0 * lam * L / 3.0) * window + g_norm / lam
    lhs = float(nrm[-1])
    return DissipationReport(float(rhs - lhs), lhs, float(rhs))
