"""Carleman weight construction, its pointwise inequalities, and the weighted estimate.

The weight is β = e^{2λ‖ψ‖∞} − e^{λψ} and α = β/((t−T₀)(T₁−t)).  For realistic λ
both exponentials overflow and, worse, β loses every spatial variation to
rounding.  Everything here is therefore carried in log space, splitting

    Mα = (M/θ)·β_min + (M/θ)·(e^{λ‖ψ‖} − e^{λψ}),   θ = (t−T₀)(T₁−t),

so that the two pieces can be normalised separately before exponentiating.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .domain import DomainError, Grid1D, IndexSet, TensorGrid, as_tensor_grid, subdomain_indices
from .evolution import Trajectory
from .operators import ModeOperator, check_gamma


class WeightError(ValueError):
    """ψ or the calibrated weight violates a required property."""


# --- signed log arithmetic -------------------------------------------------


@dataclass(frozen=True)
class SignedLog:
    """x = sign · exp(log) elementwise; sign 0 encodes an exact zero."""

    sign: np.ndarray
    log: np.ndarray

    @classmethod
    def from_float(cls, x) -> "SignedLog":
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return cls(np.sign(x), np.log(np.abs(x)))

    @classmethod
    def from_parts(cls, sign, log) -> "SignedLog":
        sign = np.asarray(sign, dtype=float)
        log = np.where(sign == 0, -np.inf, np.asarray(log, dtype=float))
        return cls(sign, log)

    def __sub__(self, other: "SignedLog") -> "SignedLog":
        return self + SignedLog(-other.sign, other.log)

    def __add__(self, other: "SignedLog") -> "SignedLog":
        s1, l1 = np.broadcast_arrays(self.sign, self.log)
        s2, l2 = np.broadcast_arrays(other.sign, other.log)
        big = l1 >= l2
        sb, lb = np.where(big, s1, s2), np.where(big, l1, l2)
        ss, ls = np.where(big, s2, s1), np.where(big, l2, l1)
        with np.errstate(invalid="ignore", divide="ignore"):
            d = np.where(ss == 0, -np.inf, ls - lb)
            same = sb * ss >= 0
            mag = np.where(same, np.logaddexp(0.0, d), np.log1p(-np.minimum(np.exp(d), 1.0)))
        sign = np.where(sb == 0, ss, sb)
        log = lb + mag
        sign = np.where(np.isneginf(log), 0.0, sign)
        return SignedLog(sign, log)

    def min(self) -> tuple[float, float]:
        """(sign, log|x|) of the smallest element."""
        s, l = np.ravel(self.sign), np.ravel(self.log)
        key = np.where(s > 0, l, np.where(s < 0, np.inf, -np.inf))
        neg = s < 0
        if neg.any():
            i = np.flatnonzero(neg)[np.argmax(l[neg])]
            return -1.0, float(l[i])
        if (s == 0).any():
            return 0.0, -np.inf
        i = int(np.argmin(key))
        return 1.0, float(l[i])

    def to_float(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return self.sign * np.exp(self.log)

    def nonnegative(self) -> np.ndarray:
        return self.sign >= 0


def log_expm1(z: np.ndarray) -> np.ndarray:
    """log(e^z − 1) for z > 0 without overflow."""
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(z > 30.0, z + np.log1p(-np.exp(-np.minimum(z, 700.0))), np.log(np.expm1(np.minimum(z, 30.0))))


# --- ψ ----------------------------------------------------------------------


class Profile1D:
    """A positive bump on (a, b) vanishing at both ends with one critical point."""

    a: float
    b: float

    def evaluate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        raise NotImplementedError

    @property
    def vertex(self) -> float:
        raise NotImplementedError


@dataclass(frozen=True)
class SkewedParabola(Profile1D):
    """ψ = ((b−a)²/4)(1 − s²) with s = (e^{κx} − e^{κv})/(e^{κb} − e^{κv}).

    κ is fixed by s(a) = −1, which puts the single critical point at x = v.
    κ = 0 is the plain parabola (x − a)(b − x).
    """

    a: float
    b: float
    v: float
    kappa: float

    @classmethod
    def with_vertex(cls, a: float, b: float, v: float) -> "SkewedParabola":
        if not a < v < b:
            raise WeightError(f"vertex {v} must lie inside ({a}, {b})")
        mid = 0.5 * (a + b)
        L = b - a
        if abs(v - mid) <= 1e-12 * L:
            return cls(a, b, v, 0.0)

        def gap(k):  # centre of e^{κx}: log-mean of the endpoint exponentials
            return np.logaddexp(k * a, k * b) - np.log(2.0) - k * v

        # gap(k)/k → mid − v as k → 0 and → b − v (or a − v) as k → ±∞
        # gap < 0 for small |κ| of the right sign and > 0 for large |κ|
        sgn = 1.0 if v > mid else -1.0
        hi = sgn / L
        while gap(hi) <= 0:
            hi *= 2.0
            if abs(hi) > 1e6 / L:
                raise WeightError(f"vertex {v} too close to the boundary of ({a}, {b})")
        lo = hi / 2.0
        while gap(lo) >= 0:
            lo /= 2.0
        k = brentq(gap, min(lo, hi), max(lo, hi), xtol=1e-14 / L, rtol=1e-14)
        return cls(a, b, v, float(k))

    @property
    def vertex(self) -> float:
        return self.v

    @property
    def scale(self) -> float:
        return 0.25 * (self.b - self.a) ** 2

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        k, c = self.kappa, self.scale
        if k == 0.0:
            s = (2 * x - self.a - self.b) / (self.b - self.a)
            s1 = np.full_like(x, 2.0 / (self.b - self.a))
            s2 = np.zeros_like(x)
        else:
            # shift exponents by κ·max(a, b) range end to stay finite
            ref = max(k * self.a, k * self.b)
            den = np.exp(k * self.b - ref) - np.exp(k * self.v - ref)
            s = (np.exp(k * x - ref) - np.exp(k * self.v - ref)) / den
            s1 = k * np.exp(k * x - ref) / den
            s2 = k * s1
        psi = c * (1.0 - s**2)
        return psi, -2.0 * c * s * s1, -2.0 * c * (s1**2 + s * s2)


@dataclass(frozen=True)
class ExplicitProfile(Profile1D):
    a: float
    b: float
    f: Callable = field(compare=False)
    df: Callable = field(compare=False)
    d2f: Callable = field(compare=False)

    @property
    def vertex(self) -> float:
        x = np.linspace(self.a, self.b, 4097)[1:-1]
        return float(x[np.argmax(self.f(x))])

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        return (
            np.broadcast_to(self.f(x), x.shape).astype(float),
            np.broadcast_to(self.df(x), x.shape).astype(float),
            np.broadcast_to(self.d2f(x), x.shape).astype(float),
        )


def _critical_points(profile: Profile1D, grid: Grid1D) -> list[float]:
    x = grid.nodes
    _, d1, _ = profile.evaluate(x)
    pts = [float(xi) for xi, di in zip(x, d1) if di == 0.0]
    s = np.sign(d1)
    for i in np.flatnonzero(s[:-1] * s[1:] < 0):
        pts.append(float(x[i] - d1[i] * (x[i + 1] - x[i]) / (d1[i + 1] - d1[i])))
    return sorted(pts)


@dataclass(frozen=True)
class PsiFunction:
    grid_x: TensorGrid
    omega_tilde: IndexSet
    profiles: tuple[Profile1D, ...]
    values: np.ndarray = field(repr=False)  # ψ on all nodes, x-major
    grad: np.ndarray = field(repr=False)  # (d, n_nodes)
    hess: np.ndarray = field(repr=False)  # (d, d, n_nodes)
    outside: np.ndarray = field(repr=False)  # node mask of Ω̄₁ ∖ ω̃₁ used for the margins
    m_lower: float
    m_upper: float

    @property
    def sup(self) -> float:
        """‖ψ‖∞ from the profiles (attained at the vertex)."""
        vals = [p.evaluate(np.array([p.vertex]))[0][0] for p in self.profiles]
        return float(np.prod(vals))

    @property
    def dim(self) -> int:
        return len(self.profiles)

    def evaluate(self, points: Sequence[np.ndarray]):
        """ψ, ∇ψ (d, ...), D²ψ (d, d, ...) at arbitrary points (one array per axis)."""
        return _evaluate_product(self.profiles, points)


def _evaluate_product(profiles: Sequence[Profile1D], points: Sequence[np.ndarray]):
    parts = [p.evaluate(np.asarray(x)) for p, x in zip(profiles, points)]
    f = [q[0] for q in parts]
    d1 = [q[1] for q in parts]
    d2 = [q[2] for q in parts]
    d = len(parts)
    shape = np.broadcast_shapes(*[np.shape(x) for x in points])

    def prod_except(skip):
        out = np.ones(shape)
        for j in range(d):
            if j not in skip:
                out = out * f[j]
        return out

    psi = prod_except(())
    grad = np.array([d1[i] * prod_except((i,)) for i in range(d)])
    hess = np.empty((d, d) + shape)
    for i in range(d):
        for j in range(d):
            hess[i, j] = d2[i] * prod_except((i,)) if i == j else d1[i] * d1[j] * prod_except((i, j))
    return psi, grad, hess


def construct_psi(
    grid_x: Grid1D | TensorGrid,
    omega_tilde: Sequence,
    profiles: Sequence[Profile1D] | Profile1D | None = None,
) -> PsiFunction:
    """Positive bump vanishing on ∂Ω₁ with its only critical point inside ω̃₁.

    The default profile per axis is a skewed parabola whose vertex is the centre
    of ω̃₁ on that axis; on a rectangle the axis profiles are multiplied.
    """
    g = as_tensor_grid(grid_x)
    if g.has_y:
        raise ValueError("ψ lives on the x-grid")
    ot = subdomain_indices(g, omega_tilde)
    box = ot.box
    for (lo, hi), ax in zip(box, g.axes):
        if not (ax.a < lo and hi < ax.b):
            raise DomainError("ω̃₁ must lie strictly inside Ω₁")
    if profiles is None:
        profiles = tuple(SkewedParabola.with_vertex(ax.a, ax.b, 0.5 * (lo + hi)) for ax, (lo, hi) in zip(g.axes, box))
    elif isinstance(profiles, Profile1D):
        profiles = (profiles,)
    profiles = tuple(profiles)
    if len(profiles) != g.ndim:
        raise ValueError("one profile per x-axis is required")
    for p, ax, (lo, hi) in zip(profiles, g.axes, box):
        if abs(p.a - ax.a) > 1e-12 or abs(p.b - ax.b) > 1e-12:
            raise WeightError("profile interval differs from the grid axis")
        for c in _critical_points(p, ax):
            if not lo < c < hi:
                raise WeightError(f"critical point {c:.6g} of ψ lies outside ω̃₁ = ({lo}, {hi})")

    mesh = g.mesh(interior=False)
    psi, grad, hess = _evaluate_product(profiles, mesh)
    psi = psi.ravel()
    grad = grad.reshape(g.ndim, -1)
    hess = hess.reshape(g.ndim, g.ndim, -1)
    # boundary values are exactly zero by construction
    bmask = np.zeros(g.shape, dtype=bool)
    for d in range(g.ndim):
        idx = [slice(None)] * g.ndim
        idx[d] = [0, -1]
        bmask[tuple(idx)] = True
    psi = np.where(bmask.ravel(), 0.0, psi)
    if np.any(psi[~bmask.ravel()] <= 0):
        raise WeightError("ψ must be positive at interior nodes")

    outside = ~ot.node_mask()
    if g.ndim > 1:
        corners = np.zeros(g.shape, dtype=bool)
        idx = np.ix_(*[[0, ax.N - 1] for ax in g.axes])
        corners[idx] = True
        outside &= ~corners.ravel()
    gnorm = np.sqrt(np.sum(grad**2, axis=0))
    lap = np.trace(hess)
    hnorm = np.linalg.norm(np.moveaxis(hess, -1, 0), ord=2, axis=(1, 2))
    m_lower = float(gnorm[outside].min())
    m_upper = float(np.max(np.maximum.reduce([gnorm[outside], np.abs(lap[outside]), hnorm[outside]])))
    if m_lower <= 0:
        raise WeightError("∇ψ vanishes outside ω̃₁")
    for arr in (psi, grad, hess):
        arr.setflags(write=False)
    return PsiFunction(g, ot, profiles, psi, grad, hess, outside, m_lower, m_upper)


# --- the weight ------------------------------------------------------------


@dataclass(frozen=True)
class CarlemanWeight:
    """β = e^{2λ‖ψ‖∞} − e^{λψ} with constants C₁, C₃ kept as logarithms."""

    psi: PsiFunction
    a: float
    lam: float
    log_C1: float
    log_C3: float
    mode: str

    @property
    def C1(self) -> float:
        return float(np.exp(self.log_C1))

    @property
    def C3(self) -> float:
        return float(np.exp(self.log_C3))

    def log_beta(self, psi_values: np.ndarray) -> np.ndarray:
        P = self.psi.sup
        return 2 * self.lam * P + np.log1p(-np.exp(self.lam * (np.asarray(psi_values) - 2 * P)))

    @property
    def log_beta_min(self) -> float:
        """log of min β = e^{2λP} − e^{λP} (the lower positivity bound)."""
        return float(self.log_beta(self.psi.sup))

    def log_beta_bounds(self, omega1: Sequence | IndexSet) -> tuple[float, float]:
        """(log β_*, log β^*): min of β over ω₁ and max over Ω̄₁."""
        om = omega1 if isinstance(omega1, IndexSet) else subdomain_indices(self.psi.grid_x, omega1)
        lb = self.log_beta(self.psi.values)
        return float(lb[om.indices].min()), float(lb.max())

    def beta(self, psi_values: np.ndarray) -> np.ndarray:
        """Linear-scale β; only meaningful for modest λ."""
        P = self.psi.sup
        return np.exp(2 * self.lam * P) - np.exp(self.lam * np.asarray(psi_values))


def _closed_form_lambda(m_lo: float, m_up: float, a: float) -> float:
    return max(2 * (a + 1) * m_up / ((a - 1) * m_lo**2), 2 * (a + 1) * m_up**3 / ((3 - a) * m_lo**4))


def _reduced_forms(psi: PsiFunction, lam: float, a: float):
    """Interior/boundary quantities with the exponential factors stripped.

    q2: min eigenvalue of (a−1)(λ²|∇ψ|²+λΔψ)I + 2(λ²∇ψ∇ψᵀ + λD²ψ); form (ii) = e^{λψ}·q2.
    q3: (a−1)Δβ|∇β|² − 2D²β(∇β,∇β) divided by e^{3λψ}.
    """
    g, H = psi.grad, psi.hess
    gn2 = np.sum(g**2, axis=0)
    lap = np.trace(H)
    d = psi.dim
    base = (a - 1) * (lam**2 * gn2 + lam * lap)
    if d == 1:
        q2 = base + 2 * (lam**2 * gn2 + lam * H[0, 0])
    else:
        Q = 2 * (lam**2 * np.einsum("in,jn->ijn", g, g) + lam * H)
        Q = Q + base[None, None, :] * np.eye(d)[:, :, None]
        q2 = np.linalg.eigvalsh(np.moveaxis(Q, -1, 0))[:, 0]
    hgg = np.einsum("in,ijn,jn->n", g, H, g)
    q3 = -(a - 1) * (lam**2 * gn2 + lam * lap) * lam**2 * gn2 + 2 * lam**2 * (lam**2 * gn2**2 + lam * hgg)
    return q2, q3


def _boundary_pairs(grid: TensorGrid):
    """(boundary node, inward neighbour, spacing) along each axis; corners skipped."""
    shape = grid.shape
    pairs_b, pairs_n, hs = [], [], []
    ids = np.arange(int(np.prod(shape))).reshape(shape)
    for d, ax in enumerate(grid.axes):
        for end, nb in ((0, 1), (ax.N - 1, ax.N - 2)):
            sl = [slice(1, -1)] * grid.ndim
            sl[d] = end
            sn = list(sl)
            sn[d] = nb
            pairs_b.append(ids[tuple(sl)].ravel())
            pairs_n.append(ids[tuple(sn)].ravel())
            hs.append(np.full(pairs_b[-1].size, ax.h))
    return np.concatenate(pairs_b), np.concatenate(pairs_n), np.concatenate(hs)


@dataclass(frozen=True)
class WeightMargins:
    boundary: SignedLog  # ∂β/∂ν at boundary nodes (one-sided differences)
    interior: SignedLog  # form (ii) − C₁ at nodes outside ω̃₁
    gradient: SignedLog  # form (iii) − C₃ at nodes outside ω̃₁
    interior_nodes: np.ndarray
    boundary_nodes: np.ndarray

    @property
    def ok(self) -> bool:
        return bool(
            np.all(self.boundary.nonnegative()) and np.all(self.interior.nonnegative()) and np.all(self.gradient.nonnegative())
        )

    def min(self) -> dict:
        out = {}
        for name in ("boundary", "interior", "gradient"):
            s, l = getattr(self, name).min()
            out[name] = {"sign": s, "log_abs": l}
        return out

    def offending(self) -> dict:
        return {
            "boundary": self.boundary_nodes[~self.boundary.nonnegative()].tolist(),
            "interior": self.interior_nodes[~self.interior.nonnegative()].tolist(),
            "gradient": self.interior_nodes[~self.gradient.nonnegative()].tolist(),
        }


def _forms_log(psi: PsiFunction, lam: float, a: float):
    q2, q3 = _reduced_forms(psi, lam, a)
    sel = psi.outside
    lp = lam * psi.values[sel]
    f2 = SignedLog.from_float(q2[sel])
    f2 = SignedLog(f2.sign, f2.log + lp)
    f3 = SignedLog.from_float(q3[sel])
    f3 = SignedLog(f3.sign, f3.log + 3 * lp)
    b, nb, h = _boundary_pairs(psi.grid_x)
    # β(x_b) − β(x_nb) = e^{λψ_nb} − e^{λψ_b}; outward derivative ≈ that / h
    lp_b, lp_nb = lam * psi.values[b], lam * psi.values[nb]
    diff = SignedLog(np.ones_like(lp_nb), lp_nb) - SignedLog(np.ones_like(lp_b), lp_b)
    bd = SignedLog(diff.sign, diff.log - np.log(h))
    return f2, f3, bd, np.flatnonzero(sel), b


def verify_weight_inequalities(weight: CarlemanWeight) -> WeightMargins:
    f2, f3, bd, inner, b = _forms_log(weight.psi, weight.lam, weight.a)
    c1 = SignedLog(np.array(1.0), np.array(weight.log_C1))
    c3 = SignedLog(np.array(1.0), np.array(weight.log_C3))
    return WeightMargins(bd, f2 - c1, f3 - c3, inner, b)


def calibrate_weight(
    psi: PsiFunction, a: float = 2.0, mode: str = "search", safety: float = 1.1, lam_max: float = 1e8
) -> CarlemanWeight:
    """λ, C₁, C₃ either from the closed-form sufficient choice or by a grid search."""
    if not 1.0 < a < 3.0:
        raise ValueError(f"a must lie in (1, 3), got {a}")
    if mode == "closed-form":
        lam = _closed_form_lambda(psi.m_lower, psi.m_upper, a)
        log_C1 = np.log((a - 1) / 2) + 2 * np.log(psi.m_lower) + 2 * np.log(lam)
        log_C3 = np.log((3 - a) / 2) + 4 * np.log(psi.m_lower) + 4 * np.log(lam)
        return CarlemanWeight(psi, float(a), float(lam), float(log_C1), float(log_C3), mode)
    if mode != "search":
        raise ValueError(f"unknown calibration mode {mode!r}")

    def positive(lam):
        f2, f3, bd, _, _ = _forms_log(psi, lam, a)
        return bool(np.all(f2.sign > 0) and np.all(f3.sign > 0) and np.all(bd.sign >= 0))

    hi = 1.0
    while not positive(hi):
        hi *= 2.0
        if hi > lam_max:
            raise WeightError(f"no λ ≤ {lam_max:g} makes the weight inequalities hold on this grid")
    lo = hi / 2.0 if hi > 1.0 else 0.0
    if lo > 0 and positive(lo):
        lo = 0.0
    while hi - lo > 1e-8 * hi:
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if positive(mid) else (mid, hi)
    lam = safety * hi
    f2, f3, *_ = _forms_log(psi, lam, a)
    return CarlemanWeight(psi, float(a), float(lam), float(f2.log.min()), float(f3.log.min()), mode)


# --- the estimate ----------------------------------------------------------


def epsilon_flag(gamma: float) -> int:
    return 1 if check_gamma(gamma) >= 0.5 else 0


def carleman_M(T: float, mu: float, gamma: float, C2: float = 1.0) -> float:
    if T <= 0 or mu < 0:
        raise ValueError("need T > 0 and mu >= 0")
    growth = np.sqrt(mu) if check_gamma(gamma) >= 0.5 else mu ** (2.0 / 3.0)
    return float(C2 * max(T + T**2, growth * T**2))


@dataclass(frozen=True)
class CarlemanParams:
    T0: float
    T1: float
    mu: float
    gamma: float
    C2: float
    M: float
    eps: int

    @property
    def T(self) -> float:
        return self.T1 - self.T0

    def theta(self, t):
        return (np.asarray(t) - self.T0) * (self.T1 - np.asarray(t))

    def dtheta(self, t):
        return self.T1 + self.T0 - 2 * np.asarray(t)


def carleman_params(T0: float, T1: float, mu: float, gamma: float, C2: float = 1.0, M: float | None = None) -> CarlemanParams:
    if not T1 > T0:
        raise ValueError("need T1 > T0")
    Mv = carleman_M(T1 - T0, mu, gamma, C2) if M is None else float(M)
    return CarlemanParams(float(T0), float(T1), float(mu), float(gamma), float(C2), Mv, epsilon_flag(gamma))


def log_weight(weight: CarlemanWeight, params: CarlemanParams, t: np.ndarray, psi_vals: np.ndarray) -> np.ndarray:
    """−Mα(t, x) up to an additive constant (shared by every (t, x)), shape (len(t), len(psi))."""
    t = np.asarray(t, dtype=float)
    th = params.theta(t)
    if np.any(th <= 0):
        raise ValueError("weights are only defined strictly inside (T0, T1)")
    lam, P, M = weight.lam, weight.psi.sup, params.M
    inv = 1.0 / th
    gap = np.maximum(inv - inv.min(), 0.0)
    with np.errstate(divide="ignore", over="ignore"):
        # time part: M β_min (1/θ − 1/θ_max)
        lt = np.log(M) + weight.log_beta_min + np.log(gap)
        time_part = np.exp(lt)
        # space part: (M/θ)(e^{λP} − e^{λψ}) ≥ 0
        ls = np.log(M) + lam * P + np.log(-np.expm1(lam * (np.asarray(psi_vals) - P)))
        space = np.exp(np.log(inv)[:, None] + ls[None, :])
    return -(time_part[:, None] + space)


def log_weight_absolute(weight: CarlemanWeight, params: CarlemanParams, t: np.ndarray, psi_vals: np.ndarray) -> np.ndarray:
    """log of Mα itself (not normalised); used for the endpoint-decay check."""
    lb = weight.log_beta(psi_vals)
    return np.log(params.M) + lb[None, :] - np.log(params.theta(np.asarray(t)))[:, None]


@dataclass(frozen=True)
class RatioResult:
    ratio: float | None  # None for the guarded 0/0 case
    log_lhs: float
    log_rhs: float


def _staggered(grid: TensorGrid, full: np.ndarray):
    """Forward differences along each axis at half-cell points, with their coordinates."""
    out = []
    for d, ax in enumerate(grid.axes):
        diff = np.diff(full, axis=1 + d) / ax.h
        pts = []
        for e, ax2 in enumerate(grid.axes):
            c = ax2.nodes
            if e == d:
                c = 0.5 * (c[1:] + c[:-1])
            pts.append(c)
        mesh = np.meshgrid(*pts, indexing="ij")
        out.append((diff.reshape(full.shape[0], -1), [m.ravel() for m in mesh]))
    return out


def carleman_ratio(
    traj: Trajectory,
    op: ModeOperator,
    weight: CarlemanWeight,
    params: CarlemanParams,
    omega1: Sequence | IndexSet,
    C1: float = 1.0,
) -> RatioResult:
    """LHS/RHS of the weighted estimate for a mode trajectory on [T0, T1].

    Everything is evaluated at time midpoints; 𝒫u = (u^{k+1}−u^k)/dt + A(u^k+u^{k+1})/2.
    """
    g = op.grid_x
    if not np.isclose(traj.times[0], params.T0) or not np.isclose(traj.T, params.T1):
        raise ValueError("trajectory must span exactly [T0, T1]")
    om = omega1 if isinstance(omega1, IndexSet) else subdomain_indices(g, omega1)
    U = traj.states
    dt = np.diff(traj.times)
    tm = 0.5 * (traj.times[1:] + traj.times[:-1])
    umid = 0.5 * (U[1:] + U[:-1])
    Pu = (U[1:] - U[:-1]) / dt[:, None] + (op.matrix @ umid.T).T

    psi_int = g.restrict(weight.psi.values)
    lw = log_weight(weight, params, tm, psi_int)
    th = params.theta(tm)
    lM = np.log(params.M)
    vol = g.cell_volume
    lwt = np.log(dt)[:, None] + np.log(vol)
    with np.errstate(divide="ignore"):
        lu2 = np.log(umid**2)
        lP2 = np.log(Pu**2)
    l3 = (3 * lM - 3 * np.log(th))[:, None]
    zero_term = lw + lwt + l3 + lu2
    lhs_terms = [zero_term.ravel()]
    mask = om.interior_mask()
    rhs_terms = [(lw + lwt + lP2).ravel(), zero_term[:, mask].ravel()]

    full = np.stack([g.embed(u) for u in umid])
    for diff, pts in _staggered(g, full):
        psi_s = weight.psi.evaluate(pts)[0]
        lws = log_weight(weight, params, tm, psi_s)
        with np.errstate(divide="ignore"):
            ld = np.log(diff**2)
        lhs_terms.append((lws + lwt + (lM - np.log(th))[:, None] + ld).ravel())

    log_lhs = float(logsumexp(np.concatenate(lhs_terms))) + np.log(C1)
    log_rhs = float(logsumexp(np.concatenate(rhs_terms)))
    if np.isneginf(log_rhs):
        if np.isneginf(log_lhs):
            return RatioResult(None, log_lhs, log_rhs)
        raise ZeroDivisionError("right-hand side vanishes while the left-hand side does not")
    return RatioResult(float(np.exp(log_lhs - log_rhs)), log_lhs, log_rhs)


def endpoint_log_decay(weight: CarlemanWeight, params: CarlemanParams, dt: float) -> float:
    """max over x of log e^{−Mα} at the first and last interior time nodes."""
    t = np.array([params.T0 + dt, params.T1 - dt])
    lma = log_weight_absolute(weight, params, t, weight.psi.values)
    return float(-np.exp(lma).min())


def calibrate_C1(ratios_at_unit: Sequence[float], safety: float = 0.9) -> float:
    """Largest 𝒞₁ (times ``safety``) for which every sample ratio stays ≤ 1."""
    r = np.asarray([x for x in ratios_at_unit if x is not None], dtype=float)
    if r.size == 0 or not np.all(np.isfinite(r)) or r.max() <= 0:
        raise ValueError("need finite positive sample ratios")
    return float(safety / r.max())


# --- P₁/P₂/P₃ ------------------------------------------------------------------


@dataclass(frozen=True)
class P123:
    P1: np.ndarray
    P2: np.ndarray
    P3: np.ndarray
    target: np.ndarray  # e^{−Mα} 𝒫u
    residual: float  # discrete L² norm of P1+P2+P3 − target
    relative: float


def decompose_P123(
    u: np.ndarray,
    times: np.ndarray,
    op: ModeOperator,
    weight: CarlemanWeight,
    params: CarlemanParams,
) -> P123:
    """Split e^{−Mα}𝒫u through z = u e^{−Mα} (1D x-grids, linear scale).

    ``u`` holds full-node samples of shape (len(times), N).  Second-order central
    differences in t and x are used on both sides; the identity is exact in the
    continuum, so the residual is a pure O(h² + dt²) discretization error.
    Intended for moderate λ and M where e^{−Mα} is representable.
    """
    g = op.grid_x
    if g.ndim != 1:
        raise ValueError("the split is implemented on 1D x-grids")
    ax = g.axes[0]
    x, h = ax.nodes, ax.h
    t = np.asarray(times, dtype=float)
    dt = t[1] - t[0]
    psi, dpsi, d2psi = weight.psi.evaluate([x])
    dpsi, d2psi = dpsi[0], d2psi[0, 0]
    lam, M = weight.lam, params.M
    beta = weight.beta(psi)
    dbeta = -lam * dpsi * np.exp(lam * psi)
    d2beta = -(lam**2 * dpsi**2 + lam * d2psi) * np.exp(lam * psi)
    th = params.theta(t)[:, None]
    alpha = beta[None, :] / th
    alpha_t = -beta[None, :] * params.dtheta(t)[:, None] / th**2
    grad_a = dbeta[None, :] / th
    lap_a = d2beta[None, :] / th
    w = np.exp(-M * alpha)
    z = u * w
    V = np.zeros_like(x)
    V[1:-1] = op.potential  # μ|x|^{2γ}b
    eps = params.eps

    def dxx(f):
        return (f[:, 2:] - 2 * f[:, 1:-1] + f[:, :-2]) / h**2

    def dx(f):
        return (f[:, 2:] - f[:, :-2]) / (2 * h)

    def dtt(f):
        return (f[2:] - f[:-2]) / (2 * dt)

    sx, st = slice(1, -1), slice(1, -1)
    zc = z[st, sx]
    P1 = -dxx(z)[st] + (M * alpha_t[st, sx] - M**2 * grad_a[st, sx] ** 2) * zc + eps * V[sx] * zc
    P2 = dtt(z)[:, sx] - 2 * M * grad_a[st, sx] * dx(z)[st] - weight.a * M * lap_a[st, sx] * zc
    P3 = (weight.a - 1) * M * lap_a[st, sx] * zc + (1 - eps) * V[sx] * zc
    Pu = dtt(u)[:, sx] - dxx(u)[st] + V[sx] * u[st, sx]
    target = w[st, sx] * Pu
    diff = P1 + P2 + P3 - target
    res = float(np.sqrt(dt * h * np.sum(diff**2)))
    scale = float(np.sqrt(dt * h * np.sum(target**2)))
    return P123(P1, P2, P3, target, res, res / scale if scale > 0 else res)


# --- regression sample suite ------------------------------------------------------


@dataclass(frozen=True)
class SuiteSample:
    n: int
    mu: float
    ratio: float | None  # at 𝒞₁ = 1
    ratio_2M: float | None  # same solution, M doubled


def sample_suite(
    weight: CarlemanWeight,
    gamma: float,
    omega1: Sequence,
    count: int = 50,
    seed: int = 0,
    T: float = 1.0,
    steps: int = 200,
    n_max: int = 5,
    C2: float = 1.0,
) -> list[SuiteSample]:
    """Random mode solutions u_n' + G_n u_n = sin(3t) f with random u0, f and n ≤ n_max."""
    from .evolution import SourceTerm, solve_mode
    from .operators import assemble_mode_operator

    g = weight.psi.grid_x
    rng = np.random.default_rng(seed)
    tt = np.linspace(0.0, T, steps + 1)
    out = []
    for _ in range(count):
        n = int(rng.integers(1, n_max + 1))
        mu = float((n * np.pi) ** 2)
        op = assemble_mode_operator(g, mu, gamma)
        u0 = rng.standard_normal(op.size)
        f = rng.standard_normal(op.size)
        traj = solve_mode(op, u0, SourceTerm.sampled(np.outer(np.sin(3 * tt), f)), T, T / steps)
        pr = carleman_params(0.0, T, mu, gamma, C2)
        r1 = carleman_ratio(traj, op, weight, pr, omega1).ratio
        r2 = carleman_ratio(traj, op, weight, carleman_params(0.0, T, mu, gamma, C2, M=2 * pr.M), omega1).ratio
        out.append(SuiteSample(n, mu, r1, r2))
    return out
