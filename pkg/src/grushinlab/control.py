"""Constructive null control: penalized block controls on active intervals, free decay in between.

Controls are sampled on the time nodes and integrated with backward Euler, so the
sample at the first node of an active interval never enters the dynamics and
segments concatenate without overlap.  The control norm is the trapezoid
discretization of ‖g‖²_{L²((0,T)×ω)}.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .domain import TensorGrid, as_tensor_grid, subdomain_indices
from .evolution import SourceTerm, Stepper, Trajectory, solve_full, time_nodes
from .lr_schedule import LRSchedule, build_schedule
from .operators import assemble_full_operator, assemble_mode_operator, check_gamma
from .parallel import parallel_map
from .spectral import ModeBasis, block_members, complete_basis

SCHEME = "backward-euler"
LAYOUTS = ("first", "last")


class ControlError(RuntimeError):
    def __init__(self, message: str, partial: "ControlReport | None" = None):
        super().__init__(message)
        self.partial = partial


# --- one block ----------------------------------------------------------------------


@dataclass(frozen=True)
class ControlSegment:
    g: np.ndarray  # (m+1, n) samples on the interval nodes, g[0] unused
    cost: float
    residual: float  # ‖Π u(end)‖ after the control
    initial_gap: float  # ‖Π S u(start)‖, the uncontrolled projection at the end
    iterations: int
    final_state: np.ndarray = field(repr=False)
    gramian_max: float | None = None


@dataclass(frozen=True)
class ModalData:
    """x-eigenpairs of the block's mode operators and the y-overlaps of the control set.

    ``Y[n', n] = ∫ φ_{n'} χ_{ω_y} φ_n dy``; ``chi_x`` is the x-indicator of ω.
    """

    lam: list  # eigenvalues of G_n, one array per block mode
    V: list  # orthonormal eigenvectors of G_n
    Y: np.ndarray
    chi_x: np.ndarray


def modal_data(grid: TensorGrid, gamma: float, basis: ModeBasis, members: np.ndarray, omega: Sequence, b=1.0) -> ModalData:
    grid = as_tensor_grid(grid)
    gx, gy = grid.x_part, grid.grid_y
    box = list(omega)
    chi_x = subdomain_indices(gx, box[: gx.ndim]).interior_mask().astype(float)
    chi_y = subdomain_indices(gy, [box[-1]]).interior_mask().astype(float)
    Phi = basis.phi[np.asarray(members)]
    Y = gy.h * (Phi * chi_y) @ Phi.T
    lam, V = [], []
    for mu in basis.mu[np.asarray(members)]:
        w, v = np.linalg.eigh(assemble_mode_operator(gx, mu, gamma, b).matrix.toarray())
        lam.append(w)
        V.append(v)
    return ModalData(lam, V, Y, chi_x)


def _geometric_gamma(ra: np.ndarray, rb: np.ndarray, m: int, dt: float) -> np.ndarray:
    """Σ_{p=1}^{m} (dt²/w_p) (r_a r_b)^p with w = dt except dt/2 at p = 1."""
    q = np.multiply.outer(ra, rb)
    near = np.abs(1.0 - q) < 1e-10
    with np.errstate(divide="ignore", invalid="ignore", under="ignore"):
        geo = np.where(near, float(m), q * (1.0 - q**m) / (1.0 - q))
    return dt * (geo + q)


class BlockProblem:
    """State space with a control mask and an h-orthonormal block basis P (h PᵀP = I).

    With ``modal`` data the block Gramian can also be assembled in closed form
    from the x-eigenpairs of the mode operators; P must then be the x-major
    Kronecker basis I_x ⊗ Φ_blockᵀ/√h_x.
    """

    def __init__(self, A, cell_volume: float, mask: np.ndarray, P: np.ndarray, dt: float, modal: ModalData | None = None):
        self.modal = modal
        self.A = sp.csr_matrix(A)
        self.h = float(cell_volume)
        self.mask = np.asarray(mask, dtype=bool)
        self.P = np.asarray(P, dtype=float)
        self.dt = float(dt)
        self.stepper = Stepper(self.A, self.dt, SCHEME)
        self.n = self.A.shape[0]
        defect = np.abs(self.h * self.P.T @ self.P - np.eye(self.P.shape[1])).max()
        if defect > 1e-8:
            raise ValueError(f"block basis is not orthonormal in the grid inner product (defect {defect:.2e})")

    def weights(self, m: int) -> np.ndarray:
        w = np.full(m + 1, self.dt)
        w[[0, -1]] = 0.5 * self.dt
        return w

    def coeffs(self, v: np.ndarray) -> np.ndarray:
        return self.h * (self.P.T @ v)

    def evolve(self, u: np.ndarray, m: int, g: np.ndarray | None = None) -> np.ndarray:
        for k in range(1, m + 1):
            rhs = u if g is None else u + self.dt * g[k]
            u = self.stepper.solve(rhs)
        return u

    def adjoint_control(self, phi: np.ndarray, m: int) -> np.ndarray:
        """L*φ: the control whose cost-inner product with g equals ⟨u(end), φ⟩."""
        w = self.weights(m)
        out = np.zeros((m + 1, self.n))
        lam = phi
        for k in range(m, 0, -1):
            q = self.stepper.solve_transpose(lam)
            out[k] = np.where(self.mask, self.dt * q / w[k], 0.0)
            lam = q
        return out

    def cost(self, g: np.ndarray) -> float:
        w = self.weights(g.shape[0] - 1)
        return float(self.h * np.einsum("k,ki,ki->", w, g, g))

    def gramian(self, c: np.ndarray, m: int) -> np.ndarray:
        phi = self.P @ c
        return self.coeffs(self.evolve(np.zeros(self.n), m, self.adjoint_control(phi, m)))

    def assembled_gramian(self, m: int) -> np.ndarray:
        """Dense Π L L* Π in block coordinates, exact for backward Euler."""
        md = self.modal
        if md is None:
            raise ValueError("no modal data attached")
        nb = len(md.V)
        nx = md.V[0].shape[0]
        r = [1.0 / (1.0 + self.dt * lam) for lam in md.lam]
        out = np.zeros((nb * nx, nb * nx))
        for i in range(nb):
            for k in range(nb):
                if md.Y[i, k] == 0.0:
                    continue
                core = (md.V[i].T * md.chi_x) @ md.V[k]
                core *= _geometric_gamma(r[i], r[k], m, self.dt)
                out[i * nx : (i + 1) * nx, k * nx : (k + 1) * nx] = md.Y[i, k] * (md.V[i] @ core @ md.V[k].T)
        perm = (np.arange(nb)[None, :] * nx + np.arange(nx)[:, None]).ravel()  # x-major -> mode-major
        G = out[np.ix_(perm, perm)]
        return 0.5 * (G + G.T)

    def gramian_max(self, m: int, iters: int = 60, seed: int = 0) -> float:
        """Largest eigenvalue of the block Gramian Π L L* Π (power iteration)."""
        if self.modal is not None:
            return float(np.linalg.eigvalsh(self.assembled_gramian(m))[-1])
        rng = np.random.default_rng(seed)
        c = rng.standard_normal(self.P.shape[1])
        c /= np.linalg.norm(c)
        val = 0.0
        for _ in range(iters):
            y = self.gramian(c, m)
            new = float(c @ y)
            c = y / np.linalg.norm(y)
            if abs(new - val) <= 1e-10 * abs(new):
                val = new
                break
            val = new
        return val


def block_control(
    problem: BlockProblem, u: np.ndarray, m: int, eps: float, rtol: float = 1e-10, maxiter: int = 5000,
    with_gramian: bool = False, gramian: str = "auto",
) -> ControlSegment:
    """Minimize ‖g‖² + ‖Π u(end)‖²/ε over m steps starting from ``u``.

    CG runs on (Λ + ε)c = Π S u with Λ applied matrix-free through forward and
    adjoint solves (``gramian="matrix-free"``) or assembled from modal data
    (``"assembled"``; ``"auto"`` picks it when modal data is attached).
    """
    if gramian not in ("auto", "assembled", "matrix-free"):
        raise ValueError(f"unknown gramian mode {gramian!r}")
    assembled = gramian == "assembled" or (gramian == "auto" and problem.modal is not None)
    if m < 1:
        raise ValueError("active interval must contain at least one step")
    if eps <= 0:
        raise ValueError("penalty must be positive")
    free = problem.evolve(np.asarray(u, dtype=float), m)
    z = problem.coeffs(free)
    gap = float(np.linalg.norm(z))
    if gap == 0.0:
        g = np.zeros((m + 1, problem.n))
        return ControlSegment(g, 0.0, 0.0, 0.0, 0, free)
    r = problem.P.shape[1]
    if assembled:
        Gm = problem.assembled_gramian(m)
        op = LinearOperator((r, r), matvec=lambda c: Gm @ c + eps * c, dtype=float)
    else:
        op = LinearOperator((r, r), matvec=lambda c: problem.gramian(c, m) + eps * c, dtype=float)
    count = [0]

    def cb(_):
        count[0] += 1

    c, info = cg(op, z, rtol=rtol, atol=0.0, maxiter=maxiter, callback=cb)
    if info != 0:
        diag = np.array([problem.gramian(e, m)[i] for i, e in enumerate(np.eye(r)[: min(r, 5)])])
        raise ControlError(
            f"CG on the penalized Gramian failed after {count[0]} iterations (ε = {eps:g}, "
            f"leading Gramian diagonal {np.array2string(diag, precision=3)})"
        )
    g = -problem.adjoint_control(problem.P @ c, m)
    end = problem.evolve(np.asarray(u, dtype=float), m, g)
    res = float(np.linalg.norm(problem.coeffs(end)))
    gmax = problem.gramian_max(m) if with_gramian else None
    return ControlSegment(g, problem.cost(g), res, gap, count[0], end, gmax)


def scalar_lq_cost(lam: float, u0: float, tau: float, eps: float) -> tuple[float, float]:
    """Continuous optimum of ∫₀^τ g² + u(τ)²/ε for u̇ = −λu + g: (cost, final state)."""
    G = (1.0 - np.exp(-2.0 * lam * tau)) / (2.0 * lam)
    z = np.exp(-lam * tau) * u0
    final = eps * z / (G + eps)
    cost = G * z**2 / (G + eps) ** 2
    return float(cost), float(final)


# --- Lebeau-Robbiano sweep ---------------------------------------------------------


@dataclass(frozen=True)
class BlockRecord:
    j: int
    modes: list
    active: tuple  # (t_start, t_end), empty block -> (t, t)
    passive: tuple
    eps: float
    cost: float
    residual: float
    initial_gap: float
    iterations: int
    passive_ok: bool
    passive_worst: float  # max over modes of observed/allowed contraction
    gramian_max: float = 0.0


@dataclass(frozen=True)
class ControlReport:
    final_norm: float
    initial_norm: float
    cost: float
    blocks: list
    schedule: LRSchedule = field(repr=False)
    layout: str = "first"
    support_ok: bool = True

    @property
    def final_norm_rel(self) -> float:
        return self.final_norm / self.initial_norm if self.initial_norm > 0 else 0.0

    @property
    def residuals(self) -> np.ndarray:
        return np.array([b.residual for b in self.blocks if b.modes])

    def to_dict(self) -> dict:
        return {
            "final_norm": self.final_norm,
            "final_norm_rel": self.final_norm_rel,
            "cost": self.cost,
            "layout": self.layout,
            "support_ok": self.support_ok,
            "blocks": [
                {
                    "j": b.j,
                    "modes": [int(n) for n in b.modes],
                    "active": list(b.active),
                    "passive": list(b.passive),
                    "eps": b.eps,
                    "cost": b.cost,
                    "residual": b.residual,
                    "initial_gap": b.initial_gap,
                    "iterations": b.iterations,
                    "passive_ok": b.passive_ok,
                }
                for b in self.blocks
            ],
        }


@dataclass(frozen=True)
class ControlSignal:
    times: np.ndarray
    g: np.ndarray  # (K+1, n)
    active: np.ndarray  # bool per node: sample belongs to an active interval
    block_of: np.ndarray  # block index per node (0 outside active intervals)
    mask: np.ndarray
    cell_volume: float

    @property
    def cost(self) -> float:
        w = np.full(self.times.size, self.times[1] - self.times[0])
        w[[0, -1]] *= 0.5
        return float(self.cell_volume * np.einsum("k,ki,ki->", w, self.g, self.g))

    def support_ok(self) -> bool:
        nz = self.g != 0
        return bool(not np.any(nz[:, ~self.mask]) and not np.any(nz[~self.active]))

    def source(self) -> SourceTerm:
        return SourceTerm.sampled(self.g)


def mode_decay_rates(grid: TensorGrid, gamma: float, basis: ModeBasis, b=1.0) -> np.ndarray:
    """Smallest eigenvalue of each discrete mode operator."""
    gx = grid.x_part

    def lam(mu):
        return float(np.linalg.eigvalsh(assemble_mode_operator(gx, mu, gamma, b).matrix.toarray())[0])

    return np.array(parallel_map(lam, list(basis.mu)))


def _node(t: float, dt: float) -> int:
    return int(round(t / dt))


def lr_null_control(
    u0: np.ndarray,
    gamma: float,
    grid: TensorGrid,
    omega: Sequence,
    T: float,
    J: int = 5,
    dt: float | None = None,
    eps0: float = 1e-2,
    relative_eps: bool = True,
    absorb_tail: bool = True,
    layout: str = "first",
    schedule: LRSchedule | None = None,
    b=1.0,
    rtol: float = 1e-10,
) -> tuple[ControlSignal, Trajectory, ControlReport]:
    """Walk the dyadic windows; control block j on the active half, let it decay on the other.

    The penalty on block j is ε₀4^{−j}, multiplied by the largest eigenvalue of
    that block's Gramian when ``relative_eps`` is set.  With ``absorb_tail`` the
    time left after the J-th window is added to that window instead of being
    spent in free decay.
    """
    if layout not in LAYOUTS:
        raise ValueError(f"layout must be one of {LAYOUTS}")
    gamma = check_gamma(gamma)
    grid = as_tensor_grid(grid)
    if schedule is None:
        if gamma == 1.0:
            raise ValueError("γ = 1 needs an explicit schedule")
        schedule = build_schedule(T, gamma, J=J)
    dt = T / 400 if dt is None else dt
    times = time_nodes(T, dt)
    basis = complete_basis(grid.grid_y)
    A = assemble_full_operator(grid, gamma, b, basis)
    mask = subdomain_indices(grid, list(omega)).interior_mask()
    h = grid.cell_volume
    nx = grid.x_part.n_interior
    ny = grid.grid_y.n_interior
    lam_n = mode_decay_rates(grid, gamma, basis, b)
    u = np.asarray(u0, dtype=float).ravel().copy()
    n0 = float(np.sqrt(h) * np.linalg.norm(u))
    G = np.zeros((times.size, u.size))
    active = np.zeros(times.size, dtype=bool)
    block_of = np.zeros(times.size, dtype=int)
    records = []
    free_stepper = Stepper(A, dt, SCHEME)

    def mode_norms(v):
        return np.linalg.norm(basis.coefficients(v, nx), axis=0) * np.sqrt(h / grid.grid_y.h)

    windows = schedule.block_windows().copy()
    if absorb_tail:
        windows[-1, 1] = T  # the truncation defect T·2^{−Jρ} joins the last window
    for j in range(1, schedule.J + 1):
        a, e = windows[j - 1]
        ka, ke = _node(a, dt), _node(e, dt)
        km = _node(a + 0.5 * (e - a), dt)
        if layout == "first":
            act, pas = (ka, km), (km, ke)
        else:
            pas, act = (ka, km), (km, ke)
        blk = block_members(basis, j)
        modes = [int(i) + 1 for i in blk.members] if len(blk) else []
        eps = eps0 * 4.0 ** (-j)

        def passive(k0, k1, v):
            before = mode_norms(v)
            for _ in range(k0, k1):
                v = free_stepper.solve(v)
            after = mode_norms(v)
            m = k1 - k0
            allowed = (1.0 + lam_n * dt) ** (-m)
            outside = np.ones(basis.n_modes, dtype=bool)
            if len(blk):
                outside[np.asarray(blk.members)] = False
            ok, worst = True, 0.0
            floor = 1e-12 * max(before.max(), 1e-300)  # rounding level of the whole state
            sel = outside & (before > floor)
            if m > 0 and np.any(sel):
                ratio = np.maximum(after[sel] - floor, 0.0) / (allowed[sel] * before[sel])
                worst = float(ratio.max())
                ok = bool(worst <= 1.0 + 1e-8)
            return v, ok, worst

        seg_cost = res = gap = 0.0
        its = 0
        gmax = 0.0
        p_ok, p_worst = True, 0.0
        for phase in (("active", act), ("passive", pas)) if layout == "first" else (("passive", pas), ("active", act)):
            kind, (k0, k1) = phase
            if kind == "passive":
                u, p_ok, p_worst = passive(k0, k1, u)
                continue
            if not modes or k1 <= k0:  # nothing to control: the interval is spent in free decay
                u = passive(k0, k1, u)[0]
                continue
            Phi = basis.phi[np.asarray(blk.members)]
            P = np.kron(np.eye(nx), Phi.T) / np.sqrt(h / grid.grid_y.h)
            prob = BlockProblem(A, h, mask, P, dt, modal_data(grid, gamma, basis, blk.members, omega, b))
            gmax = prob.gramian_max(k1 - k0)
            if relative_eps:
                eps = eps * gmax
            try:
                seg = block_control(prob, u, k1 - k0, eps, rtol)
            except ControlError as exc:
                rep = ControlReport(float(np.sqrt(h) * np.linalg.norm(u)), n0, 0.0, records, schedule, layout)
                raise ControlError(f"block {j}: {exc}", rep) from exc
            G[k0 + 1 : k1 + 1] = seg.g[1:]
            active[k0 + 1 : k1 + 1] = True
            block_of[k0 + 1 : k1 + 1] = j
            u = seg.final_state
            seg_cost, res, gap, its = seg.cost, seg.residual, seg.initial_gap, seg.iterations
        records.append(
            BlockRecord(
                j, modes, (float(times[act[0]]), float(times[act[1]])), (float(times[pas[0]]), float(times[pas[1]])),
                eps, seg_cost, res, gap, its, p_ok, p_worst, gmax,
            )
        )
    kJ = _node(windows[-1][1], dt)
    for _ in range(kJ, times.size - 1):
        u = free_stepper.solve(u)
    signal = ControlSignal(times, G, active, block_of, mask, h)
    traj = solve_full(A, grid, u0, signal.source(), T, dt, SCHEME)
    final = float(np.sqrt(h) * np.linalg.norm(traj.final))
    report = ControlReport(final, n0, signal.cost, records, schedule, layout, signal.support_ok())
    return signal, traj, report
