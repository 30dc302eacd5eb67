"""Dyadic time/frequency schedule and the δ/A/B recursion behind the uniform constant."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

LOG2 = float(np.log(2.0))


class ScheduleError(ValueError):
    pass


class RegimeError(RuntimeError):
    """The recursion did not settle into δ_n = 2 with a stable A_n."""


def p_exponent(gamma: float) -> float:
    gamma = float(gamma)
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"p(γ) is defined for γ in (0, 1), got {gamma}")
    if gamma >= 0.5:
        return (1 + gamma) / (1 - gamma)
    return 2 * (1 + gamma) / (1 - 2 * gamma)


def rho_supremum(gamma: float) -> float:
    """min{(1−γ)/(1+γ), 1/p(γ)}: admissible ρ lie strictly below this."""
    return min((1 - gamma) / (1 + gamma), 1.0 / p_exponent(gamma))


@dataclass(frozen=True)
class LRSchedule:
    T: float
    gamma: float
    rho: float
    J: int
    p: float | None
    K: float
    tau: np.ndarray = field(repr=False)  # τ_1..τ_J
    alpha: np.ndarray = field(repr=False)  # α_0..α_J
    admissible: bool = True

    @property
    def I(self) -> np.ndarray:
        """Rows (start, end) of I_n = (T−α_{n−1}−τ_n, T−α_{n−1})."""
        end = self.T - self.alpha[:-1]
        return np.column_stack([end - self.tau, end])

    @property
    def Jn(self) -> np.ndarray:
        """Rows (start, end) of J_n = (T−α_n, T−α_{n−1})."""
        return np.column_stack([self.T - self.alpha[1:], self.T - self.alpha[:-1]])

    @property
    def truncation_defect(self) -> float:
        """T − Σ_{j≤J} 2τ_j, which equals T·2^{−Jρ} exactly."""
        return self.T * 2.0 ** (-self.J * self.rho)

    @property
    def exponent_margin(self) -> float:
        """2/(1+γ) − ρ − 1; positive for every admissible ρ."""
        return 2.0 / (1.0 + self.gamma) - self.rho - 1.0

    def block_windows(self) -> np.ndarray:
        """Forward-time windows [α_{j−1}, α_j] used by the control layout."""
        return np.column_stack([self.alpha[:-1], self.alpha[1:]])


def build_schedule(
    T: float,
    gamma: float,
    rho_fraction: float = 0.75,
    J: int = 20,
    rho: float | None = None,
    strict: bool = True,
) -> LRSchedule:
    """τ_j = K 2^{−jρ} with K = T(2^ρ−1)/2 so that Σ_j 2τ_j = T.

    ``rho`` overrides ``rho_fraction``; ``strict=False`` lets an inadmissible
    explicit ρ through (used by the all-ones toy configuration).
    """
    if not T > 0:
        raise ScheduleError("T must be positive")
    if int(J) != J or J < 1:
        raise ScheduleError("depth J must be a positive integer")
    gamma = float(gamma)
    if not 0.0 < gamma <= 1.0:
        raise ScheduleError(f"γ must lie in (0, 1], got {gamma}")
    p = p_exponent(gamma) if gamma < 1.0 else None
    sup = rho_supremum(gamma) if gamma < 1.0 else 0.0
    if rho is None:
        if not 0.0 < rho_fraction < 1.0:
            raise ScheduleError(f"rho_fraction must lie in (0, 1), got {rho_fraction}")
        if sup <= 0:
            raise ScheduleError("no admissible ρ for γ = 1; pass rho explicitly with strict=False")
        rho = rho_fraction * sup
    rho = float(rho)
    if rho <= 0:
        raise ScheduleError("ρ must be positive")
    admissible = 0.0 < rho < sup
    if not admissible and strict:
        raise ScheduleError(f"ρ = {rho} outside the admissible interval (0, {sup})")
    if admissible and not 2.0 / (1.0 + gamma) - rho > 1.0:
        raise ScheduleError("admissible ρ must satisfy 2/(1+γ) − ρ > 1")  # cannot happen, kept as an assertion
    if not admissible:
        warnings.warn(f"using inadmissible ρ = {rho} (γ = {gamma})", stacklevel=2)
    K = T * (2.0**rho - 1.0) / 2.0
    j = np.arange(1, int(J) + 1)
    tau = K * 2.0 ** (-j * rho)
    alpha = np.concatenate([[0.0], np.cumsum(2.0 * tau)])
    tau.setflags(write=False)
    alpha.setflags(write=False)
    return LRSchedule(float(T), gamma, rho, int(J), p, float(K), tau, alpha, admissible)


def lambda_cutoff(n: int | np.ndarray, c_star: float, gamma: float) -> np.ndarray | float:
    """λ(2^n) = c_* 2^{2n/(1+γ)}."""
    if c_star <= 0:
        raise ValueError("c_* must be positive")
    out = c_star * 2.0 ** (2.0 * np.asarray(n, dtype=float) / (1.0 + gamma))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class RecursionState:
    n: np.ndarray
    log_delta: np.ndarray
    log_A: np.ndarray
    log_B: np.ndarray
    log_Btilde: np.ndarray
    lam: np.ndarray  # λ(2^n)
    C1: float
    C2: float
    C3: float
    c_star: float
    schedule: LRSchedule = field(repr=False)

    @property
    def N(self) -> int:
        return int(self.n[-1])

    @property
    def delta(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_delta)

    @property
    def A(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_A)

    @property
    def B(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_B)

    @property
    def Btilde(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_Btilde)

    def _tail_start(self, flags: np.ndarray) -> int | None:
        """First n such that flags hold from n to N (None if the last entry fails)."""
        if not flags[-1]:
            return None
        bad = np.flatnonzero(~flags)
        return int(self.n[0]) if bad.size == 0 else int(self.n[bad[-1] + 1])

    @property
    def N0(self) -> int | None:
        """Index from which δ_n = 2 up to N."""
        return self._tail_start(np.isclose(self.log_delta, LOG2, rtol=0, atol=1e-15) & (self.n >= 2))

    @property
    def N1(self) -> int | None:
        """Index from which A_n stays equal to A_N."""
        return self._tail_start(self.log_A == self.log_A[-1])

    @property
    def Btilde_peak(self) -> int:
        return int(self.n[int(np.argmax(self.log_Btilde))])

    def Btilde_decreasing_after_peak(self) -> bool:
        k = int(np.argmax(self.log_Btilde))
        return bool(np.all(np.diff(self.log_Btilde[k:]) < 0))

    def step4_premise(self) -> bool:
        """B_n ≤ δ* e^{−C₁2ⁿ} from N0 on."""
        if self.N0 is None:
            return False
        sel = self.n >= self.N0
        ld = float(self.log_delta.max())
        return bool(np.all(self.log_B[sel] <= ld - self.C1 * 2.0 ** self.n[sel]))

    def table(self) -> list[dict]:
        sch = self.schedule
        rows = []
        for i, n in enumerate(self.n):
            rows.append(
                {
                    "n": int(n),
                    "tau_n": float(sch.tau[i]) if i < sch.J else float(sch.K * 2.0 ** (-n * sch.rho)),
                    "alpha_n": float(sch.alpha[i + 1]) if i < sch.J else float(sch.T * (1 - 2.0 ** (-n * sch.rho))),
                    "lambda_2n": float(self.lam[i]),
                    "delta_n": float(self.delta[i]),
                    "A_n": float(self.A[i]),
                    "B_n": float(self.B[i]),
                    "Btilde_n": float(self.Btilde[i]),
                }
            )
        return rows


def run_recursion(
    schedule: LRSchedule, C1: float, C2: float, C3: float, c_star: float, N: int = 64
) -> RecursionState:
    if min(C1, C2, C3, c_star) <= 0:
        raise ValueError("all recursion constants must be positive")
    if not 1 <= N <= 64:
        raise ValueError("recursion depth must lie in [1, 64]")
    g, rho, K = schedule.gamma, schedule.rho, schedule.K
    n = np.arange(1, N + 1)
    tau = K * 2.0 ** (-n * rho)
    lam = lambda_cutoff(n, c_star, g)
    e = rho + 2.0 / (1.0 + g)
    lC2, lC3 = np.log(C2), np.log(C3)
    ld = np.empty(N)
    lA = np.empty(N)
    lB = np.empty(N)
    ld[0] = 0.0
    lA[0] = lC2 - e * LOG2
    lB[0] = lC3 - lam[0] * tau[0]
    for i in range(N - 1):
        m = i + 1  # n = m
        lbt = lB[i] + C1 * 2.0**m
        ld[i + 1] = max(LOG2, float(np.logaddexp(0.0, lbt)))
        cand = np.logaddexp(lB[i] - np.log(lam[i + 1]), ld[i + 1] + lC2 - (m + 1) * e * LOG2)
        lA[i + 1] = max(lA[i], float(cand))
        lB[i + 1] = np.logaddexp(LOG2 + lB[i] - 4 * lam[i + 1] * tau[i + 1], ld[i + 1] + lC3 - lam[i + 1] * tau[i + 1])
    lBt = lB + C1 * 2.0**n
    if not np.all(np.isfinite(lBt)):
        raise RegimeError("B̃ overflowed before entering the decay regime; increase T or c_*")
    return RecursionState(n, ld, lA, lB, lBt, lam, float(C1), float(C2), float(C3), float(c_star), schedule)


@dataclass(frozen=True)
class AssembledConstant:
    log_C: float
    log_delta_star: float
    log_A_inf: float
    N0: int
    N1: int

    @property
    def C(self) -> float:
        with np.errstate(over="ignore"):
            return float(np.exp(self.log_C))


def assemble_constant(state: RecursionState, btilde_tol: float = 1e-6) -> AssembledConstant:
    """C = max{δ*, A_∞} once δ_n = 2 and A_n is stable up to the recursion depth."""
    N0, N1 = state.N0, state.N1
    if N0 is None or N1 is None or N0 >= state.N or state.log_Btilde[-1] >= np.log(btilde_tol):
        raise RegimeError(
            f"recursion has not reached the δ = 2 regime within N = {state.N} "
            f"(N0={N0}, N1={N1}, log B̃_N={state.log_Btilde[-1]:.3g}); increase T or c_*"
        )
    ld = float(state.log_delta.max())
    la = float(state.log_A[-1])
    return AssembledConstant(max(ld, la), ld, la, N0, N1)
