"""Config-driven experiment runner.

    grushinlab <kind> [--config FILE] [--set key=value ...] [--print-defaults]

The config is a JSON object deep-merged over the defaults of ``kind``; every
key must already exist in the defaults, so ``--print-defaults`` documents the
whole key tree.  ``--set`` overrides one dotted key (the value is parsed as
JSON, falling back to a plain string).  A run manifest is itself accepted as
a config file.

Results go to ``$GRUSHIN_OUT/<kind>-<hash>/`` (default root ``runs``), where
the hash covers the kind and the merged config.  ``manifest.json`` echoes the
config, library versions and output checksums; wall-clock timings live in a
separate ``timings.json`` so every other file is byte-identical across
repeats.  ``GRUSHIN_WORKERS`` overrides the configured worker count.

Exit status: 0 success, 2 invalid config, 3 a verification check failed.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import sys
import time
import warnings
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import formats
from .domain import DomainError, Grid1D, build_tensor_grid
from .parallel import parallel_map

log = logging.getLogger("grushinlab")

KINDS = (
    "spectrum",
    "scaling",
    "evolve",
    "carleman-verify",
    "lr-schedule",
    "observability",
    "invert",
    "control",
    "full-suite",
)
EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 2, 3


class ConfigError(ValueError):
    pass


# --- defaults ---------------------------------------------------------------------

_COMMON = {"seed": 0, "workers": 1}

DEFAULTS: dict[str, dict] = {
    "spectrum": {
        "grid_y": {"a": 0.0, "b": 1.0, "N": 101},
        "count": 20,
        "method": "analytic",
    },
    "scaling": {
        "gammas": [0.25, 0.5, 1.0],
        "grid_x": {"a": -1.0, "b": 1.0, "N": 2001},
        "b": 1.0,
        "mu_min": 1e2,
        "mu_max": 1e6,
        "count": 9,
        "tol": 0.05,
        "harmonic_band": [0.9, 1.1],
        "eig_tol": 1e-10,
    },
    "evolve": {
        "grid_x": {"a": -1.0, "b": 1.0, "N": 41},
        "grid_y": {"a": 0.0, "b": 1.0, "N": 41},
        "gamma": 0.5,
        "b": 1.0,
        "T": 0.1,
        "dt": 1e-3,
        "scheme": "crank-nicolson",
        "modes": [[1, 1.0], [2, 0.5], [3, 0.25]],
        "snapshot_every": 10,
        "format": "binary",
        "tol": 1e-8,
    },
    "carleman-verify": {
        "grid_x": {"a": 0.0, "b": 1.0, "N": 201},
        "psi": "parabola",
        "omega_tilde": [0.4, 0.6],
        "a": 2.0,
        "safety": 1.1,
        "suite": {
            "enabled": True,
            "grid_x": {"a": -1.0, "b": 1.0, "N": 81},
            "omega_tilde": [0.55, 0.75],
            "omega1": [0.5, 0.8],
            "gammas": [0.75, 0.25],
            "count": 50,
            "C1": 0.9,
            "C2": 1.0,
        },
    },
    "lr-schedule": {
        "T": 1.0,
        "gamma": 0.25,
        "rho": None,
        "rho_fraction": 0.75,
        "J": 20,
        "N": 64,
        "strict": True,
        "constants": {"C1": 1.0, "C2": 1.0, "C3": 1.0, "c_star": 1.0},
        "btilde_tol": 1e-6,
    },
    "observability": {
        "gamma": 0.5,
        "b": 1.0,
        "x_interval": [-1.0, 1.0],
        "omega1": [0.5, 0.8],
        "y_length": 1.0,
        "T_list": [0.5, 1.0],
        "n_max": 20,
        "N": 101,
        "steps": 1000,
        "threshold": {
            "T_list": [0.05, 0.1, 0.2, 0.3],
            "n": [4, 6, 8, 10, 12, 14, 16, 18, 20],
            "N": 161,
            "steps": 400,
            "rel_width": 0.2,
        },
    },
    "invert": {
        "grid_x": {"a": -1.0, "b": 1.0, "N": 31},
        "grid_y": {"a": 0.0, "b": 1.0, "N": 21},
        "gamma": 0.5,
        "b": 1.0,
        "omega": [[0.5, 0.8], None],
        "T0": 0.25,
        "T1": 0.5,
        "dt": 0.005,
        "R": {"c0": 1.0, "ct": 0.0, "cx": 0.0},
        "f": "smooth",
        "noise": 0.0,
        "lam_reg": 1e-10,
        "eta": 0.1,
        "rtol": 1e-12,
        "maxiter": 5000,
        "tol": 1e-3,
        "measurement": None,
    },
    "control": {
        "grid_x": {"a": -1.0, "b": 1.0, "N": 81},
        "grid_y": {"a": 0.0, "b": 1.0, "N": 31},
        "gamma": 0.5,
        "b": 1.0,
        "omega": [[0.5, 0.8], [0.2, 0.8]],
        "T": 1.0,
        "J": 5,
        "dt": 0.0025,
        "eps0": 1e-2,
        "relative_eps": True,
        "absorb_tail": True,
        "layout": "first",
        "modes": [[1, 1.0], [2, 0.5], [3, 0.3]],
        "target": 1e-4,
        "rtol": 1e-10,
    },
    "full-suite": {
        "kinds": [k for k in KINDS if k != "full-suite"],
        "overrides": {},
    },
}


def defaults(kind: str) -> dict:
    if kind not in DEFAULTS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    return {**copy.deepcopy(_COMMON), **copy.deepcopy(DEFAULTS[kind])}


# --- config handling -------------------------------------------------------------


def deep_merge(base: dict, override: dict, path: str = "") -> dict:
    """Copy of ``base`` with ``override`` applied; unknown keys are rejected.

    ``overrides`` under full-suite is free-form (it is checked per kind later).
    """
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and where != "overrides":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} expects an object")
            out[k] = deep_merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_assignment(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad key {key!r}")
    return parts, value


def apply_assignment(cfg: dict, parts: list[str], value) -> dict:
    nested: object = value
    for p in reversed(parts):
        nested = {p: nested}
    return deep_merge(cfg, nested)


def load_config_file(path: str | Path) -> dict:
    """A config object, or the ``config`` entry of a run manifest."""
    try:
        data = formats.read_json(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    if "manifest_version" in data and "config" in data:
        data = data["config"]
    return data


def build_config(kind: str, file_cfg: dict | None = None, sets: list[str] | None = None) -> dict:
    cfg = defaults(kind)
    if file_cfg:
        cfg = deep_merge(cfg, file_cfg)
    for s in sets or []:
        cfg = apply_assignment(cfg, *parse_assignment(s))
    return cfg


def config_hash(kind: str, cfg: dict) -> str:
    # worker count never changes results, so it stays out of the cache key
    body = {k: v for k, v in cfg.items() if k != "workers"}
    return hashlib.sha256(formats.json_text({"kind": kind, "config": body}).encode()).hexdigest()[:12]


# --- validation helpers ------------------------------------------------------------


def _grid(spec: dict, name: str) -> Grid1D:
    try:
        return Grid1D(float(spec["a"]), float(spec["b"]), int(spec["N"]))
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _gamma(v) -> float:
    try:
        g = float(v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"gamma must be a number, got {v!r}") from exc
    if not 0.0 < g <= 1.0:
        raise ConfigError(f"gamma must lie in (0, 1], got {g}")
    return g


def _positive(v, name: str, integer: bool = False):
    try:
        x = int(v) if integer else float(v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a number") from exc
    if integer and x != v:
        raise ConfigError(f"{name} must be an integer")
    if not x > 0 or not np.isfinite(x):
        raise ConfigError(f"{name} must be positive, got {v}")
    return x


def _interval(iv, lo: float, hi: float, name: str) -> tuple[float, float]:
    try:
        a, b = float(iv[0]), float(iv[1])
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"{name} must be a pair [lo, hi]") from exc
    if not (lo <= a < b <= hi):
        raise ConfigError(f"{name} = ({a}, {b}) must lie inside ({lo}, {hi})")
    return a, b


def _box(box, axes: list[Grid1D], name: str) -> list:
    if not isinstance(box, (list, tuple)) or len(box) != len(axes):
        raise ConfigError(f"{name} needs one interval (or null) per axis")
    return [None if iv is None else _interval(iv, g.a, g.b, f"{name}[{i}]") for i, (iv, g) in enumerate(zip(box, axes))]


def _modes(spec) -> list[tuple[int, float]]:
    try:
        out = [(int(n), float(c)) for n, c in spec]
    except (TypeError, ValueError) as exc:
        raise ConfigError("modes must be a list of [n, amplitude] pairs") from exc
    if not out or any(n < 1 for n, _ in out):
        raise ConfigError("modes need positive mode numbers")
    return out


def _scheme(v) -> str:
    from .evolution import normalize_scheme

    try:
        return normalize_scheme(str(v))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _steps(T: float, dt: float, name: str = "dt") -> int:
    K = int(round(T / dt))
    if K < 1 or abs(K * dt - T) > 1e-9 * T:
        raise ConfigError(f"{name} = {dt} does not divide the horizon {T}")
    return K


def modal_datum(grid, modes: list[tuple[int, float]]) -> np.ndarray:
    """Σ c_n sin(nπ(x−a)/L_x) sin(nπ(y−c)/L_y) on the interior nodes."""
    gx, gy = grid.axes[0], grid.grid_y

    def fn(x, y):
        out = np.zeros(np.broadcast(x, y).shape)
        for n, c in modes:
            out += c * np.sin(n * np.pi * (x - gx.a) / gx.length) * np.sin(n * np.pi * (y - gy.a) / gy.length)
        return out

    return grid.sample(fn)


# --- runners -----------------------------------------------------------------------


@dataclass
class RunResult:
    files: dict = field(default_factory=dict)  # name -> bytes
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def csv(self, name, header, rows):
        self.files[name] = formats.csv_text(header, rows).encode()

    def json(self, name, obj):
        self.files[name] = formats.json_text(obj).encode()

    def fail(self, message: str):
        log.warning("verification failed: %s", message)
        self.failures.append(message)


def run_spectrum(cfg: dict, workers: int) -> RunResult:
    from .spectral import block_min_index, dirichlet_eigenpairs, ResolutionError

    gy = _grid(cfg["grid_y"], "grid_y")
    count = _positive(cfg["count"], "count", integer=True)
    if cfg["method"] not in ("analytic", "fd"):
        raise ConfigError("method must be 'analytic' or 'fd'")
    try:
        basis = dirichlet_eigenpairs(gy, count, cfg["method"])
    except ResolutionError as exc:
        raise ConfigError(str(exc)) from exc
    res = RunResult()
    mu = basis.mu
    res.csv("spectrum.csv", ["n", "mu_n", "block_j_min"], [(i + 1, m, block_min_index(m)) for i, m in enumerate(mu)])
    res.json("spectrum.json", {"count": basis.n_modes, "orthonormality_defect": basis.orthonormality_defect})
    if np.any(np.diff(mu) <= 0):
        res.fail("eigenvalues are not strictly ascending")
    return res


def run_scaling(cfg: dict, workers: int) -> RunResult:
    from .operators import assemble_mode_operator, fit_scaling_law, smallest_eigenvalue

    gx = _grid(cfg["grid_x"], "grid_x")
    gammas = [_gamma(g) for g in cfg["gammas"]]
    lo, hi = _positive(cfg["mu_min"], "mu_min"), _positive(cfg["mu_max"], "mu_max")
    count = _positive(cfg["count"], "count", integer=True)
    if hi <= lo or count < 5:
        raise ConfigError("need mu_min < mu_max and at least 5 samples")
    mus = np.geomspace(lo, hi, count)
    jobs = [(g, float(m)) for g in gammas for m in mus]

    def one(job):
        g, m = job
        op = assemble_mode_operator(gx, m, g, float(cfg["b"]))
        return smallest_eigenvalue(op, tol=float(cfg["eig_tol"])).value

    lams = parallel_map(one, jobs, workers)
    res = RunResult()
    res.csv(
        "scaling.csv",
        ["gamma", "mu", "lambda", "lambda_mu_ratio"],
        [(g, m, l, l * m ** (-1.0 / (1.0 + g))) for (g, m), l in zip(jobs, lams)],
    )
    summary = {}
    band = [float(v) for v in cfg["harmonic_band"]]
    for i, g in enumerate(gammas):
        sel = lams[i * count : (i + 1) * count]
        try:
            fit = fit_scaling_law(list(zip(mus, sel)), g)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        entry = {
            "exponent": fit.exponent,
            "expected": fit.expected_exponent,
            "c_star": fit.c_star,
            "c_star_upper": fit.c_star_upper,
        }
        if abs(fit.exponent - fit.expected_exponent) > float(cfg["tol"]):
            res.fail(f"gamma={g}: exponent {fit.exponent:.4f} differs from {fit.expected_exponent:.4f}")
        if g == 1.0:
            ratio = sel[-1] / np.sqrt(mus[-1])
            entry["harmonic_ratio"] = ratio
            if not band[0] <= ratio <= band[1]:
                res.fail(f"lambda/sqrt(mu) = {ratio:.4f} at mu = {mus[-1]:g} outside {band}")
        summary[repr(g)] = entry
    res.json("scaling.json", summary)
    return res


def run_evolve(cfg: dict, workers: int) -> RunResult:
    from .evolution import SourceTerm, derivative_residual, solve_full, solve_mode
    from .operators import assemble_full_operator, assemble_mode_operator
    from .spectral import complete_basis

    gx, gy = _grid(cfg["grid_x"], "grid_x"), _grid(cfg["grid_y"], "grid_y")
    grid = build_tensor_grid(gx, gy)
    gamma = _gamma(cfg["gamma"])
    T, dt = _positive(cfg["T"], "T"), _positive(cfg["dt"], "dt")
    K = _steps(T, dt)
    every = _positive(cfg["snapshot_every"], "snapshot_every", integer=True)
    if cfg["format"] not in ("binary", "csv"):
        raise ConfigError("format must be 'binary' or 'csv'")
    scheme = _scheme(cfg["scheme"])
    modes = _modes(cfg["modes"])
    if max(n for n, _ in modes) > gy.n_interior:
        raise ConfigError("mode number exceeds the y-resolution")
    b = float(cfg["b"])

    basis = complete_basis(gy)
    G = assemble_full_operator(grid, gamma, b, basis)
    u0 = modal_datum(grid, modes)
    traj = solve_full(G, grid, u0, None, T, dt, scheme)

    nx = grid.x_part.n_interior
    coeffs = basis.coefficients(u0, nx)  # (n_x, n_modes)
    active = sorted({n for n, _ in modes})

    def one(n):
        op = assemble_mode_operator(grid.x_part, basis.mu[n - 1], gamma, b)
        return solve_mode(op, coeffs[:, n - 1], None, T, dt, scheme).states

    per_mode = parallel_map(one, active, workers)
    recon = sum(np.einsum("ki,j->kij", s, basis.phi[n - 1]).reshape(K + 1, -1) for n, s in zip(active, per_mode))
    scale = np.linalg.norm(traj.states, axis=1).max()
    mode_error = float(np.linalg.norm(traj.states - recon, axis=1).max() / scale)
    deriv = derivative_residual(traj, SourceTerm.zero(), None, G)

    res = RunResult()
    snaps = traj.states[::every]
    tsnap = traj.times[::every]
    if cfg["format"] == "binary":
        res.files["trajectory.bin"] = formats.pack_block(snaps, dt * every, 0.0)
    else:
        res.csv("trajectory.csv", ["t"] + [f"u{i}" for i in range(snaps.shape[1])], [(t, *row) for t, row in zip(tsnap, snaps)])
    res.csv("norms.csv", ["t", "norm_sq"], zip(traj.times, traj.norms_sq()))
    res.json(
        "evolve.json",
        {
            "mode_error": mode_error,
            "derivative_residual": deriv.residual,
            "initial_norm": float(np.sqrt(traj.norms_sq()[0])),
            "final_norm": float(np.sqrt(traj.norms_sq()[-1])),
            "steps": K,
            "shape": list(grid.interior_shape),
        },
    )
    if mode_error > float(cfg["tol"]):
        res.fail(f"full and per-mode solves differ by {mode_error:.3e}")
    if np.any(np.diff(traj.norms_sq()) > 1e-12 * traj.norms_sq()[0]):
        res.fail("energy increased along the free evolution")
    return res


def _psi_for(cfg: dict, gx: Grid1D, omega_tilde):
    from .carleman import ExplicitProfile, construct_psi

    a, b = gx.a, gx.b
    if cfg == "parabola":
        prof = ExplicitProfile(
            a, b, lambda x: (x - a) * (b - x), lambda x: a + b - 2 * x, lambda x: np.full_like(np.asarray(x, float), -2.0)
        )
        return construct_psi(gx, [omega_tilde], prof)
    if cfg == "skewed":
        return construct_psi(gx, [omega_tilde])
    raise ConfigError("psi must be 'parabola' or 'skewed'")


def run_carleman(cfg: dict, workers: int) -> RunResult:
    from .carleman import WeightError, calibrate_weight, sample_suite, verify_weight_inequalities

    gx = _grid(cfg["grid_x"], "grid_x")
    ot = _interval(cfg["omega_tilde"], gx.a, gx.b, "omega_tilde")
    a = float(cfg["a"])
    if not 1.0 < a < 3.0:
        raise ConfigError("a must lie in (1, 3)")
    try:
        psi = _psi_for(cfg["psi"], gx, ot)
        closed = calibrate_weight(psi, a, "closed-form")
        weight = calibrate_weight(psi, a, "search", float(cfg["safety"]))
    except (WeightError, DomainError) as exc:
        raise ConfigError(str(exc)) from exc
    margins = verify_weight_inequalities(weight)
    res = RunResult()
    nodes = gx.nodes
    rows = []
    for form, arr, idx in (
        ("boundary", margins.boundary, margins.boundary_nodes),
        ("interior", margins.interior, margins.interior_nodes),
        ("gradient", margins.gradient, margins.interior_nodes),
    ):
        for s, l, i in zip(np.ravel(arr.sign), np.ravel(arr.log), idx):
            rows.append((form, int(i), float(nodes[i]), float(s), float(l)))
    res.csv("margins.csv", ["form", "node", "x", "sign", "log_abs"], rows)

    summary = {
        "lambda_closed_form": closed.lam,
        "lambda_search": weight.lam,
        "log_lambda_closed_form": float(np.log(closed.lam)),
        "log_lambda_search": float(np.log(weight.lam)),
        "C1": weight.C1,
        "C3": weight.C3,
        "log_C1": weight.log_C1,
        "log_C3": weight.log_C3,
        "m_lower": psi.m_lower,
        "m_upper": psi.m_upper,
        "margins_min": margins.min(),
        "margins_ok": margins.ok,
    }
    if not margins.ok:
        res.fail(f"negative weight margins at nodes {margins.offending()}")
    if np.log(weight.lam) > np.log(closed.lam):
        res.fail("searched lambda exceeds the closed-form sufficient lambda")

    sc = cfg["suite"]
    if sc["enabled"]:
        sg = _grid(sc["grid_x"], "suite.grid_x")
        sot = _interval(sc["omega_tilde"], sg.a, sg.b, "suite.omega_tilde")
        om1 = _interval(sc["omega1"], sg.a, sg.b, "suite.omega1")
        sw = calibrate_weight(_psi_for("skewed", sg, sot), a, "search", float(cfg["safety"]))
        C1, C2 = _positive(sc["C1"], "suite.C1"), _positive(sc["C2"], "suite.C2")
        gammas = [_gamma(g) for g in sc["gammas"]]
        count = _positive(sc["count"], "suite.count", integer=True)
        suites = parallel_map(lambda g: sample_suite(sw, g, om1, count, int(cfg["seed"]), C2=C2), gammas, workers)
        ratio_max = {}
        for g, suite in zip(gammas, suites):
            r = max(s.ratio for s in suite if s.ratio is not None)
            ratio_max[repr(g)] = C1 * r
            if C1 * r > 1.0:
                res.fail(f"gamma={g}: Carleman ratio {C1 * r:.6f} > 1 at C1={C1}")
        summary["ratio_max"] = ratio_max
        summary["suite_C1"] = C1
        summary["suite_C2"] = C2
    res.json("carleman.json", summary)
    return res


def run_lr(cfg: dict, workers: int) -> RunResult:
    from .lr_schedule import RegimeError, ScheduleError, assemble_constant, build_schedule, run_recursion

    T = _positive(cfg["T"], "T")
    gamma = _gamma(cfg["gamma"])
    c = cfg["constants"]
    consts = [_positive(c[k], f"constants.{k}") for k in ("C1", "C2", "C3", "c_star")]
    N = _positive(cfg["N"], "N", integer=True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sch = build_schedule(
                T,
                gamma,
                float(cfg["rho_fraction"]),
                _positive(cfg["J"], "J", integer=True),
                None if cfg["rho"] is None else float(cfg["rho"]),
                bool(cfg["strict"]),
            )
        state = run_recursion(sch, *consts, N=N)
    except (ScheduleError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    except RegimeError as exc:
        res = RunResult()
        res.json("lr.json", {"reached": False, "reason": str(exc)})
        res.fail(str(exc))
        return res
    res = RunResult()
    I = sch.I
    res.csv(
        "schedule.csv",
        ["j", "tau_j", "alpha_j", "I_start", "I_end"],
        [(j + 1, sch.tau[j], sch.alpha[j + 1], I[j, 0], I[j, 1]) for j in range(sch.J)],
    )
    rows = state.table()
    keys = ["n", "tau_n", "alpha_n", "lambda_2n", "delta_n", "A_n", "B_n", "Btilde_n"]
    res.csv("recursion.csv", keys, [[r[k] for k in keys] for r in rows])
    summary = {
        "rho": sch.rho,
        "K": sch.K,
        "admissible": sch.admissible,
        "exponent_margin": sch.exponent_margin,
        "truncation_defect": sch.truncation_defect,
        "log_B1": float(state.log_B[0]),
        "delta_2": float(state.delta[1]) if N > 1 else None,
        "N0_delta2": state.N0,
        "N1": state.N1,
        "log_Btilde_N": float(state.log_Btilde[-1]),
        "Btilde_peak": state.Btilde_peak,
    }
    try:
        const = assemble_constant(state, float(cfg["btilde_tol"]))
    except RegimeError as exc:
        summary["reached"] = False
        res.fail(str(exc))
    else:
        summary.update(
            reached=True,
            C=const.C,
            log_C=const.log_C,
            delta_star=float(np.exp(const.log_delta_star)),
            A_inf=float(np.exp(const.log_A_inf)),
            Btilde_decreasing_after_peak=state.Btilde_decreasing_after_peak(),
        )
    res.json("lr.json", summary)
    return res


def run_observability(cfg: dict, workers: int) -> RunResult:
    from .observability import NonObservableError, minimal_time_study, mode_obs_constant, mode_problem

    gamma = _gamma(cfg["gamma"])
    xi = _interval(cfg["x_interval"], -np.inf, np.inf, "x_interval")
    om = _interval(cfg["omega1"], *xi, "omega1")
    Ly = _positive(cfg["y_length"], "y_length")
    n_max = _positive(cfg["n_max"], "n_max", integer=True)
    N = _positive(cfg["N"], "N", integer=True)
    steps = _positive(cfg["steps"], "steps", integer=True)
    Ts = sorted(_positive(t, "T_list") for t in cfg["T_list"])
    if not Ts:
        raise ConfigError("T_list is empty")
    ns = np.arange(1, n_max + 1)
    mus = (ns * np.pi / Ly) ** 2
    res = RunResult()
    tables = {}
    for T in Ts:
        try:
            prob = mode_problem(gamma, xi, om, T, N, T / steps, float(cfg["b"]))
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc
        try:
            Cs = np.array(parallel_map(lambda m: mode_obs_constant(prob, m).C_obs, list(mus), workers))
        except NonObservableError as exc:
            res.fail(f"T={T}: {exc}")
            continue
        tables[T] = Cs
        res.csv(f"obs_T{T!r}.csv", ["n", "mu_n", "C_n"], zip(ns, mus, Cs))
    summary = {
        "sup_C": {repr(T): float(C.max()) for T, C in tables.items()},
        "argmax_n": {repr(T): int(ns[int(np.argmax(C))]) for T, C in tables.items()},
    }
    for T, C in tables.items():
        if not np.all(np.isfinite(C)):
            res.fail(f"T={T}: non-finite observability constant")
    done = sorted(tables)
    for t0, t1 in zip(done, done[1:]):
        if np.any(tables[t1] > tables[t0] * (1 + 1e-6)):
            res.fail(f"C_n increased from T={t0} to T={t1}")
    if gamma == 1.0:
        th = cfg["threshold"]
        tmus = (np.asarray(th["n"], dtype=float) * np.pi / Ly) ** 2
        try:
            mt = minimal_time_study(
                xi, om, [float(t) for t in th["T_list"]], tmus, int(th["N"]), int(th["steps"]), float(th["rel_width"]),
                workers=workers,
            )
        except RuntimeError as exc:
            res.fail(str(exc))
        else:
            summary.update(
                T_hat_star=mt.T_hat,
                bracket=list(mt.bracket),
                slopes={repr(k): v for k, v in sorted(mt.slopes.items())},
            )
            if mt.width > float(th["rel_width"]) * mt.T_hat + 1e-12:
                res.fail(f"bracket {mt.bracket} wider than {th['rel_width']}·T_hat")
    res.json("observability.json", summary)
    return res


def _smooth_source(grid):
    gx, gy = grid.axes[0], grid.grid_y
    return grid.sample(
        lambda x, y: np.sin(np.pi * (x - gx.a) / gx.length) * np.sin(np.pi * (y - gy.a) / gy.length) * (1 + 0.5 * x)
        + 0.5 * np.sin(2 * np.pi * (x - gx.a) / gx.length) * np.sin(3 * np.pi * (y - gy.a) / gy.length)
    )


def _pack_measurement(m, mask: np.ndarray) -> np.ndarray:
    """(n_window + 1, n_interior): ∂_t u rows on the window (zero off ω), then G u(T₁)."""
    rows = np.zeros((m.times.size + 1, mask.size))
    rows[:-1, mask] = m.dtu
    rows[-1] = m.Gu
    return rows


def _read_measurement(path: str, fmap, template):
    from .inverse_source import Measurement

    p = Path(path)
    try:
        if p.suffix == ".csv":
            header, data = formats.read_csv(p)
            arr = data[:, 1:]
        else:
            arr, _, _ = formats.read_block(p)
    except (OSError, formats.FormatError, ValueError) as exc:
        raise ConfigError(f"cannot read measurement {path}: {exc}") from exc
    want = (template.times.size + 1, fmap.mask.size)
    if arr.shape != want:
        raise ConfigError(f"measurement {path} has shape {arr.shape}, expected {want}")
    return Measurement(template.times, template.weights, arr[:-1, fmap.mask], arr[-1].copy(), template.cell_volume)


def run_invert(cfg: dict, workers: int) -> RunResult:
    from .inverse_source import (
        HypothesisError,
        SourceSpec,
        StabilityError,
        build_forward_map,
        forward_measurement,
        reconstruct_source,
        validate_source_spec,
    )

    gx, gy = _grid(cfg["grid_x"], "grid_x"), _grid(cfg["grid_y"], "grid_y")
    grid = build_tensor_grid(gx, gy)
    gamma = _gamma(cfg["gamma"])
    omega = _box(cfg["omega"], [gx, gy], "omega")
    T0, T1, dt = float(cfg["T0"]), _positive(cfg["T1"], "T1"), _positive(cfg["dt"], "dt")
    if not 0.0 <= T0 < T1:
        raise ConfigError("need 0 <= T0 < T1")
    _steps(T1, dt)
    Rc = cfg["R"]
    c0, ct, cx = float(Rc["c0"]), float(Rc["ct"]), float(Rc["cx"])
    if cfg["f"] not in ("smooth", "random"):
        raise ConfigError("f must be 'smooth' or 'random'")

    def R_fn(t, x):
        return c0 + ct * t + cx * x**2

    def dR_fn(t, x):
        return ct + 0.0 * x

    spec = SourceSpec.from_functions(grid, R_fn, None, T1, dt, dR_fn=dR_fn)
    if cfg["f"] == "smooth":
        f_true = _smooth_source(grid)
    else:
        f_true = np.random.default_rng(int(cfg["seed"])).standard_normal(grid.n_interior)
    spec = SourceSpec(spec.R, f_true, spec.times, spec.T1, spec.dR)
    res = RunResult()
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            R0, V = validate_source_spec(spec, T0, float(cfg["eta"]))
    except HypothesisError as exc:
        raise ConfigError(str(exc)) from exc
    for w in caught:
        log.warning("%s", w.message)
    fmap = build_forward_map(spec, gamma, omega, T0, grid, float(cfg["b"]))
    try:
        synthetic = forward_measurement(
            spec, None, gamma, omega, T0, grid, float(cfg["b"]), noise=float(cfg["noise"]), seed=int(cfg["seed"]), fmap=fmap
        )
    except StabilityError as exc:
        res.fail(str(exc))
        res.json("invert.json", {"chain_bound": False, "reason": str(exc)})
        return res
    if cfg["measurement"] is None:
        meas, truth = synthetic, f_true
        res.files["measurement.bin"] = formats.pack_block(_pack_measurement(meas, fmap.mask), dt, meas.times[0])
    else:
        meas, truth = _read_measurement(cfg["measurement"], fmap, synthetic), None
    out = reconstruct_source(
        meas, fmap, None, float(cfg["lam_reg"]), truth, float(cfg["rtol"]), _positive(cfg["maxiter"], "maxiter", integer=True)
    )
    X, Y = grid.mesh()
    res.csv("f_hat.csv", ["x", "y", "f_hat"], zip(X.ravel(), Y.ravel(), out.f_hat))
    res.json(
        "invert.json",
        {
            "rel_error": out.rel_error,
            "ratio": out.ratio,
            "iterations": out.iterations,
            "lam_reg": out.lam_reg,
            "R0": R0,
            "V_over_R0": V / R0,
            "chain_bound": True,
            "noise": float(cfg["noise"]),
        },
    )
    if out.rel_error is not None and out.rel_error > float(cfg["tol"]):
        res.fail(f"relative reconstruction error {out.rel_error:.3e} above {cfg['tol']}")
    return res


def run_control(cfg: dict, workers: int) -> RunResult:
    from .control import LAYOUTS, ControlError, lr_null_control

    gx, gy = _grid(cfg["grid_x"], "grid_x"), _grid(cfg["grid_y"], "grid_y")
    grid = build_tensor_grid(gx, gy)
    gamma = _gamma(cfg["gamma"])
    if gamma == 1.0:
        raise ConfigError("the control run needs gamma < 1 (an admissible dyadic schedule)")
    omega = _box(cfg["omega"], [gx, gy], "omega")
    T, dt = _positive(cfg["T"], "T"), _positive(cfg["dt"], "dt")
    _steps(T, dt)
    if cfg["layout"] not in LAYOUTS:
        raise ConfigError(f"layout must be one of {LAYOUTS}")
    modes = _modes(cfg["modes"])
    u0 = modal_datum(grid, modes)
    res = RunResult()
    try:
        signal, traj, report = lr_null_control(
            u0, gamma, grid, omega, T, _positive(cfg["J"], "J", integer=True), dt, _positive(cfg["eps0"], "eps0"),
            bool(cfg["relative_eps"]), bool(cfg["absorb_tail"]), cfg["layout"], b=float(cfg["b"]), rtol=float(cfg["rtol"]),
        )
    except ControlError as exc:
        res.json("control.json", {"error": str(exc), "partial": exc.partial.to_dict() if exc.partial else None})
        res.fail(str(exc))
        return res
    res.files["control.bin"] = formats.pack_block(signal.g, dt, 0.0)
    rep = report.to_dict()
    r = report.residuals
    rep["residuals_nonincreasing"] = bool(np.all(np.diff(r) <= 1e-12 * max(r.max(), 1e-300))) if r.size else True
    rep["passive_ok"] = all(b.passive_ok for b in report.blocks)
    res.json("control.json", rep)
    if not report.final_norm_rel <= float(cfg["target"]):
        res.fail(f"final norm ratio {report.final_norm_rel:.3e} above target {cfg['target']}")
    if not report.support_ok:
        res.fail("control leaves its space-time support")
    if not rep["passive_ok"]:
        res.fail("a passive phase contracted less than the free decay bound")
    if not np.isfinite(report.cost):
        res.fail("control cost is not finite")
    return res


def run_suite(cfg: dict, workers: int) -> RunResult:
    kinds = list(cfg["kinds"])
    unknown = [k for k in kinds if k not in RUNNERS or k == "full-suite"]
    if unknown:
        raise ConfigError(f"unknown suite members {unknown}")
    overrides = cfg["overrides"]
    if not isinstance(overrides, dict) or any(k not in kinds for k in overrides):
        raise ConfigError("overrides must map suite members to config objects")
    sub_cfgs = {k: deep_merge(defaults(k), {"seed": cfg["seed"], **overrides.get(k, {})}) for k in kinds}
    res = RunResult()
    status = {}
    for k in kinds:
        log.info("suite: %s", k)
        sub = RUNNERS[k](sub_cfgs[k], workers)
        for name, data in sub.files.items():
            res.files[f"{k}/{name}"] = data
        status[k] = {"ok": sub.ok, "failures": sub.failures}
        for msg in sub.failures:
            res.failures.append(f"{k}: {msg}")
    res.json("suite.json", status)
    return res


RUNNERS = {
    "spectrum": run_spectrum,
    "scaling": run_scaling,
    "evolve": run_evolve,
    "carleman-verify": run_carleman,
    "lr-schedule": run_lr,
    "observability": run_observability,
    "invert": run_invert,
    "control": run_control,
    "full-suite": run_suite,
}


# --- driver -------------------------------------------------------------------------


def _versions() -> dict:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    import scipy

    return {
        "grushinlab": own,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


@dataclass(frozen=True)
class RunOutcome:
    code: int
    run_dir: Path | None
    failures: list


def run(kind: str, cfg: dict, out_root: str | Path | None = None) -> RunOutcome:
    """Execute one experiment and write its run directory (single writer)."""
    if kind not in RUNNERS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    workers = int(os.environ.get("GRUSHIN_WORKERS") or cfg.get("workers") or 1)
    if workers < 1:
        raise ConfigError("workers must be positive")
    root = Path(out_root or os.environ.get("GRUSHIN_OUT") or "runs")
    digest = config_hash(kind, cfg)
    run_dir = root / f"{kind}-{digest}"
    t0 = time.perf_counter()
    result = RUNNERS[kind](cfg, workers)
    elapsed = time.perf_counter() - t0
    run_dir.mkdir(parents=True, exist_ok=True)
    checksums = {}
    for name in sorted(result.files):
        path = run_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(result.files[name])
        checksums[name] = hashlib.sha256(result.files[name]).hexdigest()
    manifest = {
        "manifest_version": 1,
        "kind": kind,
        "config_hash": digest,
        "config": cfg,
        "versions": _versions(),
        "files": checksums,
        "ok": result.ok,
        "failures": result.failures,
    }
    formats.write_json(run_dir / "manifest.json", manifest)
    formats.write_json(run_dir / "timings.json", {"kind": kind, "seconds": elapsed, "workers": workers})
    return RunOutcome(EXIT_OK if result.ok else EXIT_VERIFY, run_dir, result.failures)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grushinlab", description="Grushin-type degenerate parabolic experiments.")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--config", help="JSON config (or a previous run's manifest.json)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one dotted config key")
    p.add_argument("--print-defaults", action="store_true", help="print the default config tree and exit")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    if args.print_defaults:
        sys.stdout.write(formats.json_text(defaults(args.kind)))
        return EXIT_OK
    try:
        file_cfg = load_config_file(args.config) if args.config else None
        cfg = build_config(args.kind, file_cfg, args.set)
        outcome = run(args.kind, cfg)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return EXIT_CONFIG
    print(outcome.run_dir)
    for msg in outcome.failures:
        log.error("%s", msg)
    return outcome.code


if __name__ == "__main__":
    sys.exit(main())
