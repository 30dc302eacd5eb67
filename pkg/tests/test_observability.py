import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from grushinlab.domain import Grid1D, build_tensor_grid
from grushinlab.lr_schedule import build_schedule
from grushinlab.observability import (
    NonObservableError,
    SpectralPencil,
    dense_obs_constant,
    empirical_obs_constant,
    fit_negative_power,
    full_observability_check,
    growth_slope,
    lr_surrogate_constants,
    mode_obs_constant,
    mode_problem,
    reduced_pencil,
    trapezoid_geometric,
    uniformity_study,
)

# sup_{n ≤ 20} C_n, γ = 0.5, x ∈ (−1, 1), ω₁ = (0.5, 0.8), T = 0.5, N = 101, 1000 BE steps
SUP_C_T05 = 42.35995056842069


def test_trapezoid_geometric_matches_direct_sum():
    q, K, dt = np.array([0.3, 0.9, 1.0, 1 - 1e-7, 1 + 1e-9]), 1000, 0.01
    k = np.arange(K + 1)
    w = np.full(K + 1, dt)
    w[[0, -1]] *= 0.5
    direct = np.array([w @ qq**k for qq in q])
    np.testing.assert_allclose(trapezoid_geometric(q, K, dt), direct, rtol=1e-9)


@given(st.integers(0, 2**31))
def test_power_iteration_matches_dense(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((6, 6))
    Y = rng.standard_normal((6, 6))
    pen = SpectralPencil(X @ X.T, Y @ Y.T + np.eye(6))
    rep = empirical_obs_constant(pen, tol=1e-12, max_iter=20000)
    assert rep.C_obs == pytest.approx(dense_obs_constant(pen), rel=1e-6)


def test_singular_pencil_detected():
    r = np.array([0.9, 0.8])
    with pytest.raises(NonObservableError):
        reduced_pencil(r, np.array([[1.0, 0.0]]), 10, 0.1, reg=0.0)


@pytest.fixture(scope="module")
def coarse():
    return mode_problem(0.5, (-1, 1), (0.5, 0.8), 0.5, 21, 0.005)


@pytest.mark.parametrize("mu", [np.pi**2, 4 * np.pi**2])
def test_reduced_and_evolution_pencils_agree(coarse, mu):
    red = coarse.mode_pencil(mu)
    ev = coarse.mode_pencil(mu, "evolution")
    c = mode_obs_constant(coarse, mu).C_obs
    assert c == pytest.approx(dense_obs_constant(red), rel=1e-9)
    assert red.svd_constant() == pytest.approx(dense_obs_constant(red), rel=1e-9)
    assert dense_obs_constant(ev) == pytest.approx(c, rel=1e-6)
    assert empirical_obs_constant(ev).C_obs == pytest.approx(c, rel=1e-6)


def test_evolution_pencil_symmetric(coarse):
    A, B = coarse.mode_pencil(9.0, "evolution").dense()
    assert np.all(np.linalg.eigvalsh(B) > 0)
    assert np.all(np.linalg.eigvalsh(A) > -1e-12)


@pytest.mark.parametrize("mu", [1.0, 100.0, 1000.0])
def test_full_observation_bound(mu):
    T = 0.5
    p = mode_problem(0.5, (-1, 1), (-1, 1), T, 41, T / 200)
    assert mode_obs_constant(p, mu).C_obs <= 1 / T


def test_constant_nonincreasing_in_T():
    cs = [mode_obs_constant(mode_problem(0.5, (-1, 1), (0.5, 0.8), T, 41, 0.005), 4 * np.pi**2).C_obs for T in (0.2, 0.4, 0.8)]
    assert np.all(np.diff(cs) <= 1e-6 * np.array(cs[:-1]))


def test_frozen_uniformity_baseline():
    p = mode_problem(0.5, (-1, 1), (0.5, 0.8), 0.5, 101, 0.5 / 1000)
    ns = np.arange(1, 21)
    tab = uniformity_study(p, (ns * np.pi) ** 2, ns, workers=1)
    assert tab.sup == pytest.approx(SUP_C_T05, rel=1e-6)
    assert np.all(np.isfinite(tab.C))
    assert tab.tail_nonincreasing()


def test_growth_slope_and_power_fit():
    mus = np.array([1.0, 4.0, 9.0, 16.0])
    assert growth_slope(mus, np.exp(3 * np.sqrt(mus) + 1)) == pytest.approx(3.0)
    Ts = np.array([0.2, 0.5, 1.0])
    c0, c1 = fit_negative_power(Ts, np.exp(2 + 0.5 * Ts**-3), 3)
    assert (c0, c1) == (pytest.approx(2.0), pytest.approx(0.5))


def test_full_system_check_converges_in_modes():
    grid = build_tensor_grid(Grid1D(-1, 1, 21), Grid1D(0, 1, 33))
    res = full_observability_check(grid, 0.5, [(0.5, 0.8), (0.2, 0.8)], 0.5, 0.005, n_modes=4)
    assert np.isfinite(res.report.C_obs) and res.report.C_obs > 0
    # more y-modes enlarge the data space, so the constant can only grow
    assert res.refinement.C_obs >= res.report.C_obs * (1 - 1e-6)
    assert res.relative_change < 1e-2


def test_lr_surrogates_positive():
    grid = build_tensor_grid(Grid1D(-1, 1, 21), Grid1D(0, 1, 33))
    s = build_schedule(1.0, 0.5)
    c = lr_surrogate_constants(grid, 0.5, [(0.5, 0.8), (0.2, 0.8)], s, 1.0, n_max=3, steps=50)
    assert min(c.C1, c.C2, c.C3) > 0
    assert 1 not in c.block_C  # π² > 4, so E_1 is empty
    assert all(np.isfinite(v) for v in c.block_C.values())
