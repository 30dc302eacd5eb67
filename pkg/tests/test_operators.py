import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import eigh_tridiagonal

from grushinlab.domain import Grid1D, build_tensor_grid
from grushinlab.operators import (
    assemble_full_operator,
    assemble_mode_operator,
    check_gamma,
    fit_scaling_law,
    smallest_eigenvalue,
)
from grushinlab.spectral import complete_basis


def _tridiag_ground(g: Grid1D, mu: float, gamma: float) -> float:
    """Independent assembly: 3-point Laplacian plus μ|x|^{2γ} on the diagonal."""
    x = g.interior
    d = 2.0 / g.h**2 + mu * np.abs(x) ** (2 * gamma)
    e = np.full(x.size - 1, -1.0 / g.h**2)
    return float(eigh_tridiagonal(d, e, select="i", select_range=(0, 0), eigvals_only=True)[0])


def test_pure_laplacian_ground_state():
    g = Grid1D(0, 1, 401)
    lam = smallest_eigenvalue(assemble_mode_operator(g, 0.0, 0.5)).value
    assert abs(lam / np.pi**2 - 1) < 1e-3
    # the 3-point spectrum is exact: (4/h²) sin²(πh/2)
    assert lam == pytest.approx(4 / g.h**2 * np.sin(np.pi * g.h / 2) ** 2, rel=1e-9)


def test_potential_vanishes_at_origin():
    g = Grid1D(-1, 1, 11)
    for gamma in (0.25, 0.5, 1.0):
        op = assemble_mode_operator(g, 123.0, gamma)
        assert op.potential[np.argmin(np.abs(g.interior))] == 0.0
        assert op.symmetry_defect() == 0.0


def test_gamma_range():
    for bad in (0.0, -0.5, 1.5, np.nan):
        with pytest.raises(ValueError):
            check_gamma(bad)


def test_harmonic_oscillator_limit():
    g = Grid1D(-1, 1, 2001)
    mu = 1e6
    res = smallest_eigenvalue(assemble_mode_operator(g, mu, 1.0))
    assert 0.9 <= res.value / np.sqrt(mu) <= 1.1
    assert res.value == pytest.approx(_tridiag_ground(g, mu, 1.0), rel=1e-8)


@given(st.sampled_from([0.25, 0.5, 0.75, 1.0]), st.floats(0.0, 1e4))
def test_eigenvalue_matches_tridiagonal_oracle(gamma, mu):
    g = Grid1D(-1, 1, 101)
    lam = smallest_eigenvalue(assemble_mode_operator(g, mu, gamma)).value
    assert lam == pytest.approx(_tridiag_ground(g, mu, gamma), rel=1e-8)


def test_eigenvalue_nondecreasing_in_mu():
    g = Grid1D(-1, 1, 201)
    lams = [smallest_eigenvalue(assemble_mode_operator(g, m, 0.5)).value for m in np.geomspace(1, 1e5, 8)]
    assert np.all(np.diff(lams) >= 0)


@pytest.mark.parametrize("gamma", [0.5, 1.0])
def test_scaling_exponent(gamma):
    g = Grid1D(-1, 1, 1001)
    mus = np.geomspace(1e2, 1e6, 7)
    pairs = [(m, smallest_eigenvalue(assemble_mode_operator(g, m, gamma)).value) for m in mus]
    fit = fit_scaling_law(pairs, gamma)
    assert abs(fit.exponent - 1 / (1 + gamma)) <= 0.05
    assert fit.c_star <= fit.c_star_upper


def test_scaling_fit_needs_three_decades():
    with pytest.raises(ValueError):
        fit_scaling_law([(m, m**0.5) for m in np.geomspace(1, 100, 6)], 1.0)


def _tensor():
    grid = build_tensor_grid(Grid1D(-1, 1, 17), Grid1D(0, 1, 13))
    return grid, complete_basis(grid.grid_y)


def test_full_operator_acts_modewise():
    grid, basis = _tensor()
    G = assemble_full_operator(grid, 0.5, 1.0, basis)
    v = np.sin(np.pi * (grid.x_part.axes[0].interior + 1) / 2) + 0.3
    for n in (1, 4):
        u = np.outer(v, basis.phi[n - 1]).ravel()
        Gn = assemble_mode_operator(grid.x_part, basis.mu[n - 1], 0.5).matrix
        expect = np.outer(Gn @ v, basis.phi[n - 1]).ravel()
        np.testing.assert_allclose(G @ u, expect, atol=1e-10 * np.abs(expect).max())


def test_full_operator_symmetric():
    grid, basis = _tensor()
    G = assemble_full_operator(grid, 0.75, 1.0, basis)
    assert abs(G - G.T).max() == 0.0


@given(st.integers(0, 2**31))
def test_full_operator_positive(seed):
    grid, basis = _tensor()
    G = assemble_full_operator(grid, 0.25, 1.0, basis)
    u = np.random.default_rng(seed).standard_normal(grid.n_interior)
    assert u @ (G @ u) > 0
