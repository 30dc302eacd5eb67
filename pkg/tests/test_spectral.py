import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from grushinlab.domain import Grid1D, build_tensor_grid, full_box, subdomain_indices
from grushinlab.spectral import (
    ResolutionError,
    block_members,
    block_min_index,
    complete_basis,
    dirichlet_eigenpairs,
    fit_spectral_growth,
    project_block,
    spectral_inequality_constant,
)

# 2×2 restricted mass on (0.3, 0.5), N = 201, smallest eigenvalue from the quadratic formula
C_EMP_MU50 = 36.62856971851357


def test_sine_spectrum_on_pi():
    b = dirichlet_eigenpairs(Grid1D(0, np.pi, 101), 4)
    np.testing.assert_allclose(b.mu[:2], [1.0, 4.0], rtol=1e-14)


def test_unit_interval_second_eigenvalue():
    b = dirichlet_eigenpairs(Grid1D(0, 1, 101), 3)
    assert b.mu[1] == pytest.approx(4 * np.pi**2, rel=1e-14)
    assert b.mu[1] == pytest.approx(39.478, abs=1e-3)


def test_fd_eigensolve_against_analytic():
    g = Grid1D(0, 1, 201)
    fd = dirichlet_eigenpairs(g, 5, "fd")
    an = dirichlet_eigenpairs(g, 5)
    assert abs(fd.mu[0] / an.mu[0] - 1) <= 1e-3
    # the tridiagonal spectrum is known in closed form too
    np.testing.assert_allclose(fd.mu, an.mu_fd, rtol=1e-11)


def test_orthonormal_basis():
    b = complete_basis(Grid1D(0, 2, 41))
    assert b.orthonormality_defect < 1e-12


def test_too_many_modes():
    with pytest.raises(ResolutionError):
        dirichlet_eigenpairs(Grid1D(0, 1, 11), 6)


def test_block_membership():
    b = dirichlet_eigenpairs(Grid1D(0, 1, 201), 20)
    assert block_members(b, 2).mode_numbers == [1]
    assert block_members(b, 3).mode_numbers == [1, 2]
    assert block_members(b, 1).mode_numbers == []
    assert len(block_members(b, 30)) == b.n_modes


@given(st.floats(1.0, 1e8))
def test_block_min_index_is_minimal(mu):
    j = block_min_index(mu)
    assert mu <= 4.0**j
    assert j == 1 or mu > 4.0 ** (j - 1)


def _tensor():
    grid = build_tensor_grid(Grid1D(-1, 1, 15), Grid1D(0, 1, 21))
    return grid, complete_basis(grid.grid_y)


def test_projection_identity_on_block():
    grid, b = _tensor()
    X, _ = grid.mesh()
    u = (np.cos(X) * b.phi[0][None, :]).ravel()
    np.testing.assert_allclose(project_block(u, b, 2, grid.x_part.n_interior), u, atol=1e-12)


@given(st.integers(1, 4), st.integers(0, 2**31))
def test_projection_idempotent_and_pythagoras(j, seed):
    grid, b = _tensor()
    nx = grid.x_part.n_interior
    u = np.random.default_rng(seed).standard_normal(grid.n_interior)
    p = project_block(u, b, j, nx)
    np.testing.assert_allclose(project_block(p, b, j, nx), p, atol=1e-12)
    total = grid.inner(u, u)
    assert grid.inner(p, p) + grid.inner(u - p, u - p) == pytest.approx(total, rel=1e-10)


def test_full_observation_constant_is_one():
    g = Grid1D(0, 1, 101)
    b = dirichlet_eigenpairs(g, 20)
    r = spectral_inequality_constant(b, subdomain_indices(g, full_box(g)), 1000.0)
    assert r.C_emp == pytest.approx(1.0, abs=1e-10)


def test_two_mode_constant_matches_quadratic_formula():
    g = Grid1D(0, 1, 201)
    b = dirichlet_eigenpairs(g, 20)
    r = spectral_inequality_constant(b, subdomain_indices(g, [(0.3, 0.5)]), 50.0)
    assert r.n_modes == 2
    # independent oracle: mass entries by direct summation of the sine samples
    y = g.nodes
    sel = (y > 0.3 + 1e-9) & (y < 0.5 - 1e-9)
    s1, s2 = np.sqrt(2) * np.sin(np.pi * y[sel]), np.sqrt(2) * np.sin(2 * np.pi * y[sel])
    a, m, c = g.h * s1 @ s1, g.h * s1 @ s2, g.h * s2 @ s2
    lam_min = 0.5 * ((a + c) - np.sqrt((a - c) ** 2 + 4 * m * m))
    assert r.C_emp == pytest.approx(1 / lam_min, rel=1e-12)
    assert r.C_emp == pytest.approx(C_EMP_MU50, rel=1e-10)


def test_constant_monotone_in_mu():
    g = Grid1D(0, 1, 201)
    b = dirichlet_eigenpairs(g, 30)
    om = subdomain_indices(g, [(0.3, 0.5)])
    mus = [20.0, 50.0, 100.0, 200.0, 300.0, 400.0]
    Cs = [spectral_inequality_constant(b, om, m).C_emp for m in mus]
    assert np.all(np.diff(Cs) >= 0)
    fit = fit_spectral_growth([spectral_inequality_constant(b, om, m) for m in mus])
    assert np.isfinite(fit.slope) and fit.residual < 1.0
