import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from grushinlab.control import (
    BlockProblem,
    ControlError,
    block_control,
    lr_null_control,
    modal_data,
    scalar_lq_cost,
)
from grushinlab.domain import Grid1D, build_tensor_grid, subdomain_indices
from grushinlab.operators import assemble_full_operator
from grushinlab.spectral import block_members, complete_basis

OMEGA = [(0.5, 0.8), (0.2, 0.8)]


@pytest.fixture(scope="module")
def small():
    g = build_tensor_grid(Grid1D(-1, 1, 17), Grid1D(0, 1, 13))
    basis = complete_basis(g.grid_y)
    A = assemble_full_operator(g, 0.5, 1.0, basis)
    blk = block_members(basis, 3)
    Phi = basis.phi[np.asarray(blk.members)]
    P = np.kron(np.eye(g.x_part.n_interior), Phi.T) / np.sqrt(g.cell_volume / g.grid_y.h)
    u = g.sample(lambda x, y: (1 - x**2) * np.sin(np.pi * y) * (1 + y))
    return g, basis, A, blk, P, u


def _problem(small, box, modal=False):
    g, basis, A, blk, P, _ = small
    md = modal_data(g, 0.5, basis, blk.members, box) if modal else None
    return BlockProblem(A, g.cell_volume, subdomain_indices(g, box).interior_mask(), P, 0.01, md)


def test_scalar_lq_oracle():
    lam, u0, tau, eps = 3.0, 1.0, 1.0, 1e-3
    exact_cost, exact_final = scalar_lq_cost(lam, u0, tau, eps)
    errs = []
    for m in (100, 200, 400):
        prob = BlockProblem(sp.csr_matrix([[lam]]), 1.0, np.array([True]), np.array([[1.0]]), tau / m)
        seg = block_control(prob, np.array([u0]), m, eps)
        errs.append(abs(seg.cost - exact_cost))
        assert seg.residual <= eps
        assert seg.residual == pytest.approx(abs(exact_final), rel=1e-2)
    # backward Euler: first order
    assert np.all(np.log2(np.array(errs[:-1]) / errs[1:]) > 0.9)


def test_assembled_gramian_matches_matrix_free(small):
    prob = _problem(small, OMEGA, modal=True)
    r = prob.P.shape[1]
    Gm = prob.assembled_gramian(20)
    Gf = np.column_stack([prob.gramian(e, 20) for e in np.eye(r)])
    np.testing.assert_allclose(Gm, Gf, rtol=0, atol=1e-12 * np.abs(Gm).max())


def test_both_gramian_routes_give_same_control(small):
    u = small[5]
    prob = _problem(small, OMEGA, modal=True)
    a = block_control(prob, u, 20, 1e-3, gramian="assembled")
    b = block_control(prob, u, 20, 1e-3, gramian="matrix-free")
    assert a.cost == pytest.approx(b.cost, rel=1e-9)
    np.testing.assert_allclose(a.g, b.g, atol=1e-8 * np.abs(a.g).max())


def test_zero_state_zero_control(small):
    prob = _problem(small, OMEGA)
    seg = block_control(prob, np.zeros(prob.n), 10, 1e-3)
    assert seg.cost == 0.0 and not seg.g.any() and seg.residual == 0.0


def test_bad_arguments(small):
    prob = _problem(small, OMEGA)
    with pytest.raises(ValueError):
        block_control(prob, small[5], 0, 1e-3)
    with pytest.raises(ValueError):
        block_control(prob, small[5], 5, 0.0)
    with pytest.raises(ValueError):
        block_control(prob, small[5], 5, 1e-3, gramian="dense")


def test_penalized_cost_nonincreasing_as_omega_grows(small):
    u, eps = small[5], 1e-3
    boxes = [OMEGA, [(0.4, 0.9), (0.2, 0.8)], [(0.2, 0.9), (0.1, 0.9)], [(-1, 1), (0, 1)]]
    J = []
    for box in boxes:
        seg = block_control(_problem(small, box), u, 20, eps)
        J.append(seg.cost + seg.residual**2 / eps)
    assert np.all(np.diff(J) <= 1e-9 * np.array(J[:-1]))


def test_duality_lower_bound(small):
    # ‖Π L g‖² ≤ λ_max(Π L L* Π)‖g‖² for every control g
    u = small[5]
    prob = _problem(small, OMEGA, modal=True)
    seg = block_control(prob, u, 20, 1e-3, with_gramian=True)
    moved = prob.coeffs(seg.final_state) - prob.coeffs(prob.evolve(u, 20))
    assert seg.cost >= (moved @ moved) / seg.gramian_max * (1 - 1e-9)


def test_cg_failure_reported(small):
    u = small[5]
    prob = _problem(small, OMEGA)
    with pytest.raises(ControlError):
        block_control(prob, u, 20, 1e-3, maxiter=1)


@pytest.fixture(scope="module")
def lr_runs(small):
    g = small[0]
    u0 = g.sample(lambda x, y: (1 - x**2) * np.sin(np.pi * y) + 0.3 * (1 - x**2) * x * np.sin(2 * np.pi * y))
    return u0, {T: lr_null_control(u0, 0.5, g, OMEGA, T, J=4, dt=T / 400) for T in (0.5, 1.0, 2.0)}


def test_lr_support_and_passive_decay(lr_runs):
    _, runs = lr_runs
    for sig, _, rep in runs.values():
        assert sig.support_ok() and rep.support_ok
        assert all(b.passive_ok for b in rep.blocks)
        assert np.isfinite(rep.cost)


def test_lr_residuals_nonincreasing(lr_runs):
    _, runs = lr_runs
    for _, _, rep in runs.values():
        assert np.all(np.diff(rep.residuals) <= 0)


def test_doubling_T_never_hurts(lr_runs):
    _, runs = lr_runs
    rel = [runs[T][2].final_norm_rel for T in (0.5, 1.0, 2.0)]
    assert np.all(np.diff(rel) <= 0)


def test_reported_final_matches_trajectory(lr_runs, small):
    g = small[0]
    _, runs = lr_runs
    sig, traj, rep = runs[1.0]
    assert rep.final_norm == pytest.approx(g.norm(traj.final), rel=1e-12)
    assert rep.cost == pytest.approx(sig.cost, rel=1e-12)


def test_zero_initial_state(small):
    g = small[0]
    sig, traj, rep = lr_null_control(np.zeros(g.n_interior), 0.5, g, OMEGA, 1.0, J=3, dt=0.01)
    assert not sig.g.any() and not traj.states.any()
    assert rep.final_norm == 0.0 and rep.final_norm_rel == 0.0


@given(st.sampled_from(["first", "last"]))
def test_layout_flag(small, layout):
    g = small[0]
    u0 = g.sample(lambda x, y: (1 - x**2) * np.sin(np.pi * y))
    sig, _, rep = lr_null_control(u0, 0.5, g, OMEGA, 1.0, J=3, dt=0.01, layout=layout)
    assert rep.layout == layout and sig.support_ok()
    b = rep.blocks[-1]
    if layout == "first":
        assert b.active[1] == pytest.approx(b.passive[0])
    else:
        assert b.passive[1] == pytest.approx(b.active[0])


def test_unknown_layout(small):
    with pytest.raises(ValueError):
        lr_null_control(small[5], 0.5, small[0], OMEGA, 1.0, layout="middle")
