import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from grushinlab.domain import Grid1D, as_tensor_grid, build_tensor_grid
from grushinlab.inverse_source import (
    HypothesisError,
    SourceSpec,
    StabilityError,
    build_forward_map,
    chain_bound_margin,
    forward_measurement,
    lipschitz_ratio,
    mode_ratio,
    reconstruct_source,
    refined_measurement,
    uniform_mode_ratio_study,
    validate_source_spec,
    variation_threshold_study,
)
from grushinlab.operators import assemble_mode_operator

OMEGA = [(0.5, 0.8), None]
# max over 100 standard normal f (seed 7) of ‖f‖²/‖F f‖² on the fixture below
MAX_RANDOM_RATIO = 0.9182216798736917


def R_slow(t, x):
    return 1 + 0.1 * t + 0 * x


@pytest.fixture(scope="module")
def setup():
    g = build_tensor_grid(Grid1D(-1, 1, 17), Grid1D(0, 1, 11))
    spec = SourceSpec.from_functions(g, R_slow, lambda x, y: np.cos(x) * np.sin(np.pi * y), 0.5, 0.01)
    return g, spec, build_forward_map(spec, 0.5, OMEGA, 0.25, g)


@given(st.integers(0, 2**31))
def test_adjoint_consistency(setup, seed):
    g, _, fm = setup
    rng = np.random.default_rng(seed)
    f, fp = rng.standard_normal((2, fm.n))
    lhs = fm.apply(f).inner(fm.apply(fp))
    rhs = g.cell_volume * f @ fm.adjoint(fm.apply(fp))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_adjoint_batched(setup):
    _, _, fm = setup
    fs = np.random.default_rng(1).standard_normal((fm.n, 3))
    batch = fm.adjoint(fm.apply(fs))
    for i in range(3):
        np.testing.assert_allclose(batch[:, i], fm.normal(fs[:, i]), rtol=1e-12, atol=1e-14)


def test_linearity_and_zero(setup):
    _, _, fm = setup
    rng = np.random.default_rng(2)
    f1, f2 = rng.standard_normal((2, fm.n))
    m = fm.apply(2 * f1 - 3 * f2)
    m1, m2 = fm.apply(f1), fm.apply(f2)
    np.testing.assert_allclose(m.dtu, 2 * m1.dtu - 3 * m2.dtu, atol=1e-12)
    np.testing.assert_allclose(m.Gu, 2 * m1.Gu - 3 * m2.Gu, atol=1e-10)
    z = fm.apply(np.zeros(fm.n))
    assert not z.dtu.any() and not z.Gu.any()


def test_R0_and_variation():
    g = Grid1D(0, 1, 11)
    spec = SourceSpec.from_functions(g, lambda t, x: 1 + t + 0 * x, None, 1.0, 0.01)
    assert spec.R0 == pytest.approx(2.0)
    assert spec.variation() == pytest.approx(1.0, rel=1e-12)
    with pytest.warns(UserWarning):
        assert validate_source_spec(spec) == (pytest.approx(2.0), pytest.approx(1.0, rel=1e-12))


def test_R_touching_zero_rejected():
    g = Grid1D(0, 1, 11)
    spec = SourceSpec.from_functions(g, lambda t, x: x * (1 - x) * (1 - t), None, 1.0, 0.01)
    with pytest.raises(HypothesisError):
        validate_source_spec(spec)
    bad = SourceSpec.from_functions(g, lambda t, x: 1 + 0 * x, None, 1.0, 0.1).R.copy()
    bad[0, 0] = np.nan
    with pytest.raises(HypothesisError):
        SourceSpec(bad, np.zeros(9), np.linspace(0, 1, 11), 1.0)


@given(st.floats(1e-3, 1e3))
def test_ratio_homogeneity(setup, s):
    g, spec, fm = setup
    f = spec.f
    r = lipschitz_ratio(f, fm.apply(f))
    assert lipschitz_ratio(s * f, fm.apply(s * f)) == pytest.approx(r, rel=1e-10)
    scaled = build_forward_map(SourceSpec(s * spec.R, f, spec.times, spec.T1), 0.5, OMEGA, 0.25, g)
    assert lipschitz_ratio(f, scaled.apply(f)) == pytest.approx(r / s**2, rel=1e-10)


def test_zero_source_has_no_ratio(setup):
    _, _, fm = setup
    assert lipschitz_ratio(np.zeros(fm.n), fm.apply(np.zeros(fm.n))) is None


def test_chain_bound_on_run(setup):
    g, spec, fm = setup
    m = fm.apply(spec.f, keep_final=True)
    assert chain_bound_margin(spec.f, m, spec.R0) >= 0
    assert chain_bound_margin(spec.f, m, 100 * spec.R0) < 0  # the bound is not vacuous
    with pytest.raises(StabilityError):
        lipschitz_ratio(spec.f, m - m)


def test_regularization_ladder(setup):
    _, spec, fm = setup
    m = fm.apply(spec.f)
    errs = [reconstruct_source(m, fm, lam_reg=lam, f_true=spec.f).rel_error for lam in (1e-4, 1e-6, 1e-8)]
    assert np.all(np.diff(errs) < 0)
    assert errs[-1] < 1e-6


def test_reconstruction_with_initial_state(setup):
    g, spec, fm = setup
    u0 = g.sample(lambda x, y: (1 - x**2) * np.sin(2 * np.pi * y))
    m = fm.apply(spec.f, u0)
    assert reconstruct_source(m, fm, u0, f_true=spec.f).rel_error < 1e-3


def test_zero_measurement_zero_source(setup):
    _, _, fm = setup
    res = reconstruct_source(fm.apply(np.zeros(fm.n)), fm)
    assert not res.f_hat.any() and res.iterations == 0


def test_noise_stays_bounded(setup):
    g, spec, fm = setup
    m = forward_measurement(spec, None, 0.5, OMEGA, 0.25, g, noise=0.01, seed=1, fmap=fm)
    res = reconstruct_source(m, fm, lam_reg=1e-6, f_true=spec.f)
    assert np.all(np.isfinite(res.f_hat))
    assert res.rel_error < 0.05


def test_random_sources_frozen_ratio(setup):
    _, _, fm = setup
    fs = np.random.default_rng(7).standard_normal((fm.n, 100))
    ratios = [lipschitz_ratio(fs[:, i], fm.apply(fs[:, i])) for i in range(100)]
    assert np.all(np.isfinite(ratios))
    assert max(ratios) == pytest.approx(MAX_RANDOM_RATIO, rel=1e-8)


@pytest.fixture(scope="module")
def ground_mode():
    gx = as_tensor_grid(Grid1D(-1, 1, 41))
    op = assemble_mode_operator(gx, np.pi**2, 0.5)
    lam, V = np.linalg.eigh(op.matrix.toarray())
    return gx, lam[0], V[:, 0] / np.sqrt(gx.cell_volume)


def test_single_mode_duhamel(ground_mode):
    # R = 1, f = v with Av = λv: ∂_t u = e^{−λt} v and Au(T₁) = (1 − e^{−λT₁}) v
    gx, lam, v = ground_mode
    errs = []
    for dt in (0.01, 0.005, 0.0025):
        spec = SourceSpec.from_functions(gx, lambda t, x: 1 + 0 * x, v, 0.5, dt)
        fm = build_forward_map(spec, 0.5, [(0.5, 0.8)], 0.25, gx, mu=np.pi**2)
        m = fm.apply(v)
        ex = np.exp(-lam * m.times)[:, None] * v[fm.mask][None]
        errs.append(max(np.abs(m.dtu - ex).max(), np.abs(m.Gu - (1 - np.exp(-lam * 0.5)) * v).max()))
    assert np.all(np.log2(np.array(errs[:-1]) / errs[1:]) > 1.9)


def test_mode_ratio_joint_dominates_random(ground_mode):
    gx, _, _ = ground_mode
    spec = SourceSpec.from_functions(gx, R_slow, None, 0.5, 0.01)
    fm = build_forward_map(spec, 0.5, [(0.5, 0.8)], 0.25, gx, mu=np.pi**2)
    joint, rnd = mode_ratio(fm, 20, 0)
    assert np.isfinite(joint) and joint >= rnd > 0


def test_uniform_study_shapes():
    ns = (1, 2, 4)
    tab = uniform_mode_ratio_study(0.5, (-1, 1), (0.5, 0.8), R_slow, 0.25, 0.5, [(n * np.pi) ** 2 for n in ns], N=41, dt=0.01)
    assert tab.n.tolist() == [1, 2, 3]
    assert np.all(np.isfinite(tab.sup_joint)) and np.all(tab.sup_joint >= tab.max_random)


def test_refined_measurement_close_to_coarse(setup):
    g, spec, fm = setup

    def f_fn(x, y):
        return np.cos(x) * np.sin(np.pi * y)

    fine = refined_measurement(R_slow, f_fn, g, 0.5, OMEGA, 0.25, 0.5, 0.01)
    coarse = fm.apply(spec.f)
    assert fine.dtu.shape == coarse.dtu.shape
    diff = (fine - coarse).norm_sq / coarse.norm_sq
    assert 0 < diff < 0.05


@pytest.fixture(scope="module")
def thresholds():
    g = build_tensor_grid(Grid1D(-1, 1, 11), Grid1D(0, 1, 7))
    return variation_threshold_study(0.5, g, [(0.5, 0.8), (0.2, 0.8)], 0.5, [0.0, 0.25], [0.5, 2, 8, 32, 128], 0.01)


def test_variation_scan_ratios(thresholds):
    # R₀ = 1 and V = s (T₁ − T₀)^{1/2} for R = 1 + s(t − T₁)
    for r in thresholds:
        np.testing.assert_allclose(r.ratios, np.array([0, 0.5, 2, 8, 32, 128]) * np.sqrt(0.5 - r.T0), rtol=1e-10, atol=1e-12)


def test_variation_threshold_constants(thresholds):
    for r in thresholds:
        assert r.constants[0] <= 2.0  # chain bound with R₀ = 1
        assert r.eta_hat in r.ratios
        k = int(np.flatnonzero(r.ratios == r.eta_hat)[0])
        assert np.all(r.constants[: k + 1] <= 10 * r.constants[0])
        assert k + 1 == r.ratios.size or r.constants[k + 1] > 10 * r.constants[0]
