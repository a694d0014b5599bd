import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from delaybsde.bsde_solver import SolverConfig, solve
from delaybsde.delay_kernel import make_delay_measure
from delaybsde.generators import Affine, LinearY, LinearZ, TanhGenerator, ZeroGenerator, make_terminal
from delaybsde.levy_paths import LevyModel, build_time_grid, simulate_ensemble
from delaybsde.malliavin import (ConfigurationError, DerivativePoint, JumpDerivativeDriver, brownian_derivative_bsde,
                                 derivative_bsde, derivative_points, estimator_agreement, jump_derivative_bsde,
                                 picard_difference, psi, resolve_on_perturbed, trace_check)
from delaybsde.regression import state_features

DIRAC0 = make_delay_measure("dirac")
JUMP = LevyModel(marks=((1.0, 2.0),))
TWO_MARKS = LevyModel(marks=((0.5, 1.0), (-1.5, 0.5)))


@pytest.fixture(scope="module")
def jens():
    return simulate_ensemble(JUMP, build_time_grid(1.0, 10), 2000, 4)


@pytest.fixture(scope="module")
def bens():
    return simulate_ensemble(LevyModel(), build_time_grid(1.0, 10), 2000, 8)


def MT(e):
    return e.M[:, -1, 0]


# -- the increment quotient ------------------------------------------------------------------


def test_brownian_functional_has_zero_difference(jens):
    assert picard_difference(lambda e: e.W[:, -1] ** 3, jens, 5, 0.3, 0) == 0.0


@pytest.mark.parametrize("s", [0.0, 0.35, 0.9])
def test_difference_of_compensated_sum(jens, s):
    assert picard_difference(MT, jens, 7, s, 0) == pytest.approx(1.0, abs=1e-12)


def test_difference_of_square(jens):
    for p in range(20):
        m = jens.M[p, -1, 0]
        assert picard_difference(lambda e: MT(e) ** 2, jens, p, 0.4, 0) == pytest.approx(2 * m + 1.0, abs=1e-12)


def test_psi_all_paths_matches_single(jens):
    H = lambda e: np.sin(MT(e)) + e.W[:, -1]
    full = psi(H, jens, 0.2, 0)
    assert all(full[p] == pytest.approx(picard_difference(H, jens, p, 0.2, 0), abs=1e-15) for p in range(10))


def test_base_ensemble_untouched(jens):
    before = jens.counts.copy()
    psi(MT, jens, 0.5, 0)
    assert np.array_equal(before, jens.counts)


ENS2 = simulate_ensemble(TWO_MARKS, build_time_grid(1.0, 8), 30, 2)
FUNCTIONALS = [
    lambda e: e.M[:, -1, 0],
    lambda e: e.M[:, -1, 1] ** 2 + e.W[:, -1],
    lambda e: np.exp(0.3 * e.M[:, 4, 1]) * e.M[:, -1, 0],
    lambda e: np.maximum(e.M[:, -1, 0], 0.0),
    lambda e: e.counts[:, :, 1].sum(axis=1).astype(float),
]


@given(st.integers(0, 4), st.integers(0, 4), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 7),
       st.integers(0, 1))
def test_psi_linearity(i, j, a, b, step, k):
    H, G = FUNCTIONALS[i], FUNCTIONALS[j]
    s = ENS2.grid.nodes[step]
    lhs = psi(lambda e: a * H(e) + b * G(e), ENS2, s, k)
    rhs = a * psi(H, ENS2, s, k) + b * psi(G, ENS2, s, k)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


@given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 7), st.integers(0, 1))
def test_psi_product_rule(i, j, step, k):
    H, G = FUNCTIONALS[i], FUNCTIONALS[j]
    s = ENS2.grid.nodes[step]
    z = ENS2.model.sizes[k]
    h, g = H(ENS2), G(ENS2)
    ph, pg = psi(H, ENS2, s, k), psi(G, ENS2, s, k)
    lhs = psi(lambda e: H(e) * G(e), ENS2, s, k)
    assert np.allclose(lhs, h * pg + g * ph + z * ph * pg, rtol=1e-12, atol=1e-12)


# -- derivative points -------------------------------------------------------------------------


def test_derivative_points_subgrid(jens):
    pts = derivative_points(jens, stride=5, marks=("brownian", 0))
    assert [(p.node(jens), p.label()) for p in pts] == [(0, "brownian"), (5, "brownian"), (0, "z0"), (5, "z0")]


def test_invalid_points(jens):
    with pytest.raises(ValueError):
        DerivativePoint(0.5, 3).node(jens)
    with pytest.raises(ValueError):
        DerivativePoint(1.0, 0).node(jens)


# -- derivative BSDEs --------------------------------------------------------------------------


def _base(ens, gen, xi, alpha=DIRAC0, beta=1.0, **kw):
    sol, _ = solve(ens, gen, xi, alpha, beta, SolverConfig(**kw))
    return sol


def test_brownian_derivative_constant_terminal(bens):
    xi = make_terminal("brownian")
    base = _base(bens, ZeroGenerator(), xi)
    d = brownian_derivative_bsde(base, bens, ZeroGenerator(), xi, 0.3)
    j = d.start
    assert j == 3 and d.check_zero_before_s()
    assert np.allclose(d.triple.Y[:, j:], 1.0, atol=1e-12)
    assert np.allclose(d.triple.Z[:, j:], 0.0, atol=1e-12)


def test_brownian_derivative_of_jump_terminal(jens):
    xi = make_terminal("jump_sum")
    base = _base(jens, ZeroGenerator(), xi)
    d = brownian_derivative_bsde(base, jens, ZeroGenerator(), xi, 0.3)
    assert not np.any(d.triple.Y) and not np.any(d.triple.Z) and not np.any(d.triple.U)


def test_missing_d0_is_configuration_error(bens):
    xi = make_terminal("brownian")
    xi_nod = type(xi)("custom", xi.evaluate, None)
    base = _base(bens, ZeroGenerator(), xi)
    with pytest.raises(ConfigurationError):
        brownian_derivative_bsde(base, bens, ZeroGenerator(), xi_nod, 0.3)


def test_linear_brownian_derivative_closed_form(bens):
    c = 0.5
    xi = make_terminal("brownian")
    base = _base(bens, LinearY(c), xi)
    d = brownian_derivative_bsde(base, bens, LinearY(c), xi, 0.2)
    t = bens.grid.nodes
    j = d.start
    exact = np.exp(c * (1.0 - t[j + 1:]))
    assert np.allclose(d.triple.Y[:, j + 1:], exact, rtol=0.02)


def test_jump_derivative_constant_terminal(jens):
    xi = make_terminal("jump_sum")
    base = _base(jens, ZeroGenerator(), xi)
    d = jump_derivative_bsde(base, jens, ZeroGenerator(), xi, 0.4, 0)
    assert np.array_equal(d.triple.Y[:, -1], psi(xi.evaluate, jens, 0.4, 0))
    assert np.allclose(d.triple.Y[:, -1], 1.0, atol=1e-12)
    assert np.allclose(d.triple.Y[:, d.start:], 1.0, atol=1e-12)
    assert d.check_zero_before_s()


def test_jump_derivative_of_brownian_terminal(jens):
    xi = make_terminal("brownian")
    base = _base(jens, ZeroGenerator(), xi)
    d = jump_derivative_bsde(base, jens, ZeroGenerator(), xi, 0.4, 0)
    assert not np.any(d.triple.Y)


def test_linear_u_quotient_collapses(jens):
    c = 0.4
    gen = Affine(c=c, m_total=2.0)
    base = _base(jens, gen, make_terminal("combo", b=[1.0], r=0.5))
    drv = JumpDerivativeDriver.build(gen, base, 0.3, 0)
    rng = np.random.default_rng(0)
    y, z, u = rng.normal(size=(3, jens.n_paths))
    for i in (3, 6, 9):
        assert np.allclose(drv(i, y, z, u), c * u, atol=1e-12)


@pytest.mark.parametrize("gen", [LinearY(0.5), Affine(0.2, 0.1, 0.1, d0=0.3, e=0.5, m_total=2.0),
                                 TanhGenerator(0.4, 0.3, 0.2, m_total=2.0)])
@pytest.mark.parametrize("mark", ["brownian", 0])
def test_zero_before_s_and_terminal_consistency(jens, gen, mark):
    xi = make_terminal("combo", a=1.0, q=0.2, b=[1.0], r=0.25)
    alpha = make_delay_measure("dirac", v=-0.2)
    base = _base(jens, gen, xi, alpha)
    s = 0.5
    d = derivative_bsde(base, jens, gen, xi, DerivativePoint(s, mark))
    assert d.check_zero_before_s()
    expected = xi.d0(jens, s) if mark == "brownian" else psi(xi.evaluate, jens, s, 0)
    assert d.triple.Y[:, -1].tobytes() == np.asarray(expected, dtype=float).tobytes()


def test_random_generator_brownian_source(bens):
    # f = e W(t): D_{s,0} Y(t) = 1 + e (T - t) for t >= s when xi = W(T)
    e = 0.8
    gen = Affine(e=e)
    xi = make_terminal("brownian")
    base = _base(bens, gen, xi)
    d = brownian_derivative_bsde(base, bens, gen, xi, 0.2)
    t = bens.grid.nodes
    j = d.start
    assert np.allclose(d.triple.Y[:, j + 1:], 1 + e * (1 - t[j + 1:]), atol=1e-10)


# -- re-solving on perturbed paths ------------------------------------------------------------


def test_resolve_jump_sum(jens):
    xi = make_terminal("jump_sum")
    r = resolve_on_perturbed(jens, ZeroGenerator(), xi, DIRAC0, 11, 0.3, 0, beta=1.0)
    assert np.allclose(r[4:], 1.0, atol=0.02)
    assert np.allclose(r[:4], 0.0, atol=0.02)


def test_resolve_jump_independent(jens):
    r = resolve_on_perturbed(jens, LinearY(0.3), make_terminal("brownian"), DIRAC0, 3, 0.3, 0, beta=1.0)
    assert np.allclose(r, 0.0, atol=1e-8)


def test_resolve_replay_matches_refit(jens):
    gen = Affine(0.2, 0.1, 0.1, d0=0.2, m_total=2.0)
    xi = make_terminal("combo", a=1.0, b=[1.0], r=0.25)
    alpha = make_delay_measure("dirac", v=-0.2)
    refit = resolve_on_perturbed(jens, gen, xi, alpha, 2, 0.3, 0)
    replay = resolve_on_perturbed(jens, gen, xi, alpha, 2, 0.3, 0, reuse_models=True)
    assert np.max(np.abs(refit - replay)) < 0.05


def test_resolve_does_not_mutate(jens):
    before = jens.counts.copy()
    resolve_on_perturbed(jens, ZeroGenerator(), make_terminal("jump_sum"), DIRAC0, 0, 0.5, 0, beta=1.0)
    assert np.array_equal(before, jens.counts)


@pytest.mark.parametrize("gen", [ZeroGenerator(), LinearY(0.5), LinearZ(0.4), Affine(0.2, 0.1, 0.1, 0.3, m_total=2.0),
                                 TanhGenerator(0.4, 0.3, 0.3, m_total=2.0)], ids=lambda g: g.name)
def test_estimators_agree_on_reference_generators(gen):
    grid = build_time_grid(1.0, 10)
    ensembles = [simulate_ensemble(JUMP, grid, 500, 100 + r) for r in range(4)]
    xi = make_terminal("combo", a=1.0, b=[1.0], r=0.25)
    rows = estimator_agreement(ensembles, gen, xi, make_delay_measure("dirac", v=-0.2), [(0.3, 0)],
                               paths=range(5))
    assert rows and all(r.passed for r in rows), max(r.z_score for r in rows)


# -- trace identities -------------------------------------------------------------------------


def test_trace_brownian_baseline(bens):
    xi = make_terminal("brownian")
    base = _base(bens, ZeroGenerator(), xi)
    ds = [brownian_derivative_bsde(base, bens, ZeroGenerator(), xi, p.s) for p in derivative_points(bens, 3)]
    rep = trace_check(base, ds)
    assert rep.all_pass and max(r.discrepancy for r in rep.rows) < 1e-10
    assert rep.to_csv().splitlines()[0] == "s,mark,t,lhs_rms,rhs_rms,discrepancy,pass"


def test_trace_jump_baseline(jens):
    xi = make_terminal("jump_sum")
    base = _base(jens, ZeroGenerator(), xi)
    ds = [jump_derivative_bsde(base, jens, ZeroGenerator(), xi, p.s, 0) for p in derivative_points(jens, 3)]
    assert trace_check(base, ds).all_pass


def test_trace_linear_relative(bens):
    xi = make_terminal("brownian")
    base = _base(bens, LinearY(0.5), xi)
    ds = [brownian_derivative_bsde(base, bens, LinearY(0.5), xi, p.s) for p in derivative_points(bens, 2)]
    rep = trace_check(base, ds, tolerance=0.05, relative=True)
    assert rep.all_pass and rep.relative


def test_trace_failure_is_reported(bens):
    xi = make_terminal("brownian")
    base = _base(bens, ZeroGenerator(), xi)
    d = brownian_derivative_bsde(base, bens, ZeroGenerator(), make_terminal("brownian", scale=2.0), 0.5)
    rep = trace_check(base, [d])
    assert not rep.all_pass and rep.rows[0].discrepancy == pytest.approx(1.0)


def test_linear_z_within_regression_error():
    # plain scheme so that Z carries genuine Monte Carlo error; fitted on common probe states
    c, reps = 0.5, 8
    grid = build_time_grid(1.0, 20)
    probe = simulate_ensemble(LevyModel(), grid, 200, 999)
    exact = np.exp(c * (1.0 - grid.nodes[:-1]))
    fits = []
    for r in range(reps):
        ens = simulate_ensemble(LevyModel(), grid, 2000, 300 + r)
        sol, _ = solve(ens, LinearY(c), make_terminal("brownian"), DIRAC0, 1.0,
                       SolverConfig(scheme="plain", keep_models=True))
        Z = np.column_stack([sol.models[i].controls.predict(state_features(probe, i))[0] for i in range(grid.n_steps)])
        fits.append(Z)
    fits = np.asarray(fits)
    se = np.sqrt(np.mean(fits.var(axis=0, ddof=1)))
    errs = np.sqrt(np.mean((fits - exact) ** 2, axis=(1, 2)))
    assert np.mean(errs) <= 3 * se


def test_trace_holds_under_delay():
    ens = simulate_ensemble(LevyModel(), build_time_grid(1.0, 10), 1000, 1)
    gen, xi = LinearY(0.5), make_terminal("brownian")
    alpha = make_delay_measure("dirac", v=-0.2)
    base = _base(ens, gen, xi, alpha)
    ds = [brownian_derivative_bsde(base, ens, gen, xi, p.s) for p in derivative_points(ens, 3)]
    assert trace_check(base, ds, tolerance=1e-6).all_pass
