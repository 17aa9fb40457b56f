import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust2bsde.engine import (
    LatticeError,
    SolverError,
    StateLattice,
    Stencil,
    TerminalClaim,
    TimeGrid,
    apriori_bound,
    flow_restart_check,
    gauss_hermite,
    solve_bsde,
    solve_bsde_exp_transform,
)
from robust2bsde.generators import (
    GrowthCertificate,
    LocalLipschitzZ,
    QuadraticGenerator,
    exp_generator,
    linear_generator,
    zero_generator,
)

from conftest import A_HI, A_LO, claim, exp_params, lattice


def test_time_grid():
    g = TimeGrid(4)
    assert g.h == 0.25
    assert np.allclose(g.times, [0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(ValueError):
        TimeGrid(0)


def test_lattice_build_and_escape():
    lat = StateLattice.build(0.09, nodes=400)
    assert lat.shape == (401,)
    assert lat.points[lat.origin_index[0], 0] == 0.0
    assert lat.half_width[0] == pytest.approx(1.8)
    assert lat.escape_mass(0.09) == pytest.approx(math.erfc(6 / math.sqrt(2)))
    with pytest.raises(LatticeError):
        StateLattice.build(0.09, width_sd=3.0)
    with pytest.raises(LatticeError):
        StateLattice.build(np.eye(3) * 0.05)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-1, 1))
def test_interpolation_exact_on_affine(x1, x2, c):
    lat = StateLattice.build(np.diag([0.09, 0.04]), nodes=[41, 31])
    P = lat.points
    vals = (c + 0.5 * P[:, 0] - 2.0 * P[:, 1]).reshape(lat.shape)
    hw = lat.half_width
    p = np.clip([x1, x2], -hw, hw)
    assert lat.interpolate(vals, p[None, :])[0] == pytest.approx(c + 0.5 * p[0] - 2.0 * p[1], abs=1e-12)


def test_gauss_hermite_moments():
    x, w = gauss_hermite(16, 1)
    assert w.sum() == pytest.approx(1.0)
    assert np.sum(w * x[:, 0] ** 2) == pytest.approx(1.0)
    assert np.sum(w * x[:, 0] ** 4) == pytest.approx(3.0)
    x2, w2 = gauss_hermite(8, 2)
    assert x2.shape == (64, 2)
    assert np.sum(w2 * x2[:, 0] * x2[:, 1]) == pytest.approx(0.0, abs=1e-14)


def test_stencil_quadratic_moment():
    lat = lattice(801)
    st_ = Stencil(lat, 0.09, 0.01)
    x = lat.axes[0]
    ev = st_.expect(x**2)
    mid = slice(100, 701)
    assert np.allclose(ev[mid], x[mid] ** 2 + 0.09 * 0.01, atol=lat.spacing[0] ** 2)


def test_heat_claim_second_moment():
    lat = lattice(1201)
    sol = solve_bsde(zero_generator(), claim(lambda x: x**2), 0.09, TimeGrid(100), lat)
    assert sol.y0 == pytest.approx(0.09, abs=2e-3)


def test_linear_generator_closed_form():
    kappa = 0.0375
    F = linear_generator(0.2, kappa=kappa)
    sol = solve_bsde(F, claim(lambda x: 0 * x, 0.0), 0.05, TimeGrid(50), lattice(201))
    assert sol.y0 == pytest.approx(-kappa, abs=1e-6)


def test_constant_claim_is_stationary():
    F = exp_generator(exp_params(b=0.0, constraint=None))
    sol = solve_bsde(F, claim(lambda x: 0 * x + 0.3, 0.3), 0.06, TimeGrid(40), lattice(201))
    assert np.all(sol.y == 0.3)
    assert np.all(sol.z == 0.0)


def test_keep_initial_stores_one_row():
    sol = solve_bsde(zero_generator(), claim(np.tanh), 0.05, TimeGrid(20), lattice(201), keep="initial")
    assert sol.y.shape == (1, 201)


def test_solver_argument_errors():
    lat = lattice(201)
    with pytest.raises(SolverError):
        solve_bsde(zero_generator(), claim(np.tanh), 0.05, TimeGrid(10), lat, quad_order=4)
    with pytest.raises(SolverError):
        solve_bsde(zero_generator(2), claim(np.tanh), np.eye(2) * 0.05, TimeGrid(10), lat)
    with pytest.raises(LatticeError):
        solve_bsde(zero_generator(), claim(np.tanh), 1.0, TimeGrid(10), lat)
    with pytest.raises(SolverError):
        solve_bsde(zero_generator(), claim(lambda x: x, 0.1), 0.05, TimeGrid(10), lat)


def _half_square(a_scale=1.0):
    """F(z) = |a^{1/2} z|^2 / 2: y = ln E[e^g]."""
    return QuadraticGenerator(
        1, lambda t, y, z, a: 0.5 * a.entries[0, 0] * z[:, 0] ** 2, GrowthCertificate(0.0, 0.0, 1.0), 0.0,
        LocalLipschitzZ(0.5, 0.0), True, "half_square",
    )


def _log_mean_exp(g, a):
    x, w = np.polynomial.hermite_e.hermegauss(200)
    w = w / math.sqrt(2 * math.pi)
    return math.log(np.sum(w * np.exp(g(math.sqrt(a) * x))))


def test_exp_transform_log_mean_exp():
    g = lambda x: np.minimum(x, 1.0)  # noqa: E731
    lat = StateLattice.build(1.0, nodes=1201, width_sd=7.0)
    oracle = _log_mean_exp(g, 1.0)
    # the claim is unbounded below; the lattice bound stands in for the sup norm
    xi = TerminalClaim(lambda p: g(np.asarray(p)[..., 0]), None, "min_x_1")
    sol_t = solve_bsde_exp_transform(_half_square(), xi, 1.0, TimeGrid(100), lat)
    assert sol_t.y0 == pytest.approx(oracle, abs=3e-3)
    sol_d = solve_bsde(_half_square(), xi, 1.0, TimeGrid(100), lat)
    assert sol_d.y0 == pytest.approx(oracle, abs=3e-3)


def test_exp_transform_time_error_matches_backward_euler():
    # zero claim: y = -kappa (1 - t) exactly; the transformed equation is linear
    # in Y with rate gamma kappa, so implicit Euler gives -(N / gamma) ln(1 + gamma kappa h)
    F = exp_generator(exp_params(), A_LO, A_HI)
    kappa, gamma, n = 0.2**2 / (2 * A_LO), F.growth.gamma, 200
    sol = solve_bsde_exp_transform(F, claim(lambda x: 0 * x, 0.0), A_LO, TimeGrid(n), lattice(401))
    assert sol.y0 == pytest.approx(-(n / gamma) * math.log1p(gamma * kappa / n), abs=1e-12)
    assert solve_bsde(F, claim(lambda x: 0 * x, 0.0), A_LO, TimeGrid(n), lattice(401)).y0 == pytest.approx(-kappa, abs=1e-12)


def test_exp_transform_constant_claim():
    sol = solve_bsde_exp_transform(zero_generator(), claim(lambda x: 0 * x + 0.4, 0.4), 0.05, TimeGrid(20), lattice(201))
    assert np.allclose(sol.y, 0.4, atol=1e-12)


def test_flow_restart_exact():
    lat = lattice(401)
    grid = TimeGrid(40)
    F = linear_generator(0.2, kappa=0.01)
    sol = solve_bsde(F, claim(np.tanh, 1.0), 0.07, grid, lat)
    assert flow_restart_check(sol, 20, F) <= 1e-10
    Fe = exp_generator(exp_params(), A_LO, A_HI)
    sol_e = solve_bsde(Fe, claim(lambda x: 0.1 * np.sin(3 * x), 0.1), 0.09, grid, lat)
    assert flow_restart_check(sol_e, 10, Fe) <= 1e-10
    with pytest.raises(ValueError):
        flow_restart_check(sol_e, 0, Fe)


def test_flow_restart_on_coarser_lattice():
    fine, coarse = lattice(801), lattice(201)
    grid = TimeGrid(40)
    Fe = exp_generator(exp_params(), A_LO, A_HI)
    sol = solve_bsde(Fe, claim(lambda x: 0.1 * np.tanh(2 * x), 0.1), 0.09, grid, fine)
    assert flow_restart_check(sol, 20, Fe, lattice=coarse) <= 1e-3


def test_grid_convergence_first_order():
    mu = 1.0
    F = QuadraticGenerator(1, lambda t, y, z, a: -mu * y, GrowthCertificate(0, mu, 1.0), mu, LocalLipschitzZ(0, 0), name="decay")
    lat = lattice(101)
    xi = claim(lambda x: 0 * x + 1.0, 1.0)
    err = [abs(solve_bsde(F, xi, 0.05, TimeGrid(n), lat).y0 - math.exp(-mu)) for n in (25, 50, 100, 200)]
    ratios = [err[i] / err[i + 1] for i in range(3)]
    assert all(1.8 <= r <= 2.2 for r in ratios)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_comparison_principle(seed):
    rng = np.random.default_rng(seed)
    c1, c2, k = rng.uniform(-1, 1, 3)
    w = rng.uniform(0.5, 4)
    g1 = lambda x: 0.2 * np.tanh(w * x + c1) + 0.1 * c2  # noqa: E731
    g2 = lambda x: g1(x) + 0.05 * abs(k) * (1 + np.cos(3 * x))  # noqa: E731
    F = exp_generator(exp_params(c=float(rng.uniform(0.5, 2))), A_LO, A_HI)
    a = float(rng.uniform(A_LO, A_HI))
    lat, grid = lattice(201), TimeGrid(30)
    y1 = solve_bsde(F, claim(g1, 0.3), a, grid, lat).y[0]
    y2 = solve_bsde(F, claim(g2, 0.4), a, grid, lat).y[0]
    assert np.all(y1 <= y2 + 1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_apriori_bound_on_random_solves(seed):
    rng = np.random.default_rng(seed)
    amp = float(rng.uniform(0.05, 1.0))
    F = exp_generator(exp_params(c=float(rng.uniform(0.5, 2)), b=float(rng.uniform(-0.3, 0.3))), A_LO, A_HI)
    xi = claim(lambda x: amp * np.sin(rng.uniform(1, 4) * x), amp)
    sol = solve_bsde(F, xi, float(rng.uniform(A_LO, A_HI)), TimeGrid(30), lattice(201))
    assert np.max(np.abs(sol.y)) <= apriori_bound(F, amp) + 1e-6
