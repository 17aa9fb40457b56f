import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust2bsde.engine import LatticeError, TimeGrid, solve_bsde
from robust2bsde.generators import exp_generator, linear_generator, zero_generator
from robust2bsde.robust import (
    FEEDBACK,
    WORKERS_ENV,
    FamilyError,
    ScenarioFamily,
    extract_k,
    minimum_condition_check,
    representation_check,
    solve_2bsde,
)
from robust2bsde.spd import SpdMatrix

from conftest import A_HI, A_LO, DRIFT, claim, exp_params, family, lattice


def test_family_grid_contains_bounds():
    fam = family(21)
    assert len(fam) == 21
    assert fam[0] == SpdMatrix(A_LO) and fam[-1] == SpdMatrix(A_HI)
    assert fam.index(A_HI) == 20
    assert len(ScenarioFamily.grid(A_LO, A_HI, 1)) == 1


def test_family_grid_2d():
    lo, hi = np.eye(2) * 0.04, np.eye(2) * 0.09
    extra = [[0.065, 0.02], [0.02, 0.065]]
    fam = ScenarioFamily.grid(lo, hi, 3, extremal=[extra])
    assert len(fam) == 10
    assert fam.index(lo) == 0 and fam.index(hi) == 1
    assert fam.index(extra) == 9


def test_family_validation():
    with pytest.raises(FamilyError):
        ScenarioFamily(SpdMatrix(0.09), SpdMatrix(0.04), (SpdMatrix(0.05),))
    with pytest.raises(FamilyError):
        ScenarioFamily(SpdMatrix(0.04), SpdMatrix(0.09), (SpdMatrix(0.1),))
    with pytest.raises(FamilyError):
        ScenarioFamily(SpdMatrix(0.04), SpdMatrix(0.09), ())
    with pytest.raises(FamilyError):
        family().index(0.07)


def test_lattice_too_narrow_for_family():
    with pytest.raises(LatticeError):
        solve_2bsde(zero_generator(), claim(np.tanh), family(3), TimeGrid(10), lattice(201, a_hi=0.04))


def test_heat_claims_pick_extreme_scenarios():
    grid, lat = TimeGrid(100), lattice(1201)
    rs = solve_2bsde(zero_generator(), claim(lambda x: x**2), family(11), grid, lat)
    assert rs.v0 == pytest.approx(0.09, abs=2e-3)
    rep = representation_check(rs)
    assert rep.argmax_constant and rep.equality_ok
    assert rs.root_argmax == 10
    assert np.all(rs.V[-1] == lat.axes[0] ** 2)
    rs_neg = solve_2bsde(zero_generator(), claim(lambda x: -(x**2)), family(11), grid, lat)
    assert rs_neg.v0 == pytest.approx(-0.04, abs=2e-3)
    assert rs_neg.root_argmax == 0


def test_singleton_family_equals_single_solve():
    grid, lat = TimeGrid(40), lattice(401)
    F = exp_generator(exp_params(), A_LO, A_HI)
    xi = claim(lambda x: 0.1 * np.sin(2 * x), 0.1)
    fam = ScenarioFamily(SpdMatrix(A_LO), SpdMatrix(A_HI), (SpdMatrix(0.07),))
    rs = solve_2bsde(F, xi, fam, grid, lat)
    sol = solve_bsde(F, xi, 0.07, grid, lat)
    assert np.array_equal(rs.V, sol.y)
    k = extract_k(rs, 0, n_paths=20_000, seed=1)
    assert abs(k.mean_k1) <= 3 * k.se_k1 + 1e-4
    assert k.negative_fraction == 0.0


def test_singleton_k_spread_vanishes_with_h():
    # pathwise K is the curvature residual of the one-step scheme, of size sqrt(h)
    F = exp_generator(exp_params(), A_LO, A_HI)
    xi = claim(lambda x: 0.1 * np.sin(2 * x), 0.1)
    fam = ScenarioFamily(SpdMatrix(A_LO), SpdMatrix(A_HI), (SpdMatrix(0.07),))
    spread = []
    for n in (25, 100):
        rs = solve_2bsde(F, xi, fam, TimeGrid(n), lattice(801))
        spread.append(extract_k(rs, 0, n_paths=20_000, seed=2).se_k1)
    assert 1.6 <= spread[0] / spread[1] <= 2.4


def test_linear_generator_representation_equality():
    c = 1.0
    F = linear_generator(DRIFT, kappa=lambda a: DRIFT**2 / (2 * c * a.entries[0, 0]), a_lo=A_LO, kappa_bound=DRIFT**2 / (2 * c * A_LO))
    rs = solve_2bsde(F, claim(lambda x: 0 * x, 0.0), family(11), TimeGrid(50), lattice(401))
    rep = representation_check(rs, tol=1e-6)
    assert rep.argmax_constant and rep.equality_ok
    assert rs.v0 == pytest.approx(-DRIFT**2 / (2 * c * A_HI), abs=1e-6)
    assert np.all(rs.argmax == 10)


def test_mixed_convexity_lower_bound_only():
    rs = solve_2bsde(zero_generator(), claim(lambda x: np.minimum(x**2, 0.05), 0.05), family(11), TimeGrid(100), lattice(801))
    rep = representation_check(rs)
    assert rep.lower_bound_ok
    assert not rep.argmax_constant and rep.equality_ok is None
    assert rep.gap > 1e-4


def test_k_statistics_on_heat_claim_and_feedback():
    grid, lat = TimeGrid(100), lattice(2001)
    rs = solve_2bsde(zero_generator(), claim(lambda x: x**2), family(3), grid, lat, keep_scenario_surfaces=False)
    ks = [extract_k(rs, i, n_paths=20_000, seed=3) for i in range(3)]
    for k, a in zip(ks, (A_LO, 0.065, A_HI)):
        assert k.mean_k1 == pytest.approx(A_HI - a, abs=3 * k.se_k1 + 1e-3)
    assert ks[2].negative_fraction < 1e-3
    fb = extract_k(rs, "feedback", n_paths=20_000, seed=3)
    assert fb.scenario_index == FEEDBACK and rs.k_feedback is fb
    mc = minimum_condition_check(rs)
    assert mc.passed


def test_minimum_condition_needs_all_scenarios():
    rs = solve_2bsde(zero_generator(), claim(lambda x: x**2), family(3), TimeGrid(20), lattice(401))
    extract_k(rs, 0, n_paths=100)
    with pytest.raises(ValueError):
        minimum_condition_check(rs)


def test_feedback_measure_attains_minimum_for_mixed_claim():
    grid, lat = TimeGrid(100), lattice(1201)
    xi = claim(lambda x: np.minimum(x**2, 0.05), 0.05)
    rs = solve_2bsde(zero_generator(), xi, family(5), grid, lat)
    consts = [extract_k(rs, i, n_paths=20_000, seed=5) for i in range(5)]
    fb = extract_k(rs, "feedback", n_paths=20_000, seed=5)
    assert min(k.mean_k1 for k in consts) > 3 * max(k.se_k1 for k in consts) + 2e-3
    assert abs(fb.mean_k1) <= 3 * fb.se_k1 + 2e-3
    assert minimum_condition_check(rs).scenario_index == FEEDBACK


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_family_monotonicity(seed):
    rng = np.random.default_rng(seed)
    w, c = rng.uniform(0.5, 4), rng.uniform(-1, 1)
    xi = claim(lambda x: 0.3 * np.sin(w * x + c), 0.3)
    F = exp_generator(exp_params(c=float(rng.uniform(0.5, 2))), A_LO, A_HI)
    grid, lat = TimeGrid(20), lattice(201)
    full = family(5)
    sub = ScenarioFamily(full.a_lo, full.a_hi, tuple(full[i] for i in sorted(rng.choice(5, 2, replace=False))))
    v_full = solve_2bsde(F, xi, full, grid, lat, per_scenario=False).V
    v_sub = solve_2bsde(F, xi, sub, grid, lat, per_scenario=False).V
    assert np.all(v_sub <= v_full + 1e-10)


def test_scenario_refinement_changes_shrink():
    xi = claim(lambda x: np.minimum(x**2, 0.05), 0.05)
    grid, lat = TimeGrid(50), lattice(801)
    vals = [solve_2bsde(zero_generator(), xi, family(m), grid, lat, per_scenario=False).v0 for m in (2, 3, 5, 9, 17)]
    steps = np.abs(np.diff(vals))
    assert np.all(steps[1:] <= steps[:-1] + 1e-12)


def test_results_independent_of_workers_and_chunks(monkeypatch):
    grid, lat = TimeGrid(30), lattice(401)
    F = exp_generator(exp_params(), A_LO, A_HI)
    xi = claim(lambda x: 0.1 * np.tanh(3 * x), 0.1)
    monkeypatch.setenv(WORKERS_ENV, "1")
    rs1 = solve_2bsde(F, xi, family(5), grid, lat)
    k1 = extract_k(rs1, 2, n_paths=3000, seed=9, chunk=3000)
    monkeypatch.setenv(WORKERS_ENV, "3")
    rs2 = solve_2bsde(F, xi, family(5), grid, lat)
    k2 = extract_k(rs2, 2, n_paths=3000, seed=9, chunk=1000)
    assert np.array_equal(rs1.V, rs2.V) and np.array_equal(rs1.argmax, rs2.argmax)
    assert k1 == k2
