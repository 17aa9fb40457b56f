"""Full run: certificate audit, robust solve, utility valuation, simulation, diagnostics."""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import config as cf
from .diagnostics import check_apriori, check_bmo, check_stability
from .engine import TerminalClaim, apriori_bound, flow_restart_check, solve_bsde
from .generators import BoundaryAttainmentWarning, audit_certificates, exp_transform_generator, lipschitz_truncation
from .robust import (
    ESCAPE_ABORT,
    extract_k,
    minimum_condition_check,
    representation_check,
    solve_2bsde,
)
from .utility import (
    valuation_from_solution,
    exp_value,
    power_value,
    simulate_robustness,
    verify_optimality_identity,
)

VERBS = ("audit", "solve", "value", "simulate", "report")
STAGES = {"audit": 0, "solve": 1, "value": 2, "simulate": 3, "report": 4}
MONO_FRACTION_MAX = 1e-3
FLOW_TOL = 1e-10
IDENTITY_TOL = 1e-8
ADMISSIBLE_TOL = 1e-10
STABILITY_BUMP = 0.01


def check(name, module, passed, measured=None, limit=None, note=None) -> dict:
    out = {"name": name, "module": module, "passed": bool(passed), "measured": _num(measured), "limit": _num(limit)}
    if measured is not None and limit is not None:
        out["margin"] = _num(limit - measured)
    if note:
        out["note"] = note
    return out


def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else repr(v)


@dataclass
class RunResult:
    verb: str
    report: dict
    timings: dict
    artifacts: dict = field(default_factory=dict, repr=False)

    @property
    def checks(self) -> list:
        return self.report["checks"]

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c["passed"]]


def _audit(cfg, F, fam, checks, report):
    aud = audit_certificates(F, (fam.a_lo, fam.a_hi), cfg.numerics.audit_samples, cfg.numerics.seed)
    ratios = [r for r in (aud.growth_ratio, aud.lipschitz_y_ratio, aud.lipschitz_z_ratio) if r is not None]
    report["audit"] = aud.as_dict()
    checks.append(check("certificate_audit", "generators", aud.passed, max(ratios) if ratios else 0.0, 1 + 1e-9))
    if cfg.market.dim == 1 and F.growth is not None:
        report["truncation"] = _truncation_probe(cfg, F, fam)
        t = report["truncation"]
        checks.append(check("truncation_monotone", "generators", t["monotone"], t["max_increase"], 1e-8,
                            note="sampled on interior grid points of the exponential transform"))


def _truncation_probe(cfg, F, fam):
    """Monotonicity of the Lipschitz truncations of the transformed generator on sample points."""
    tg = cf.build_truncation_grid(cfg)
    levels = [int(n) for n in cfg.numerics.truncation.get("levels", [5, 10, 20, 40])]
    gamma = F.growth.gamma
    claim = cf.build_claim(cfg)
    M = apriori_bound(F, claim.bound(cf.build_lattice(cfg)))
    G = exp_transform_generator(F, gamma, M)
    p, q = tg.axes()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.numerics.seed, 0x7C]))
    # grid points: off the grid the finite sup may fall below G where G is steeper than n
    Y = p[rng.integers(len(p) // 4, 3 * len(p) // 4 + 1, 64)]
    Zc = q[rng.integers(len(q) // 4, 3 * len(q) // 4 + 1, 64)][:, None]
    a = fam.a_hi
    base = G.evaluate(0.0, Y, Zc, a)
    vals = []
    hits = 0
    for n in levels:
        T = lipschitz_truncation(G, n, tg)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryAttainmentWarning)
            vals.append(T.evaluate(0.0, Y, Zc, a))
        hits += T.meta["flags"]["boundary_hits"]
    vals = np.array(vals)
    inc = float(np.max(np.diff(vals, axis=0))) if len(levels) > 1 else 0.0
    below = float(np.max(base - vals))
    worst = max(inc, below)
    return {"levels": levels, "max_increase": worst, "monotone": bool(worst <= 1e-8), "boundary_hits": int(hits),
            "gap_at_last_level": float(np.max(vals[-1] - base))}


def _solve(cfg, F, fam, claim, grid, lattice, checks, report, timings):
    n = cfg.numerics
    t0 = time.perf_counter()
    rs = solve_2bsde(F, claim, fam, grid, lattice, n.quad_order, tol=n.fp_tol, max_iter=n.fp_max_iter)
    timings["solve_2bsde"] = time.perf_counter() - t0
    rep = representation_check(rs)
    report["robust"] = {
        "v0": rs.v0, "y0_sup": rs.y0_sup, "root_argmax": rs.root_argmax,
        "worst_scenario": rs.family[rs.root_argmax].entries.tolist(),
        "representation": rep.as_dict(),
    }
    report["scenarios"] = [
        {"index": i, "a": a.entries.tolist(), "y0": float(y)} for i, (a, y) in enumerate(zip(fam.scenarios, rs.y0_per_scenario))
    ]
    checks.append(check("representation_lower_bound", "robust_aggregator", rep.lower_bound_ok, -rep.gap, rep.tol))
    if rep.argmax_constant:
        checks.append(check("representation_equality", "robust_aggregator", rep.equality_ok, abs(rep.gap), rep.tol))
    t0 = time.perf_counter()
    ks = [extract_k(rs, i, n.k_paths, n.seed) for i in range(len(fam))]
    ks.append(extract_k(rs, "feedback", n.k_paths, n.seed))
    timings["extract_k"] = time.perf_counter() - t0
    mc = minimum_condition_check(rs)
    report["k_statistics"] = [k.as_dict() for k in ks]
    report["minimum_condition"] = mc.as_dict()
    checks.append(check("minimum_condition", "robust_aggregator", mc.passed, mc.residual, mc.allowance))
    worst_neg = max(k.negative_fraction for k in ks)
    checks.append(check("k_monotone_paths", "robust_aggregator", worst_neg <= MONO_FRACTION_MAX, worst_neg, MONO_FRACTION_MAX))
    worst_esc = max(k.escape_fraction for k in ks)
    checks.append(check("k_lattice_escape", "robust_aggregator", worst_esc <= ESCAPE_ABORT, worst_esc, ESCAPE_ABORT))
    w = rs.root_argmax
    sol = rs.per_scenario[w]
    if grid.n_steps >= 2:
        dev = flow_restart_check(sol, grid.n_steps // 2, F, n.quad_order, tol=n.fp_tol, max_iter=n.fp_max_iter)
        checks.append(check("flow_restart", "bsde_engine", dev <= FLOW_TOL, dev, FLOW_TOL))
    diag = {}
    ap = check_apriori(rs, F)
    diag["apriori"] = ap.as_dict()
    checks.append(check("apriori_bound", "diagnostics", ap.passed, ap.y_sup_norm, ap.y_bound + 1e-6))
    bmo = check_bmo(sol, F)
    diag["bmo"] = bmo.as_dict()
    checks.append(check("bmo_bound", "diagnostics", bmo.passed, bmo.statistic, bmo.bound))
    if F.mu is not None:
        bump = TerminalClaim(lambda p: claim.g(p) + STABILITY_BUMP * np.cos(np.asarray(p)[:, 0]),
                             None if claim.linf_bound is None else claim.linf_bound + STABILITY_BUMP, "bumped")
        sol_b = solve_bsde(F, bump, fam[w], grid, lattice, n.quad_order, tol=n.fp_tol, max_iter=n.fp_max_iter)
        d_xi = float(np.max(np.abs(bump.values(lattice) - claim.values(lattice))))
        st = check_stability(sol, sol_b, d_xi, F.mu)
        diag["stability"] = st.as_dict()
        checks.append(check("stability_ratio", "diagnostics", st.passed, st.ratio, st.limit))
    report["diagnostics"] = diag
    return rs


def _value(cfg, u, rs, claim, checks, report):
    x = float(cfg.utility.wealth)
    rv = valuation_from_solution(u, x, rs, claim if u.kind == "exponential" else None)
    res = verify_optimality_identity(rv)
    recomputed = exp_value(u.risk_aversion, x, rv.Y0) if u.kind == "exponential" else power_value(u.risk_aversion, x, rv.Y0)
    d = rs.lattice.dim
    dist = float(np.max(u.constraint.dist_many(rv.strategy_surface.reshape(-1, d))))
    report["valuation"] = {
        "kind": u.kind, "wealth": x, "Y0": rv.Y0, "value": rv.value, "worst_index": rv.worst_index,
        "worst_scenario": rv.worst_scenario.entries.tolist(),
        "strategy_at_origin": rv.strategy_surface[0][rs.lattice.origin_index].tolist(),
        "optimality_residual": res,
    }
    checks.append(check("optimality_identity", "utility_desk", res <= IDENTITY_TOL, res, IDENTITY_TOL))
    checks.append(check("strategy_admissible", "utility_desk", dist <= ADMISSIBLE_TOL, dist, ADMISSIBLE_TOL))
    checks.append(check("value_relation", "utility_desk", recomputed == rv.value, abs(recomputed - rv.value), 0.0))
    return rv


def _simulate(cfg, rv, checks, report, timings):
    n = cfg.numerics
    t0 = time.perf_counter()
    sim = simulate_robustness(rv, None, n.mc_paths, n.seed, n.perturbations, n.perturb_scale, n.adversarial)
    timings["simulate"] = time.perf_counter() - t0
    report["simulation"] = sim.as_dict()
    checks.append(check("simulation_optimal", "utility_desk", sim.optimal_ok, abs(sim.min_estimate - sim.value),
                        3 * sim.min_se + sim.tol))
    if sim.perturbations:
        excess = max(p["min_estimate"] - sim.value - 3 * p["min_se"] for p in sim.perturbations)
        checks.append(check("simulation_perturbations_dominated", "utility_desk", sim.perturbations_ok, excess, sim.tol))
    if sim.adversarial is not None:
        checks.append(check("simulation_adversarial", "utility_desk", sim.adversarial["ok"], sim.adversarial["estimate"], None))
    return sim


def run(cfg: cf.RunConfig, verb: str = "report") -> RunResult:
    """Execute the pipeline up to ``verb``; deterministic given (config, seed)."""
    if verb not in VERBS:
        raise ValueError(f"unknown verb {verb!r}")
    violations = cf.validate(cfg)
    needs_utility = STAGES[verb] >= STAGES["value"]
    if needs_utility and cfg.utility.kind is None:
        violations.append("utility.kind: verb needs a utility section")
    if needs_utility and cfg.generator.kind != "utility":
        violations.append("generator.kind: valuation verbs need generator.kind = utility")
    if cfg.utility.kind == "power" and cfg.generator.kind == "utility" and (cfg.claim.expr is not None or cfg.claim.builtin not in (None, "zero")):
        violations.append("claim: power utility carries no liability; claim must be the zero builtin")
    if violations:
        raise cf.ConfigError(violations)
    timings = {}
    checks: list = []
    report = {"schema_version": 1, "version": __version__, "verb": verb, "seed": cfg.numerics.seed,
              "config": cfg.to_dict()}
    artifacts = {}
    t_all = time.perf_counter()
    fam = cf.build_family(cfg)
    F = cf.build_generator(cfg)
    claim = cf.build_claim(cfg)
    grid = cf.build_grid(cfg)
    lattice = cf.build_lattice(cfg)
    report["family"] = {"a_lo": fam.a_lo.entries.tolist(), "a_hi": fam.a_hi.entries.tolist(), "size": len(fam)}
    report["generator"] = {"name": F.name, "growth": None if F.growth is None else F.growth.__dict__.copy(),
                           "mu": F.mu, "lipschitz_z": None if F.lipschitz_z is None else F.lipschitz_z.__dict__.copy(),
                           "meta": {k: v for k, v in F.meta.items() if isinstance(v, (int, float, str))}}
    t0 = time.perf_counter()
    _audit(cfg, F, fam, checks, report)
    timings["audit"] = time.perf_counter() - t0
    if STAGES[verb] >= STAGES["solve"]:
        rs = _solve(cfg, F, fam, claim, grid, lattice, checks, report, timings)
        artifacts["robust"] = rs
        if needs_utility:
            u = cf.build_utility(cfg)
            rv = _value(cfg, u, rs, claim, checks, report)
            artifacts["valuation"] = rv
            if STAGES[verb] >= STAGES["simulate"]:
                artifacts["simulation"] = _simulate(cfg, rv, checks, report, timings)
    timings["total"] = time.perf_counter() - t_all
    report["checks"] = checks
    report["passed"] = all(c["passed"] for c in checks)
    return RunResult(verb, report, timings, artifacts)
