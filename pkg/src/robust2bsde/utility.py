"""Robust exponential and power utility maximisation on top of the robust solver.

Exponential: value -exp(-c (x - Y0)), strategy from the projection of
a^{1/2}Z + a^{-1/2}b/c onto a^{1/2}C.  Power (no liability): value
x^g exp(Y0) / g, strategy from the projection of (a^{1/2}Z + a^{-1/2}b)/(1-g).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import constraints as cs
from .engine import StateLattice, TerminalClaim, TimeGrid
from .generators import UtilityParams, exp_generator, power_generator
from .robust import RobustSolution, ScenarioFamily, nearest_argmax, path_stream, solve_2bsde
from .spd import SpdMatrix, as_spd

SIM_STREAM = 0x51
PERTURB_STREAM = 0x52
SUM_BLOCK = 1000
BAD_PATH_ABORT = 1e-3


class UtilityError(ValueError):
    pass


@dataclass(eq=False)
class RobustValuation:
    kind: str
    x: float
    Y0: float
    value: float
    worst_index: int
    worst_scenario: SpdMatrix
    strategy_surface: np.ndarray = field(repr=False)  # (N+1,) + lattice + (d,)
    params: UtilityParams = field(repr=False)
    solution: RobustSolution = field(repr=False)
    claim: Optional[TerminalClaim] = field(default=None, repr=False)

    @property
    def risk_aversion(self) -> float:
        return float(self.params.risk_aversion)


def exp_value(c: float, x: float, y0: float) -> float:
    return -math.exp(-c * (x - y0))


def power_value(g: float, x: float, y0: float) -> float:
    return (x**g) * math.exp(y0) / g


def strategy_exponential_many(z, a, b, c: float, C: cs.ConstraintSet) -> np.ndarray:
    """pi = preimage in C of the nearest point of a^{1/2}C to a^{1/2}z + a^{-1/2}b/c."""
    a = as_spd(a)
    z = np.asarray(z, dtype=float).reshape(-1, a.dim)
    target = z @ a.sqrt_array + (a.inv_sqrt_array @ np.asarray(b, dtype=float).reshape(a.dim)) / c
    pre, _ = C.project_transformed_many(target, a.sqrt_array)
    return pre


def strategy_exponential(z, a, b, c: float, C: cs.ConstraintSet) -> np.ndarray:
    return strategy_exponential_many(np.atleast_1d(z)[None, :], a, b, c, C)[0]


def strategy_power_many(z, a, b, g: float, C: cs.ConstraintSet) -> np.ndarray:
    """rho = preimage in C of the nearest point of a^{1/2}C to (a^{1/2}z + a^{-1/2}b)/(1-g)."""
    a = as_spd(a)
    z = np.asarray(z, dtype=float).reshape(-1, a.dim)
    target = (z @ a.sqrt_array + a.inv_sqrt_array @ np.asarray(b, dtype=float).reshape(a.dim)) / (1 - g)
    pre, _ = C.project_transformed_many(target, a.sqrt_array)
    return pre


def strategy_power(z, a, b, g: float, C: cs.ConstraintSet) -> np.ndarray:
    return strategy_power_many(np.atleast_1d(z)[None, :], a, b, g, C)[0]


def _strategy_fn(u: UtilityParams):
    if u.kind == "exponential":
        return strategy_exponential_many
    return strategy_power_many


def strategy_surface(rs: RobustSolution, u: UtilityParams) -> np.ndarray:
    """Feedback strategy at every (t_k, x_j), using the node's maximising scenario."""
    fn = _strategy_fn(u)
    N, d = rs.grid.n_steps, rs.lattice.dim
    out = np.empty_like(rs.Z)
    times = rs.grid.times
    for k in range(N + 1):
        arg = rs.argmax[min(k, N - 1)].ravel()
        z = rs.Z[k].reshape(-1, d)
        pi = np.empty_like(z)
        for i in np.unique(arg):
            sel = arg == i
            pi[sel] = fn(z[sel], rs.family[int(i)], u.b(times[k]), u.risk_aversion, u.constraint)
        out[k] = pi.reshape(rs.lattice.shape + (d,))
    return out


def valuation_from_solution(u: UtilityParams, x: float, rs: RobustSolution, claim=None) -> RobustValuation:
    """Value, worst scenario and strategy surface read off a solved robust equation."""
    y0 = rs.v0
    if u.kind == "exponential":
        value = exp_value(u.risk_aversion, x, y0)
    else:
        value = power_value(u.risk_aversion, x, y0)
    w = rs.root_argmax
    return RobustValuation(u.kind, float(x), y0, value, w, rs.family[w], strategy_surface(rs, u), u, rs, claim)


def solve_robust_exponential(u: UtilityParams, xi: TerminalClaim, x: float, fam: ScenarioFamily, grid: TimeGrid,
                             lattice: StateLattice, quad_order: int = 16, **kw) -> RobustValuation:
    if u.kind != "exponential":
        raise UtilityError("solve_robust_exponential needs exponential utility parameters")
    F = exp_generator(u, fam.a_lo, fam.a_hi)
    rs = solve_2bsde(F, xi, fam, grid, lattice, quad_order, **kw)
    return valuation_from_solution(u, x, rs, xi)


def zero_claim() -> TerminalClaim:
    return TerminalClaim(lambda p: np.zeros(np.asarray(p).shape[0]), 0.0, "zero")


def solve_robust_power(u: UtilityParams, x: float, fam: ScenarioFamily, grid: TimeGrid, lattice: StateLattice,
                       quad_order: int = 16, **kw) -> RobustValuation:
    if u.kind != "power":
        raise UtilityError("solve_robust_power needs power utility parameters")
    if not x > 0:
        raise UtilityError("power utility needs positive initial wealth")
    F = power_generator(u, fam.a_lo, fam.a_hi)
    rs = solve_2bsde(F, zero_claim(), fam, grid, lattice, quad_order, **kw)
    return valuation_from_solution(u, x, rs, None)


def optimality_integrand(kind: str, u: UtilityParams, F_vals, z, pi, a, b) -> np.ndarray:
    """Drift integrand whose vanishing characterises the optimal strategy.

    Exponential: c^2/2 |a^{1/2}pi - (a^{1/2}z + a^{-1/2}b/c)|^2 - c z.b - |a^{-1/2}b|^2/2 - c F(z).
    Power: g pi.b - g/2 |a^{1/2}pi|^2 + |a^{1/2}(g pi + z)|^2/2 - F(z).
    """
    a = as_spd(a)
    s, si = a.sqrt_array, a.inv_sqrt_array
    v = si @ b
    if kind == "exponential":
        c = u.risk_aversion
        t = z @ s + v / c
        r = pi @ s - t
        return 0.5 * c * c * np.sum(r * r, axis=1) - c * (z @ b) - 0.5 * (v @ v) - c * F_vals
    g = u.risk_aversion
    sp = pi @ s
    w = (g * pi + z) @ s
    return g * (pi @ b) - 0.5 * g * np.sum(sp * sp, axis=1) + 0.5 * np.sum(w * w, axis=1) - F_vals


def verify_optimality_identity(rv: RobustValuation, scenario=None, perturb: float = 0.0) -> float:
    """Max |integrand| over lattice nodes and times.

    ``scenario=None`` uses each node's maximising scenario and the stored
    strategy surface; otherwise the strategy is recomputed under ``scenario``.
    ``perturb`` shifts the strategy to exhibit a positive residual.
    """
    rs, u = rv.solution, rv.params
    F = rs.F
    N, d = rs.grid.n_steps, rs.lattice.dim
    times = rs.grid.times
    worst = 0.0
    fn = _strategy_fn(u)
    for k in range(N + 1):
        z = rs.Z[k].reshape(-1, d)
        b = u.b(times[k])
        if scenario is None:
            arg = rs.argmax[min(k, N - 1)].ravel()
            pi = rv.strategy_surface[k].reshape(-1, d) + perturb
            groups = [(rs.family[int(i)], arg == i) for i in np.unique(arg)]
        else:
            a = as_spd(scenario)
            pi = fn(z, a, b, u.risk_aversion, u.constraint) + perturb
            groups = [(a, slice(None))]
        for a, sel in groups:
            zz, pp = z[sel], pi[sel]
            fv = F.evaluate(times[k], np.zeros(zz.shape[0]), zz, a)
            r = optimality_integrand(u.kind, u, fv, zz, pp, a, b)
            worst = max(worst, float(np.max(np.abs(r))))
    return worst


@dataclass
class SimulationReport:
    kind: str
    value: float
    n_paths: int
    seed: int
    table: list  # rows: scenario_index, scenario, estimate, se
    min_estimate: float
    min_se: float
    min_index: int
    optimal_ok: bool
    perturbations: list  # rows: offset, min_estimate, min_se, min_index, dominated
    perturbations_ok: bool
    worst_consistent: bool
    adversarial: Optional[dict]
    integrability_proxy: float
    bad_paths: int
    tol: float

    @property
    def passed(self) -> bool:
        adv = self.adversarial is None or self.adversarial["ok"]
        return self.optimal_ok and self.perturbations_ok and adv

    def as_dict(self):
        out = dict(self.__dict__)
        out["passed"] = self.passed
        return out


def _utility(kind, u, wealth, claim_vals):
    if kind == "exponential":
        return -np.exp(-u.risk_aversion * (wealth - claim_vals))
    g = u.risk_aversion
    return np.exp(g * wealth) / g  # wealth holds log X for power


def _perturbation_offsets(rv: RobustValuation, n: int, scale: float, seed: int) -> np.ndarray:
    rng = path_stream(seed, PERTURB_STREAM)
    d = rv.solution.lattice.dim
    return rng.normal(0.0, scale, (n, d))


def _run_paths(rv: RobustValuation, normals: np.ndarray, scen_idx, offsets: np.ndarray):
    """Wealth of the optimal and perturbed strategies on one block of paths.

    ``normals`` is time-major (N, n, d).  ``scen_idx`` is a scenario index, or
    None for the adversarial per-step choice.  Returns (utilities
    (n, 1 + n_off), integrability proxy, bad path mask).  Without a constraint
    the perturbed strategies are pi* + delta exactly, so their wealth follows
    from a few running sums instead of separate paths.
    """
    rs, u = rv.solution, rv.params
    lat, grid = rs.lattice, rs.grid
    N, h, d = grid.n_steps, grid.h, lat.dim
    n = normals.shape[1]
    times = grid.times
    fam = rs.family
    sq = [fam[i].sqrt_array * math.sqrt(h) for i in range(len(fam))]
    power = u.kind == "power"
    linear = isinstance(u.constraint, cs.WholeSpace)
    B = np.zeros((n, d))
    w0 = math.log(rv.x) if power else rv.x
    if linear:
        S1, Q1 = np.zeros(n), np.zeros(n)
        SG, Q2 = np.zeros((n, d)), np.zeros((n, d))
        Q3 = np.zeros((n, d, d)) if scen_idx is None else np.zeros((d, d))
    else:
        W = np.full((n, 1 + offsets.shape[0]), w0)
    for k in range(N):
        pi = lat.interpolate(rv.strategy_surface[k], B).reshape(n, d)
        b = u.b(times[k])
        if scen_idx is None:
            idx = nearest_argmax(rs, k, B)
            dB = np.empty((n, d))
            ah = np.empty((n, d, d))
            for i in np.unique(idx):
                sel = idx == i
                dB[sel] = normals[k, sel, :] @ sq[i]
                ah[sel] = fam[int(i)].entries * h
        else:
            dB = normals[k] @ sq[scen_idx] if d > 1 else normals[k] * sq[scen_idx][0, 0]
            ah = fam[scen_idx].entries * h
        G = dB + b * h
        if linear:
            S1 += np.sum(pi * G, axis=1)
            SG += G
            if power:
                api = pi @ ah if ah.ndim == 2 else np.einsum("nde,ne->nd", ah, pi)
                Q1 += np.sum(pi * api, axis=1)
                Q2 += api
                Q3 += ah
        else:
            allpi = np.concatenate(
                [pi[:, None, :], u.constraint.project_many((pi[:, None, :] + offsets[None]).reshape(-1, d)).reshape(n, -1, d)],
                axis=1,
            )
            W += np.einsum("nsd,nd->ns", allpi, G)
            if power:
                if ah.ndim == 2:
                    W -= 0.5 * np.einsum("nsd,de,nse->ns", allpi, ah, allpi)
                else:
                    W -= 0.5 * np.einsum("nsd,nde,nse->ns", allpi, ah, allpi)
        B = B + dB
    if linear:
        W = w0 + S1[:, None] + SG @ offsets.T
        if power:
            quad = Q3 @ offsets.T if Q3.ndim == 2 else None
            if quad is None:
                dq = np.einsum("sd,nde,se->ns", offsets, Q3, offsets)
            else:
                dq = np.sum(offsets.T * quad, axis=0)[None, :]
            W = W - 0.5 * (Q1[:, None] + 2 * Q2 @ offsets.T + dq)
        W = np.concatenate([w0 + S1[:, None] - (0.5 * Q1[:, None] if power else 0.0), W], axis=1)
    claim_vals = np.zeros((n, 1))
    if u.kind == "exponential" and rv.claim is not None:
        claim_vals = np.asarray(rv.claim.g(B), dtype=float).reshape(n, 1)
    U = _utility(u.kind, u, W, claim_vals)
    bad = ~np.all(np.isfinite(U), axis=1)
    if u.kind == "exponential":
        proxy = float(np.max(np.exp(-u.risk_aversion * (W[:, 0] - claim_vals[:, 0]))[~bad], initial=0.0))
    else:
        proxy = float(np.max(np.exp(u.risk_aversion * W[:, 0])[~bad], initial=0.0))
    return U, proxy, bad


def simulate_robustness(rv: RobustValuation, fam: Optional[ScenarioFamily] = None, n_paths: int = 200_000,
                        seed: int = 0, n_perturb: int = 5, perturb_scale: float = 0.5, adversarial: bool = False,
                        chunk: int = 20_000, tol: float = 5e-3) -> SimulationReport:
    """Monte Carlo expected utility of the feedback strategy under every scenario.

    All scenarios share the same standard normal draws (common random
    numbers); path j always uses the same block of the stream, so estimates do
    not depend on ``chunk`` or on the number of workers.
    """
    rs = rv.solution
    if fam is not None and fam is not rs.family:
        if len(fam) != len(rs.family) or any(a != b for a, b in zip(fam.scenarios, rs.family.scenarios)):
            raise UtilityError("simulation family must be the family the valuation was solved on")
    N, d = rs.grid.n_steps, rs.lattice.dim
    offsets = _perturbation_offsets(rv, n_perturb, perturb_scale, seed)
    runs = list(range(len(rs.family))) + ([None] if adversarial else [])
    sums = np.zeros((len(runs), 1 + n_perturb))
    sq = np.zeros_like(sums)
    bad = np.zeros(len(runs), dtype=np.int64)
    proxy = 0.0
    rng = path_stream(seed, SIM_STREAM)
    chunk = max(SUM_BLOCK, chunk - chunk % SUM_BLOCK)
    done = 0
    while done < n_paths:
        n = min(chunk, n_paths - done)
        # draws are path-major in the stream; stored time-major for the sweep
        normals = np.ascontiguousarray(rng.standard_normal((n, N, d)).transpose(1, 0, 2))
        for r, si in enumerate(runs):
            U, p, badm = _run_paths(rv, normals, si, offsets)
            good = np.where(badm[:, None], 0.0, U)
            # fixed path blocks added in order keep the sums independent of ``chunk``
            for b0 in range(0, n, SUM_BLOCK):
                blk = good[b0:b0 + SUM_BLOCK]
                sums[r] += blk.sum(axis=0)
                sq[r] += (blk * blk).sum(axis=0)
            bad[r] += int(np.count_nonzero(badm))
            proxy = max(proxy, p)
        done += n
    if np.any(bad > BAD_PATH_ABORT * n_paths):
        raise UtilityError(f"{int(bad.max())} simulated paths produced non-finite utility")
    cnt = (n_paths - bad)[:, None].astype(float)
    mean = sums / cnt
    var = np.maximum(sq / cnt - mean**2, 0.0) * cnt / np.maximum(cnt - 1, 1)
    se = np.sqrt(var / cnt)
    m = len(rs.family)
    table = [
        {"scenario_index": i, "scenario": rs.family[i].entries.tolist(), "estimate": float(mean[i, 0]), "se": float(se[i, 0])}
        for i in range(m)
    ]
    j = int(np.argmin(mean[:m, 0]))
    min_est, min_se = float(mean[j, 0]), float(se[j, 0])
    optimal_ok = abs(min_est - rv.value) <= 3 * min_se + tol
    perts = []
    for p in range(n_perturb):
        jp = int(np.argmin(mean[:m, 1 + p]))
        est, s = float(mean[jp, 1 + p]), float(se[jp, 1 + p])
        perts.append({"offset": offsets[p].tolist(), "min_estimate": est, "min_se": s, "min_index": jp,
                      "dominated": est <= rv.value + 3 * s + tol})
    adv = None
    if adversarial:
        est, s = float(mean[-1, 0]), float(se[-1, 0])
        ok = bool(np.all(est <= mean[:m, 0] + 3 * np.sqrt(s**2 + se[:m, 0] ** 2)))
        adv = {"estimate": est, "se": s, "ok": ok}
    return SimulationReport(rv.kind, rv.value, n_paths, seed, table, min_est, min_se, j, bool(optimal_ok), perts,
                            all(p["dominated"] for p in perts), j == rv.worst_index, adv, proxy, int(bad.sum()), tol)
