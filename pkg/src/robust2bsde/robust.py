"""Robust (second-order) layer: dynamic programming over a finite volatility family.

V(t_N, .) = g and V(t_k, x) = max over scenarios of the one-step backward-Euler
value computed from V(t_{k+1}, .).  Constant-scenario solves give the lower
bound of the representation formula; the pathwise K process and the minimum
condition are estimated by simulation.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .engine import (
    LatticeError,
    Stencil,
    StateLattice,
    TerminalClaim,
    TimeGrid,
    implicit_step,
    solve_bsde,
    ESCAPE_MASS_MAX,
)
from .generators import QuadraticGenerator
from .spd import SpdMatrix, as_spd, loewner_leq

WORKERS_ENV = "R2BSDE_WORKERS"
K_STREAM = 0x4B
ESCAPE_ABORT = 1e-3
MONO_TOL = 0.1  # K increments below -MONO_TOL * sqrt(h) count as non-monotone


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Order-preserving map; worker count never changes results."""
    items = list(items)
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


class FamilyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScenarioFamily:
    a_lo: SpdMatrix
    a_hi: SpdMatrix
    scenarios: tuple

    def __post_init__(self):
        lo, hi = as_spd(self.a_lo), as_spd(self.a_hi)
        object.__setattr__(self, "a_lo", lo)
        object.__setattr__(self, "a_hi", hi)
        sc = tuple(as_spd(a) for a in self.scenarios)
        if not sc:
            raise FamilyError("scenario family is empty")
        if not loewner_leq(lo, hi):
            raise FamilyError("a_lo is not below a_hi in Loewner order")
        for a in sc:
            if a.dim != lo.dim or not (loewner_leq(lo, a) and loewner_leq(a, hi)):
                raise FamilyError(f"scenario {a!r} lies outside the bounds")
        object.__setattr__(self, "scenarios", sc)

    @classmethod
    def grid(cls, a_lo, a_hi, m: int = 21, extremal: Sequence = ()) -> "ScenarioFamily":
        """Uniform grid (d = 1), or per-axis grid of diagonal matrices plus extremes (d = 2)."""
        lo, hi = as_spd(a_lo), as_spd(a_hi)
        if m < 1:
            raise FamilyError("need at least one scenario")
        if lo.dim == 1:
            if m == 1:
                return cls(lo, hi, (hi,))
            vals = np.linspace(lo.entries[0, 0], hi.entries[0, 0], m)
            vals[0], vals[-1] = lo.entries[0, 0], hi.entries[0, 0]
            return cls(lo, hi, tuple(SpdMatrix(v) for v in vals))
        if m == 1:
            return cls(lo, hi, (hi,))
        axes = [np.linspace(lo.entries[i, i], hi.entries[i, i], m) for i in range(lo.dim)]
        cand = [lo, hi]
        for combo in np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.dim):
            a = SpdMatrix.diag(*combo)
            if loewner_leq(lo, a) and loewner_leq(a, hi):
                cand.append(a)
        cand.extend(as_spd(e) for e in extremal)
        seen, out = set(), []
        for a in cand:
            if a not in seen:
                seen.add(a)
                out.append(a)
        return cls(lo, hi, tuple(out))

    def __len__(self):
        return len(self.scenarios)

    def __getitem__(self, i) -> SpdMatrix:
        return self.scenarios[i]

    def index(self, a) -> int:
        a = as_spd(a)
        for i, s in enumerate(self.scenarios):
            if s == a:
                return i
        raise FamilyError(f"{a!r} is not in the family")

    def describe(self) -> list:
        return [s.entries.tolist() for s in self.scenarios]


@dataclass
class KStatistics:
    scenario_index: int
    n_paths: int
    mean_k1: float
    se_k1: float
    max_k1: float
    min_k1: float
    negative_fraction: float
    tol_mono: float
    escape_fraction: float

    def as_dict(self):
        return dict(self.__dict__)


@dataclass(eq=False)
class RobustSolution:
    F: QuadraticGenerator = field(repr=False)
    family: ScenarioFamily
    grid: TimeGrid
    lattice: StateLattice
    V: np.ndarray = field(repr=False)  # (N+1,) + shape
    Z: np.ndarray = field(repr=False)  # (N+1,) + shape + (d,)
    argmax: np.ndarray = field(repr=False)  # (N,) + shape, scenario index
    per_scenario: list = field(repr=False)
    claim_bound: float
    quad_order: int = 16
    k_stats: dict = field(default_factory=dict)
    k_feedback: Optional[KStatistics] = None

    @property
    def v0(self) -> float:
        return float(self.V[0][self.lattice.origin_index])

    @property
    def y0_per_scenario(self) -> np.ndarray:
        o = self.lattice.origin_index
        return np.array([float(s.y[0][o]) for s in self.per_scenario])

    @property
    def y0_sup(self) -> float:
        return float(np.max(self.y0_per_scenario))

    @property
    def root_argmax(self) -> int:
        return int(self.argmax[0][self.lattice.origin_index])

    @property
    def y(self):
        return self.V


def solve_2bsde(F: QuadraticGenerator, xi: TerminalClaim, fam: ScenarioFamily, grid: TimeGrid,
                lattice: StateLattice, quad_order: int = 16, *, tol: float = 1e-12, max_iter: int = 50,
                keep_scenario_surfaces: bool = True, per_scenario: bool = True) -> RobustSolution:
    """Dynamic programming sweep with per-node scenario maximisation."""
    if lattice.escape_mass(fam.a_hi) > ESCAPE_MASS_MAX:
        raise LatticeError(f"lattice escape mass {lattice.escape_mass(fam.a_hi):.2e} > {ESCAPE_MASS_MAX}; widen the lattice")
    h = grid.h
    stencils = parallel_map(lambda a: Stencil(lattice, a, h, quad_order), fam.scenarios)
    N, d = grid.n_steps, lattice.dim
    V = np.empty((N + 1,) + lattice.shape)
    Z = np.empty((N + 1,) + lattice.shape + (d,))
    arg = np.empty((N,) + lattice.shape, dtype=np.int16)
    V[N] = xi.values(lattice)
    times = grid.times
    for k in range(N - 1, -1, -1):
        def step(i, k=k):
            st = stencils[i]
            ev, z = st.expect_with_z(V[k + 1])
            y, _ = implicit_step(F, times[k], ev, z, st.a, h, tol, max_iter, k)
            return y, z

        results = parallel_map(step, range(len(fam)))
        best, zbest = results[0]
        best, zbest = best.copy(), zbest.copy()
        idx = np.zeros(lattice.shape, dtype=np.int16)
        for i in range(1, len(results)):
            y, z = results[i]
            better = y > best
            best[better] = y[better]
            zbest[better] = z[better]
            idx[better] = i
        V[k], Z[k], arg[k] = best, zbest, idx
    Z[N] = Z[N - 1]
    sols = []
    if per_scenario:
        keep = "all" if keep_scenario_surfaces else "initial"
        sols = parallel_map(
            lambda i: solve_bsde(F, xi, fam[i], grid, lattice, quad_order, stencil=stencils[i],
                                 tol=tol, max_iter=max_iter, keep=keep),
            range(len(fam)),
        )
    return RobustSolution(F, fam, grid, lattice, V, Z, arg, sols, xi.bound(lattice), quad_order)


@dataclass
class RepresentationReport:
    v0: float
    y0_sup: float
    gap: float
    lower_bound_ok: bool
    argmax_constant: bool
    equality_ok: Optional[bool]
    tol: float

    @property
    def passed(self) -> bool:
        return self.lower_bound_ok and self.equality_ok is not False

    def as_dict(self):
        out = dict(self.__dict__)
        out["passed"] = self.passed
        return out


def interior_mask(rs: RobustSolution, width_sd: float = 3.0) -> np.ndarray:
    """Nodes within ``width_sd`` terminal standard deviations (under a_hi) of the origin."""
    pts = rs.lattice.points
    sd = np.sqrt(np.diag(rs.family.a_hi.entries))
    return np.all(np.abs(pts) <= width_sd * sd, axis=1).reshape(rs.lattice.shape)


def representation_check(rs: RobustSolution, tol: float = 2e-3, interior_sd: float = 3.0) -> RepresentationReport:
    """Lower bound V(0,x0) >= max y^P(0,x0) - tol, and equality when the argmax is constant.

    Constancy is judged on interior nodes: the constant extrapolation at the
    lattice edge can flip the argmax where the solution never travels.
    """
    if not rs.per_scenario:
        raise ValueError("representation check needs the per-scenario solves")
    v0, sup = rs.v0, rs.y0_sup
    gap = v0 - sup
    mask = interior_mask(rs, interior_sd)
    vals = rs.argmax[:, mask]
    constant = bool(np.all(vals == vals.flat[0]))
    eq = abs(gap) <= tol if constant else None
    return RepresentationReport(v0, sup, gap, gap >= -tol, constant, eq, tol)


def scenario_z_surfaces(rs: RobustSolution, i: int) -> np.ndarray:
    """z_a(t_k, .) = a^{-1} E_a[V(t_{k+1}, . + dB) dB] / h for every step, scenario ``i``."""
    st = Stencil(rs.lattice, rs.family[i], rs.grid.h, rs.quad_order)
    N = rs.grid.n_steps
    out = np.empty((N,) + rs.lattice.shape + (rs.lattice.dim,))
    for k in range(N):
        _, out[k] = st.expect_with_z(rs.V[k + 1])
    return out


def path_stream(seed: int, purpose: int, scenario: int = 0) -> np.random.Generator:
    """Counter-based stream; path j always consumes the same block of draws."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(purpose), int(scenario)])))


FEEDBACK = -1  # scenario_index reported for the argmax feedback measure


def nearest_argmax(rs: RobustSolution, k: int, x: np.ndarray) -> np.ndarray:
    """Maximising scenario index at the lattice node nearest to each row of ``x``."""
    lat = rs.lattice
    idx = []
    for i, ax in enumerate(lat.axes):
        j = np.rint((x[:, i] - ax[0]) / (ax[1] - ax[0])).astype(np.intp)
        idx.append(np.clip(j, 0, ax.size - 1))
    return rs.argmax[k][tuple(idx)].astype(np.intp)


def extract_k(rs: RobustSolution, scenario, n_paths: int = 100_000, seed: int = 0,
              tol_mono: Optional[float] = None, chunk: int = 50_000) -> KStatistics:
    """Simulate B under one scenario and accumulate the discrete K increments along paths.

    ``scenario="feedback"`` simulates under the measure that uses, at each step,
    the maximising scenario at the nearest node; it is stored in ``rs.k_feedback``.
    """
    feedback = isinstance(scenario, str) and scenario == "feedback"
    if feedback:
        i = FEEDBACK
    else:
        i = scenario if isinstance(scenario, (int, np.integer)) else rs.family.index(scenario)
    fam = rs.family
    F, lat, grid = rs.F, rs.lattice, rs.grid
    N, h, d = grid.n_steps, grid.h, lat.dim
    if tol_mono is None:
        tol_mono = MONO_TOL * math.sqrt(h)
    zs = None if feedback else scenario_z_surfaces(rs, i)
    roots = np.stack([a.sqrt_array for a in fam.scenarios]) * math.sqrt(h)
    rng = path_stream(seed, K_STREAM, len(fam) if feedback else i)
    half = lat.half_width
    k1 = np.empty(n_paths)
    neg = 0
    escaped = 0
    times = grid.times
    done = 0
    while done < n_paths:
        n = min(chunk, n_paths - done)
        xi = rng.standard_normal((n, N, d))
        x = np.zeros((n, d))
        vx = lat.interpolate(rs.V[0], x)
        K = np.zeros(n)
        esc = np.zeros(n, dtype=bool)
        for k in range(N):
            if feedback:
                # the feedback scenario is the maximiser, whose z is the aggregated Z
                idx = nearest_argmax(rs, k, x)
                z = lat.interpolate(rs.Z[k], x).reshape(n, d)
                f = np.empty(n)
                for j in np.unique(idx):
                    sel = idx == j
                    f[sel] = F.evaluate(times[k], vx[sel], z[sel], fam[int(j)])
                dB = np.einsum("nd,nde->ne", xi[:, k, :], roots[idx])
            else:
                z = lat.interpolate(zs[k], x).reshape(n, d)
                f = F.evaluate(times[k], vx, z, fam[i])
                dB = xi[:, k, :] @ roots[i]
            x = x + dB
            esc |= np.any(np.abs(x) > half, axis=1)
            vn = lat.interpolate(rs.V[k + 1], x)
            dK = vx - vn - h * f + np.sum(z * dB, axis=1)
            neg += int(np.count_nonzero(dK < -tol_mono))
            K += dK
            vx = vn
        k1[done:done + n] = K
        escaped += int(np.count_nonzero(esc))
        done += n
    esc_frac = escaped / n_paths
    if esc_frac > ESCAPE_ABORT:
        raise LatticeError(f"{esc_frac:.2e} of simulated paths left the lattice")
    stats = KStatistics(i, n_paths, float(k1.mean()), float(k1.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0,
                        float(k1.max()), float(k1.min()), neg / (n_paths * N), tol_mono, esc_frac)
    if feedback:
        rs.k_feedback = stats
    else:
        rs.k_stats[i] = stats
    return stats


@dataclass
class MinimumConditionReport:
    residual: float
    se: float
    scenario_index: int
    allowance: float
    passed: bool

    def as_dict(self):
        return dict(self.__dict__)


def minimum_condition_check(rs: RobustSolution, disc_tol: float = 2e-3) -> MinimumConditionReport:
    """min over scenarios of E[K_1]; passes when <= 3 s.e. + ``disc_tol``.

    The feedback measure joins the minimum when its statistics exist: when the
    maximising scenario moves with the state no constant scenario attains it.
    """
    if len(rs.k_stats) != len(rs.family):
        raise ValueError("K statistics missing for some scenarios; run extract_k for every scenario")
    stats = [rs.k_stats[i] for i in range(len(rs.family))]
    if rs.k_feedback is not None:
        stats.append(rs.k_feedback)
    j = int(np.argmin([s.mean_k1 for s in stats]))
    best = stats[j]
    allowance = 3 * best.se_k1 + disc_tol
    return MinimumConditionReport(best.mean_k1, best.se_k1, best.scenario_index, allowance, best.mean_k1 <= allowance)
