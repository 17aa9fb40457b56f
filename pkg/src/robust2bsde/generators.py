"""Quadratic generators F(t, y, z, a) and their growth/Lipschitz certificates.

A generator is evaluated on batches: ``y`` has shape ``(n,)``, ``z`` has shape
``(n, d)`` and ``a`` is a single :class:`SpdMatrix`.  Certificates are declared
data; :func:`audit_certificates` checks them by random sampling.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import constraints as cs
from .spd import SpdMatrix, as_spd, loewner_leq

AUDIT_SLACK = 1e-9


class GeneratorError(ValueError):
    pass


class BoundaryAttainmentWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class GrowthCertificate:
    """|F| <= alpha_bar + beta_bar |y| + gamma/2 |a^{1/2} z|^2."""

    alpha_bar: float
    beta_bar: float
    gamma: float


@dataclass(frozen=True)
class LocalLipschitzZ:
    """|F(z) - F(z')| <= C (phi_bar + |a^{1/2}z| + |a^{1/2}z'|) |a^{1/2}(z - z')|."""

    C: float
    phi_bar: float


@dataclass(frozen=True, eq=False)
class QuadraticGenerator:
    dim: int
    func: Callable = field(repr=False)
    growth: Optional[GrowthCertificate] = None
    mu: Optional[float] = None
    lipschitz_z: Optional[LocalLipschitzZ] = None
    y_independent: bool = False
    name: str = "generator"
    meta: dict = field(default_factory=dict, repr=False)

    def evaluate(self, t: float, y, z, a) -> np.ndarray:
        a = as_spd(a)
        y = np.atleast_1d(np.asarray(y, dtype=float))
        z = np.asarray(z, dtype=float).reshape(-1, self.dim)
        if y.size == 1 and z.shape[0] > 1:
            y = np.full(z.shape[0], y[0])
        if z.shape[0] == 1 and y.size > 1:
            z = np.repeat(z, y.size, axis=0)
        return np.asarray(self.func(float(t), y, z, a), dtype=float)

    def __call__(self, t, y, z, a):
        out = self.evaluate(t, y, z, a)
        return float(out[0]) if out.size == 1 else out


@dataclass(frozen=True)
class UtilityParams:
    kind: str
    risk_aversion: float  # c for exponential, gamma_u for power
    drift: Callable = field(repr=False)
    drift_bound: float
    constraint: cs.ConstraintSet
    dim: int = 1

    def __post_init__(self):
        if self.kind == "exponential":
            if not self.risk_aversion > 0:
                raise GeneratorError("exponential utility requires c > 0")
        elif self.kind == "power":
            g = self.risk_aversion
            if not (g < 1 and g != 0):
                raise GeneratorError("power utility requires gamma < 1 and gamma != 0")
        else:
            raise GeneratorError(f"unknown utility kind {self.kind!r}")
        if not (math.isfinite(self.drift_bound) and self.drift_bound >= 0):
            raise GeneratorError("drift bound M must be finite and non-negative")
        if self.constraint.dim != self.dim:
            raise GeneratorError("constraint dimension does not match market dimension")

    def b(self, t: float) -> np.ndarray:
        return np.asarray(self.drift(t), dtype=float).reshape(self.dim)


def constant_drift(b) -> Callable:
    vec = np.atleast_1d(np.asarray(b, dtype=float))
    return lambda t: vec


def piecewise_linear_drift(knots) -> tuple[Callable, float]:
    """Drift from a table of ``[t, b_1, ..., b_d]`` rows; returns (b, sup|b|)."""
    table = np.atleast_2d(np.asarray(knots, dtype=float))
    ts, vals = table[:, 0], table[:, 1:]
    if np.any(np.diff(ts) <= 0):
        raise GeneratorError("drift table times must be strictly increasing")

    def drift(t):
        return np.array([np.interp(t, ts, vals[:, i]) for i in range(vals.shape[1])])

    bound = float(np.max(np.linalg.norm(vals, axis=1)))
    return drift, bound


def _constraint_bounds(u: UtilityParams, a_lo: SpdMatrix, a_hi: SpdMatrix) -> tuple[float, float]:
    """(K_bar, K_low): K_bar bounds inf{|r| : r in a^{1/2}C}, K_low^2 = tr(a_lo^-1) M^2."""
    k_bar = math.sqrt(float(a_hi.eigenvalues[-1])) * u.constraint.nearest_norm()
    k_low = math.sqrt(a_lo.trace_inverse()) * u.drift_bound
    return k_bar, k_low


def exp_generator(u: UtilityParams, a_lo=None, a_hi=None) -> QuadraticGenerator:
    """Generator of the robust exponential utility problem.

    F(z, a) = c/2 dist^2(a^{1/2}z + a^{-1/2}b/c, a^{1/2}C) - z.b - |a^{-1/2}b|^2/(2c).
    Certificates need the scenario bounds; without them they are left undeclared.
    """
    if u.kind != "exponential":
        raise GeneratorError("exp_generator needs an exponential UtilityParams")
    c = float(u.risk_aversion)
    C = u.constraint
    whole = isinstance(C, cs.WholeSpace)

    def func(t, y, z, a):
        b = u.b(t)
        s, s_inv = a.sqrt_array, a.inv_sqrt_array
        v = s_inv @ b
        out = -(z @ b) - (v @ v) / (2.0 * c)
        if not whole:
            target = z @ s + v / c
            out = out + 0.5 * c * cs.dist_transformed_many(target, C, s) ** 2
        return out

    growth = lip = None
    meta = {"kind": "exponential", "c": c}
    if a_lo is not None and a_hi is not None:
        k_bar, k_low = _constraint_bounds(u, as_spd(a_lo), as_spd(a_hi))
        growth = GrowthCertificate(2 * c * k_bar**2 + (5 + c) / (2 * c) * k_low**2, 0.0, 1 + 2 * c)
        lip = LocalLipschitzZ(c / 2, 2 * k_bar + 4 * k_low / c)
        meta.update(K_bar=k_bar, K_low=k_low)
    return QuadraticGenerator(u.dim, func, growth, 0.0, lip, True, "exponential", meta)


def power_generator(u: UtilityParams, a_lo=None, a_hi=None) -> QuadraticGenerator:
    """Generator of the robust power utility problem (gamma_u < 1, gamma_u != 0).

    F(z, a) = -g(1-g)/2 dist^2((a^{1/2}z + a^{-1/2}b)/(1-g), a^{1/2}C)
              + g |a^{1/2}z + a^{-1/2}b|^2 / (2(1-g)) + |a^{1/2}z|^2 / 2.
    """
    if u.kind != "power":
        raise GeneratorError("power_generator needs a power UtilityParams")
    g = float(u.risk_aversion)
    C = u.constraint
    whole = isinstance(C, cs.WholeSpace)

    def func(t, y, z, a):
        b = u.b(t)
        s, s_inv = a.sqrt_array, a.inv_sqrt_array
        uz = z @ s
        w = uz + s_inv @ b
        out = g * np.sum(w * w, axis=1) / (2 * (1 - g)) + 0.5 * np.sum(uz * uz, axis=1)
        if not whole:
            out = out - 0.5 * g * (1 - g) * cs.dist_transformed_many(w / (1 - g), C, s) ** 2
        return out

    growth = lip = None
    meta = {"kind": "power", "gamma_u": g}
    if a_lo is not None and a_hi is not None:
        k_bar, k_low = _constraint_bounds(u, as_spd(a_lo), as_spd(a_hi))
        ag = abs(g)
        growth = GrowthCertificate(
            ag * (1 - g) * k_bar**2 + 3 * ag * k_low**2 / (1 - g), 0.0, 6 * ag / (1 - g) + 1
        )
        c_lip = ag / (1 - g) + 0.5
        lip = LocalLipschitzZ(c_lip, (2 * ag * k_low / (1 - g) + ag * k_bar) / c_lip)
        meta.update(K_bar=k_bar, K_low=k_low)
    return QuadraticGenerator(u.dim, func, growth, 0.0, lip, True, "power", meta)


def zero_generator(dim: int = 1, gamma: float = 1.0) -> QuadraticGenerator:
    return QuadraticGenerator(
        dim,
        lambda t, y, z, a: np.zeros(y.shape[0]),
        GrowthCertificate(0.0, 0.0, gamma),
        0.0,
        LocalLipschitzZ(0.0, 0.0),
        True,
        "zero",
    )


def linear_generator(b, kappa: float = 0.0, mu: float = 0.0, dim: int = 1, a_lo=None,
                     kappa_bound: Optional[float] = None) -> QuadraticGenerator:
    """F(t, y, z, a) = -z.b - kappa - mu*y; ``kappa`` may be a function of ``a``.

    With ``a_lo`` a growth certificate follows from |z.b| <= |a^{1/2}z|^2/2 + |a^{-1/2}b|^2/2.
    """
    bvec = np.atleast_1d(np.asarray(b, dtype=float))
    if callable(kappa):
        kap = kappa
    else:
        kap = lambda a, k=float(kappa): k  # noqa: E731
        if kappa_bound is None:
            kappa_bound = abs(float(kappa))

    def func(t, y, z, a):
        return -(z @ bvec) - kap(a) - mu * y

    growth = lip = None
    if a_lo is not None and kappa_bound is not None:
        bb = 0.5 * as_spd(a_lo).trace_inverse() * float(bvec @ bvec)
        growth = GrowthCertificate(kappa_bound + bb, abs(mu), 1.0)
        lip = LocalLipschitzZ(math.sqrt(2 * bb) if bb > 0 else 0.0, 1.0)
    meta = {"kind": "linear", "b": bvec.tolist(), "mu": mu}
    return QuadraticGenerator(dim, func, growth, abs(mu), lip, mu == 0.0, "linear", meta)


def fenchel_conjugate(H: Callable, eta_grid, a, t: float = 0.0, y: float = 0.0, z=None) -> float:
    """sup over the grid of 1/2 tr(a eta) - H(t, y, z, eta), by exhaustive search."""
    a = as_spd(a)
    grid = np.asarray(eta_grid, dtype=float)
    if grid.size == 0:
        raise GeneratorError("empty eta grid")
    grid = grid.reshape(-1, a.dim, a.dim)
    if z is None:
        z = np.zeros(a.dim)
    vals = [0.5 * np.trace(a.entries @ eta) - H(t, y, z, eta if a.dim > 1 else eta[0, 0]) for eta in grid]
    return float(np.max(vals))


def conjugate_generator(H: Callable, eta_grid, dim: int = 1, **certs) -> QuadraticGenerator:
    """Generator F(t, y, z, a) obtained by conjugating the Hamiltonian H in eta."""

    def func(t, y, z, a):
        return np.array([fenchel_conjugate(H, eta_grid, a, t, yi, zi) for yi, zi in zip(y, z)])

    return QuadraticGenerator(dim, func, name="conjugate", **certs)


def _smooth_step(s):
    """C-infinity transition: 0 for s <= 0, 1 for s >= 1."""
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        f0 = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
        f1 = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1.0 - s, 1.0)), 0.0)
    return f0 / (f0 + f1)


def cutoff(u, gamma: float, M: float) -> np.ndarray:
    """Smooth cutoff, 1 on [e^{-gM}, e^{gM}] and 0 outside (e^{-g(M+1)}, e^{g(M+1)})."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    pos = u > 0
    lu = np.log(u[pos])
    lo, hi = -gamma * (M + 1), gamma * (M + 1)
    out[pos] = _smooth_step((lu - lo) / gamma) * _smooth_step((hi - lu) / gamma)
    return out


def exp_transform_generator(F: QuadraticGenerator, gamma: float, M: float) -> QuadraticGenerator:
    """Generator of the equation solved by e^{gamma y} when y solves the F-equation."""
    if not gamma > 0 or not M > 0:
        raise GeneratorError("exp transform needs gamma > 0 and M > 0")

    def func(t, Y, Zc, a):
        out = np.zeros(Y.shape[0])
        phi = cutoff(Y, gamma, M)
        live = phi > 0
        if np.any(live):
            Yl, Zl = Y[live], Zc[live]
            uz = Zl @ a.sqrt_array
            inner = gamma * Yl * F.evaluate(t, np.log(Yl) / gamma, Zl / (gamma * Yl)[:, None], a)
            out[live] = phi[live] * (inner - np.sum(uz * uz, axis=1) / (2 * Yl))
        return out

    growth = None
    if F.growth is not None:
        E = math.exp(gamma * (M + 1))
        g = F.growth
        growth = GrowthCertificate(gamma * E * (g.alpha_bar + g.beta_bar * (M + 1)), 0.0, (1 + g.gamma / gamma) * E)
    meta = {"kind": "exp_transform", "gamma": gamma, "M": M, "base": F.name}
    return QuadraticGenerator(F.dim, func, growth, None, None, False, f"exp_transform({F.name})", meta)


@dataclass(frozen=True)
class TruncationGrid:
    """Finite search grid standing in for the rationals in the truncation sup."""

    p_lo: float
    p_hi: float
    n_p: int
    q_lo: float
    q_hi: float
    n_q: int

    def axes(self):
        if self.n_p < 1 or self.n_q < 1:
            raise GeneratorError("truncation grid is empty")
        return np.linspace(self.p_lo, self.p_hi, self.n_p), np.linspace(self.q_lo, self.q_hi, self.n_q)


def _running_argmax(v: np.ndarray) -> np.ndarray:
    """Index attaining the running maximum along the last axis."""
    best = np.maximum.accumulate(v, axis=-1)
    idx = np.where(v == best, np.arange(v.shape[-1]), 0)
    return np.maximum.accumulate(idx, axis=-1)


class _TruncationTables:
    """Prefix/suffix maxima giving exact sup-convolution in q on a product grid."""

    def __init__(self, G: QuadraticGenerator, n: float, t: float, a: SpdMatrix, grid: TruncationGrid):
        self.p, self.q = grid.axes()
        s = float(a.sqrt_array[0, 0])
        self.ns = n * s
        P, Q = np.meshgrid(self.p, self.q, indexing="ij")
        vals = G.evaluate(t, P.ravel(), Q.ravel()[:, None], a).reshape(P.shape)
        vals = np.where(np.isfinite(vals), vals, -np.inf)
        lo = vals + self.ns * self.q
        hi = (vals - self.ns * self.q)[:, ::-1]
        self.up = np.maximum.accumulate(lo, axis=1)
        self.up_arg = _running_argmax(lo)
        self.down = np.maximum.accumulate(hi, axis=1)[:, ::-1]
        self.down_arg = (self.q.size - 1 - _running_argmax(hi))[:, ::-1]

    def evaluate(self, n: float, Y: np.ndarray, Zc: np.ndarray):
        """Grid part of the sup and the (p, q) indices attaining it."""
        q = self.q
        j = np.searchsorted(q, Zc, side="right")  # q[:j] <= Z < q[j:]
        jl, jh = np.maximum(j - 1, 0), np.minimum(j, q.size - 1)
        lo_part = np.where(j > 0, self.up[:, jl] - self.ns * Zc, -np.inf)
        hi_part = np.where(j < q.size, self.down[:, jh] + self.ns * Zc, -np.inf)
        H = np.maximum(lo_part, hi_part)  # (n_p, n_query)
        tot = H - n * np.abs(self.p[:, None] - Y[None, :])
        i_best = tot.argmax(axis=0)
        cols = np.arange(Y.size)
        best = tot[i_best, cols]
        use_lo = lo_part[i_best, cols] >= hi_part[i_best, cols]
        q_best = np.where(use_lo, self.up_arg[i_best, jl], self.down_arg[i_best, jh])
        return best, i_best, q_best


def lipschitz_truncation(G: QuadraticGenerator, n: float, grid: TruncationGrid) -> QuadraticGenerator:
    """sup of G(p, q) - n|p - Y| - n|a^{1/2}(q - Z)| over grid points and the query point (d = 1).

    The query point belongs to the rational sup set, so the truncation never
    drops below G; the grid supplies the points that make it n-Lipschitz.
    """
    if G.dim != 1:
        raise GeneratorError("lipschitz_truncation is implemented for d = 1 only")
    grid.axes()
    cache: dict = {}
    flags = {"boundary_hits": 0}

    def func(t, Y, Zc, a):
        key = (t, float(a.entries[0, 0]))
        tab = cache.get(key)
        if tab is None:
            cache.clear()
            tab = cache[key] = _TruncationTables(G, n, t, a, grid)
        best, i_best, q_best = tab.evaluate(n, Y, Zc[:, 0])
        own = G.evaluate(t, Y, Zc, a)
        from_grid = best > own
        edge = ((i_best == 0) | (i_best == tab.p.size - 1) | (q_best == 0) | (q_best == tab.q.size - 1)) & from_grid
        hits = int(np.count_nonzero(edge))
        if hits:
            flags["boundary_hits"] += hits
            warnings.warn(
                f"truncation sup attained on the grid boundary at {hits} point(s); widen the grid",
                BoundaryAttainmentWarning,
                stacklevel=2,
            )
        return np.where(from_grid, best, own)

    meta = {"kind": "truncation", "n": n, "base": G.name, "flags": flags}
    return QuadraticGenerator(1, func, None, float(n), LocalLipschitzZ(float(n), 1.0), False, f"trunc{n}({G.name})", meta)


@dataclass
class CertificateAudit:
    name: str
    samples: int
    growth_ratio: Optional[float]
    lipschitz_y_ratio: Optional[float]
    lipschitz_z_ratio: Optional[float]
    passed: bool
    notes: list = field(default_factory=list)

    def as_dict(self):
        return {
            "generator": self.name,
            "samples": self.samples,
            "growth_ratio": self.growth_ratio,
            "lipschitz_y_ratio": self.lipschitz_y_ratio,
            "lipschitz_z_ratio": self.lipschitz_z_ratio,
            "passed": self.passed,
            "notes": list(self.notes),
        }


def random_scenarios(a_lo: SpdMatrix, a_hi: SpdMatrix, n: int, rng: np.random.Generator) -> list[SpdMatrix]:
    """Random matrices a with a_lo <= a <= a_hi (Loewner)."""
    d = a_lo.dim
    D = a_hi.entries - a_lo.entries
    w, v = np.linalg.eigh(D)
    D_half = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    out = []
    for _ in range(n):
        Qm, _ = np.linalg.qr(rng.standard_normal((d, d)))
        W = (Qm * rng.uniform(0, 1, d)) @ Qm.T
        m = a_lo.entries + D_half @ W @ D_half
        out.append(SpdMatrix(0.5 * (m + m.T)))
    return out


def _ratio(num, den):
    num = np.abs(num)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 1e-13, np.inf, 0.0))
    return float(np.max(r)) if r.size else 0.0


def audit_certificates(F: QuadraticGenerator, bounds, samples: int = 10_000, seed: int = 0,
                       y_scale: float = 5.0, n_scenarios: int = 16) -> CertificateAudit:
    """Randomized check of the declared growth and Lipschitz certificates."""
    a_lo, a_hi = as_spd(bounds[0]), as_spd(bounds[1])
    if not loewner_leq(a_lo, a_hi):
        raise GeneratorError("audit bounds are not Loewner ordered")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA0D1]))
    scen = [a_lo, a_hi] + random_scenarios(a_lo, a_hi, max(n_scenarios - 2, 0), rng)
    per = max(samples // len(scen), 1)
    d = F.dim
    g_r, ly_r, lz_r = [], [], []
    notes = []
    for a in scen:
        t = float(rng.uniform())
        y = rng.uniform(-y_scale, y_scale, per)
        y2 = rng.uniform(-y_scale, y_scale, per)
        mags = 10.0 ** rng.uniform(-3, 2, (per, 1))
        z = rng.standard_normal((per, d)) * mags
        z2 = np.where(rng.uniform(size=(per, 1)) < 0.5, z + rng.standard_normal((per, d)) * 10.0 ** rng.uniform(-4, 0, (per, 1)),
                      rng.standard_normal((per, d)) * mags)
        f = F.evaluate(t, y, z, a)
        uz = z @ a.sqrt_array
        uz2 = z2 @ a.sqrt_array
        nu, nu2 = np.linalg.norm(uz, axis=1), np.linalg.norm(uz2, axis=1)
        if F.growth is not None:
            g = F.growth
            g_r.append(_ratio(f, g.alpha_bar + g.beta_bar * np.abs(y) + 0.5 * g.gamma * nu**2))
        if F.mu is not None:
            ly_r.append(_ratio(f - F.evaluate(t, y2, z, a), F.mu * np.abs(y - y2)))
        if F.lipschitz_z is not None:
            L = F.lipschitz_z
            dz = np.linalg.norm(uz - uz2, axis=1)
            lz_r.append(_ratio(f - F.evaluate(t, y, z2, a), L.C * (L.phi_bar + nu + nu2) * dz))
    res = [max(r) if r else None for r in (g_r, ly_r, lz_r)]
    for label, r in zip(("growth", "lipschitz_y", "lipschitz_z"), res):
        if r is None:
            notes.append(f"{label} certificate not declared")
    passed = all(r is None or r <= 1 + AUDIT_SLACK for r in res)
    return CertificateAudit(F.name, per * len(scen), *res, passed, notes)


def with_certificates(F: QuadraticGenerator, **kw) -> QuadraticGenerator:
    return replace(F, **kw)
