"""Single-scenario Markovian BSDE solver on a time-state lattice.

Backward Euler, implicit in y and explicit in z, with Gauss-Hermite
conditional expectations.  On a uniform lattice the quadrature points of a
node sit at the same fractional offsets for every node, so each conditional
expectation is a fixed stencil of shifted copies of the value array (edge
padding gives the constant extrapolation beyond the lattice).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .generators import QuadraticGenerator, exp_transform_generator
from .spd import SpdMatrix, as_spd

ESCAPE_MASS_MAX = 1e-6
MIN_WIDTH_SD = 5.0
DAMPING = 0.5
UNDAMPED_ITERS = 10


class SolverError(RuntimeError):
    pass


class FixedPointError(SolverError):
    pass


class LatticeError(SolverError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int
    horizon: float = 1.0

    def __post_init__(self):
        if int(self.n_steps) < 1:
            raise ValueError("time grid needs at least one step")

    @property
    def h(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.h


@dataclass(frozen=True, eq=False)
class StateLattice:
    """Uniform tensor lattice for B_t, centred at the origin (B_0 = 0)."""

    axes: tuple
    width_sd: float = float("nan")

    @classmethod
    def build(cls, a_hi, nodes=401, width_sd: float = 6.0) -> "StateLattice":
        a_hi = as_spd(a_hi)
        d = a_hi.dim
        if d > 2:
            raise LatticeError("lattice solver supports d <= 2")
        if width_sd < MIN_WIDTH_SD:
            raise LatticeError(f"lattice half-width must be >= {MIN_WIDTH_SD} standard deviations")
        counts = np.broadcast_to(np.asarray(nodes, dtype=int), (d,))
        axes = []
        for i in range(d):
            n = int(counts[i])
            if n < 3:
                raise LatticeError("lattice needs at least 3 nodes per axis")
            if n % 2 == 0:
                n += 1  # keep the origin on a node
            half = width_sd * math.sqrt(a_hi.entries[i, i])
            axes.append(np.linspace(-half, half, n))
        return cls(tuple(axes), float(width_sd))

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(ax.size for ax in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        return np.array([ax[1] - ax[0] for ax in self.axes])

    @property
    def half_width(self) -> np.ndarray:
        return np.array([ax[-1] for ax in self.axes])

    @property
    def points(self) -> np.ndarray:
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    @property
    def origin_index(self) -> tuple:
        return tuple(int(np.argmin(np.abs(ax))) for ax in self.axes)

    def escape_mass(self, a) -> float:
        a = as_spd(a)
        return float(sum(math.erfc(hw / math.sqrt(2 * a.entries[i, i])) for i, hw in enumerate(self.half_width)))

    def interpolate(self, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Multilinear interpolation at ``pts`` (n, d); constant beyond the lattice.

        ``values`` may carry trailing component axes after the lattice axes.
        """
        pts = np.asarray(pts, dtype=float).reshape(-1, self.dim)
        if self.dim == 1:
            ax = self.axes[0]
            pos = np.clip((pts[:, 0] - ax[0]) * (1.0 / (ax[1] - ax[0])), 0.0, ax.size - 1)
            j = np.minimum(pos.astype(np.intp), ax.size - 2)
            f = pos - j
            lo, hi = values[j], values[j + 1]
            if values.ndim > 1:
                f = f.reshape((-1,) + (1,) * (values.ndim - 1))
            return lo + f * (hi - lo)
        idx, frac = [], []
        for i, ax in enumerate(self.axes):
            pos = np.clip((pts[:, i] - ax[0]) / (ax[1] - ax[0]), 0.0, ax.size - 1)
            j = np.minimum(np.floor(pos).astype(np.intp), ax.size - 2)
            idx.append(j)
            frac.append(pos - j)
        out = 0.0
        for corner in np.ndindex(*(2,) * self.dim):
            w = np.ones(pts.shape[0])
            sel = []
            for i, c in enumerate(corner):
                w = w * (frac[i] if c else 1.0 - frac[i])
                sel.append(idx[i] + c)
            v = values[tuple(sel)]
            out = out + (w.reshape((-1,) + (1,) * (v.ndim - 1)) * v)
        return out


def gauss_hermite(order: int, dim: int):
    """Standard-normal nodes (n, dim) and weights (n,)."""
    x, w = hermegauss(order)
    w = w / math.sqrt(2 * math.pi)
    if dim == 1:
        return x[:, None], w
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrid = np.meshgrid(*([w] * dim), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1), np.prod(np.stack([g.ravel() for g in wgrid]), axis=0)


class Stencil:
    """Conditional expectation E[v(x + dB)] and E[v(x + dB) dB] with dB ~ N(0, a h)."""

    def __init__(self, lattice: StateLattice, a, h: float, order: int = 16):
        a = as_spd(a)
        if a.dim != lattice.dim:
            raise LatticeError("scenario and lattice dimensions differ")
        self.a, self.h, self.lattice = a, h, lattice
        nodes, weights = gauss_hermite(order, lattice.dim)
        disp = nodes @ a.scaled(h).sqrt_array
        dx = lattice.spacing
        acc: dict = {}
        for delta, w in zip(disp, weights):
            pos = delta / dx
            fl = np.floor(pos).astype(int)
            th = pos - fl
            for corner in np.ndindex(*(2,) * lattice.dim):
                cw = w
                for i, c in enumerate(corner):
                    cw = cw * (th[i] if c else 1.0 - th[i])
                if cw == 0.0:
                    continue
                key = tuple(int(v) for v in fl + np.array(corner))
                ent = acc.setdefault(key, [0.0, np.zeros(lattice.dim)])
                ent[0] += cw
                ent[1] += cw * delta
        # symmetrise so that z vanishes exactly on constants
        zero = (0.0, np.zeros(lattice.dim))
        keys = sorted(set(acc) | {tuple(-v for v in k) for k in acc})
        pos = {k: i for i, k in enumerate(keys)}
        self.offsets = np.array(keys, dtype=int).reshape(-1, lattice.dim)
        self.weights = np.array([0.5 * (acc.get(k, zero)[0] + acc.get(tuple(-v for v in k), zero)[0]) for k in keys])
        self.wdisp = np.array(
            [0.5 * (acc.get(k, zero)[1] - acc.get(tuple(-v for v in k), zero)[1]) for k in keys]
        ).reshape(-1, lattice.dim)
        origin = (0,) * lattice.dim
        self.pairs = [(pos[k], pos[tuple(-v for v in k)]) for k in keys if k > origin]
        self.pad = np.abs(self.offsets).max(axis=0) + 1
        self.a_inv = a.inverse_array

    def _shifted(self, values: np.ndarray):
        pad = [(int(p), int(p)) for p in self.pad]
        padded = np.pad(values, pad, mode="edge")
        shape = values.shape
        for off in self.offsets:
            sl = tuple(slice(p + o, p + o + n) for p, o, n in zip(self.pad, off, shape))
            yield padded[sl]

    # written as v + sum w (v_shift - v): exact on constants
    def expect(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros(values.shape)
        for w, sh in zip(self.weights, self._shifted(values)):
            out += w * (sh - values)
        return values + out

    def expect_with_z(self, values: np.ndarray):
        """Return (E[v], z) with z = a^{-1} E[v dB] / h, shape lattice + (d,)."""
        ev = np.zeros(values.shape)
        evd = np.zeros(values.shape + (self.lattice.dim,))
        shifted = list(self._shifted(values))
        for w, sh in zip(self.weights, shifted):
            ev += w * (sh - values)
        ev += values
        for i, j in self.pairs:
            evd += (shifted[i] - shifted[j])[..., None] * self.wdisp[i]
        z = (evd @ self.a_inv) / self.h
        return ev, z


@dataclass(frozen=True, eq=False)
class TerminalClaim:
    """Bounded terminal claim xi = g(B_1); ``g`` maps (n, d) points to (n,)."""

    g: Callable = field(repr=False)
    linf_bound: Optional[float] = None
    name: str = "claim"

    def values(self, lattice: StateLattice) -> np.ndarray:
        v = np.asarray(self.g(lattice.points), dtype=float).reshape(lattice.shape)
        if not np.all(np.isfinite(v)):
            raise SolverError(f"claim {self.name} is not finite on the lattice")
        if self.linf_bound is not None and np.max(np.abs(v)) > self.linf_bound + 1e-12:
            raise SolverError(f"claim {self.name} exceeds its declared bound {self.linf_bound}")
        return v

    def bound(self, lattice: StateLattice) -> float:
        if self.linf_bound is not None:
            return float(self.linf_bound)
        return float(np.max(np.abs(self.values(lattice))))


@dataclass(eq=False)
class BsdeSolution:
    scenario: SpdMatrix
    grid: TimeGrid
    lattice: StateLattice
    y: np.ndarray = field(repr=False)  # (K+1,) + lattice.shape
    z: np.ndarray = field(repr=False)  # (K+1,) + lattice.shape + (d,)
    claim_bound: float = float("nan")
    generator: str = ""
    first_step: int = 0
    iterations: int = 0

    @property
    def y0(self) -> float:
        return float(self.y[0][self.lattice.origin_index])

    @property
    def y_surface(self):
        return self.y

    @property
    def z_surface(self):
        return self.z


def implicit_step(F: QuadraticGenerator, t: float, ev: np.ndarray, z: np.ndarray, a: SpdMatrix, h: float,
                  tol: float = 1e-12, max_iter: int = 50, step: int = -1):
    """Solve y = ev + h F(t, y, z, a) nodewise by damped fixed-point iteration."""
    shape = ev.shape
    e = ev.ravel()
    zz = z.reshape(e.size, -1)
    y = e + h * F.evaluate(t, e, zz, a)
    if F.y_independent:
        return y.reshape(shape), 1
    for it in range(1, max_iter + 1):
        y_new = e + h * F.evaluate(t, y, zz, a)
        if it > UNDAMPED_ITERS:
            y_new = DAMPING * y_new + (1 - DAMPING) * y
        err = np.abs(y_new - y)
        y = y_new
        if np.all(err <= tol * np.maximum(1.0, np.abs(y))):
            return y.reshape(shape), it
    if not np.all(np.isfinite(y)):
        bad = int(np.argmax(~np.isfinite(y)))
    else:
        bad = int(np.argmax(err))
    raise FixedPointError(f"fixed point did not converge at step {step}, node {np.unravel_index(bad, shape)}")


def solve_bsde(F: QuadraticGenerator, xi: TerminalClaim, a, grid: TimeGrid, lattice: StateLattice,
               quad_order: int = 16, *, terminal_values: Optional[np.ndarray] = None,
               start_step: Optional[int] = None, tol: float = 1e-12, max_iter: int = 50,
               stencil: Optional[Stencil] = None, keep: str = "all") -> BsdeSolution:
    """Backward induction for y_s = xi + int_s^1 F(y, z) du - int_s^1 z dB under one scenario.

    ``start_step``/``terminal_values`` restart the recursion from t_k with given data.
    ``keep="initial"`` stores only the t = 0 rows.
    """
    a = as_spd(a)
    if quad_order < 8:
        raise SolverError("quadrature order must be >= 8")
    if F.dim != lattice.dim:
        raise SolverError("generator and lattice dimensions differ")
    if lattice.escape_mass(a) > ESCAPE_MASS_MAX:
        raise LatticeError(f"lattice escape mass {lattice.escape_mass(a):.2e} > {ESCAPE_MASS_MAX}; widen the lattice")
    K = grid.n_steps if start_step is None else int(start_step)
    h = grid.h
    st = stencil if stencil is not None else Stencil(lattice, a, h, quad_order)
    term = xi.values(lattice) if terminal_values is None else np.asarray(terminal_values, dtype=float)
    bound = xi.bound(lattice) if xi is not None else float(np.max(np.abs(term)))
    d = lattice.dim
    if keep == "all":
        Y = np.empty((K + 1,) + lattice.shape)
        Z = np.empty((K + 1,) + lattice.shape + (d,))
    else:
        Y = np.empty((1,) + lattice.shape)
        Z = np.empty((1,) + lattice.shape + (d,))
    y_next = term
    if keep == "all":
        Y[K] = term
    z_last = None
    iters = 0
    times = grid.times
    for k in range(K - 1, -1, -1):
        ev, z = st.expect_with_z(y_next)
        y, it = implicit_step(F, times[k], ev, z, a, h, tol, max_iter, k)
        iters = max(iters, it)
        if keep == "all":
            Y[k], Z[k] = y, z
        if z_last is None:
            z_last = z
        y_next = y
    if keep == "all":
        Z[K] = z_last if z_last is not None else 0.0
    else:
        Y[0] = y_next
        Z[0] = z if K > 0 else 0.0
    return BsdeSolution(a, grid, lattice, Y, Z, bound, F.name, 0, iters)


def apriori_bound(F: QuadraticGenerator, claim_bound: float) -> float:
    """e^{beta_bar} (alpha_bar + ||xi||_inf)."""
    if F.growth is None:
        raise SolverError(f"generator {F.name} has no growth certificate")
    return math.exp(F.growth.beta_bar) * (F.growth.alpha_bar + claim_bound)


def solve_bsde_exp_transform(F: QuadraticGenerator, xi: TerminalClaim, a, grid: TimeGrid,
                             lattice: StateLattice, quad_order: int = 16, gamma: Optional[float] = None,
                             **kw) -> BsdeSolution:
    """Solve for Y = e^{gamma y} with the transformed generator and map back."""
    if gamma is None:
        if F.growth is None:
            raise SolverError("gamma not given and generator has no growth certificate")
        gamma = F.growth.gamma
    bound = xi.bound(lattice)
    M = apriori_bound(F, bound)
    G = exp_transform_generator(F, gamma, M)
    claim = TerminalClaim(lambda p: np.exp(gamma * np.asarray(xi.g(p), dtype=float)), None, f"exp({xi.name})")
    sol = solve_bsde(G, claim, a, grid, lattice, quad_order, **kw)
    return transform_back(sol, gamma, bound, F.name)


def transform_back(sol: BsdeSolution, gamma: float, claim_bound: float, name: str) -> BsdeSolution:
    if np.any(sol.y <= 0):
        raise SolverError("transformed solution is not positive; check lattice and tolerances")
    y = np.log(sol.y) / gamma
    z = sol.z / (gamma * sol.y[..., None])
    return BsdeSolution(sol.scenario, sol.grid, sol.lattice, y, z, claim_bound, name, sol.first_step, sol.iterations)


def flow_restart_check(sol: BsdeSolution, k: int, F: QuadraticGenerator, quad_order: int = 16,
                       lattice: Optional[StateLattice] = None, **kw) -> float:
    """Re-solve from t_k with terminal data y(t_k, .) and compare the t = 0 values."""
    if not 0 < k < sol.grid.n_steps:
        raise ValueError("restart step must satisfy 0 < k < N")
    lat = lattice or sol.lattice
    if lat is sol.lattice:
        term = sol.y[k]
        ref = sol.y[0]
    else:
        term = sol.lattice.interpolate(sol.y[k], lat.points).reshape(lat.shape)
        ref = sol.lattice.interpolate(sol.y[0], lat.points).reshape(lat.shape)
    restart = solve_bsde(F, None, sol.scenario, sol.grid, lat, quad_order,
                         terminal_values=term, start_step=k, **kw)
    return float(np.max(np.abs(restart.y[0] - ref)))
