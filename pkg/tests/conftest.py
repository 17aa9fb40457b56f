import numpy as np
import pytest

from robust2bsde import constraints as cs
from robust2bsde.engine import StateLattice, TerminalClaim, TimeGrid
from robust2bsde.generators import UtilityParams, constant_drift
from robust2bsde.constraints import Ball, Box, FinitePointSet, HalfSpace, IntervalUnion
from robust2bsde.robust import ScenarioFamily

A_LO, A_HI = 0.04, 0.09
DRIFT = 0.2


def family(m=21):
    return ScenarioFamily.grid(A_LO, A_HI, m)


def lattice(nodes=1201, a_hi=A_HI):
    return StateLattice.build(np.array([[a_hi]]), nodes=nodes)


def exp_params(c=1.0, constraint=None, b=DRIFT):
    return UtilityParams("exponential", c, constant_drift(b), abs(b), constraint or cs.WholeSpace(1))


def power_params(gamma, constraint=None, b=DRIFT):
    return UtilityParams("power", gamma, constant_drift(b), abs(b), constraint or cs.WholeSpace(1))


def claim(fn, bound=None, name="claim"):
    """Claim from a function of the first coordinate."""
    return TerminalClaim(lambda p: fn(np.asarray(p)[..., 0]), bound, name)


GRID = np.linspace(-15.0, 15.0, 150_001)


def random_set(rng):
    kind = rng.integers(5)
    if kind == 0:
        lo = rng.uniform(-3, 1)
        return Box([lo], [lo + rng.uniform(0, 3)])
    if kind == 1:
        return Ball([rng.uniform(-2, 2)], rng.uniform(0.1, 2))
    if kind == 2:
        return HalfSpace([rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 2)], rng.uniform(-2, 2))
    if kind == 3:
        return FinitePointSet(rng.uniform(-4, 4, (int(rng.integers(1, 6)), 1)))
    cuts = np.sort(rng.uniform(-4, 4, 2 * int(rng.integers(1, 4))))
    return IntervalUnion(cuts.reshape(-1, 2))


def grid_members(s):
    """Membership of the dense 1-D grid, plus the set's exact points (finite sets)."""
    if isinstance(s, FinitePointSet):
        return s.points[:, 0]
    if isinstance(s, Box):
        pts = GRID[(GRID >= s.lo[0]) & (GRID <= s.hi[0])]
        return np.concatenate([pts, [s.lo[0], s.hi[0]]])
    if isinstance(s, Ball):
        c, r = s.center[0], s.radius
        pts = GRID[np.abs(GRID - c) <= r]
        return np.concatenate([pts, [c - r, c + r]])
    if isinstance(s, HalfSpace):
        edge = s.offset / s.normal[0]
        pts = GRID[s.normal[0] * GRID <= s.offset]
        return np.concatenate([pts, [edge]])
    mask = np.zeros(GRID.size, dtype=bool)
    ends = []
    for lo, hi in s.intervals:
        mask |= (GRID >= lo) & (GRID <= hi)
        ends += [lo, hi]
    return np.concatenate([GRID[mask], ends])


@pytest.fixture
def grid200():
    return TimeGrid(200)


@pytest.fixture
def lat():
    return lattice()
