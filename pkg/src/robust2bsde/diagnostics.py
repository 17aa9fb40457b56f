"""Health checks on solved surfaces: sup-norm bound, BMO-type energy, stability."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .engine import BsdeSolution, Stencil, apriori_bound
from .generators import QuadraticGenerator
from .robust import RobustSolution

APRIORI_SLACK = 1e-6
STABILITY_SLACK = 0.05


class DiagnosticsError(ValueError):
    pass


def _surfaces(sol):
    if isinstance(sol, RobustSolution):
        return sol.V, sol.Z
    return sol.y, sol.z


@dataclass
class AprioriReport:
    y_sup_norm: float
    y_bound: float
    margin: float
    passed: bool

    def as_dict(self):
        return dict(self.__dict__)


def check_apriori(sol: Union[BsdeSolution, RobustSolution], F: QuadraticGenerator,
                  claim_bound: Optional[float] = None) -> AprioriReport:
    """sup |y| over the lattice against e^{beta_bar} (alpha_bar + ||xi||_inf)."""
    y, _ = _surfaces(sol)
    cb = sol.claim_bound if claim_bound is None else claim_bound
    bound = apriori_bound(F, cb)
    sup = float(np.max(np.abs(y)))
    margin = bound - sup
    return AprioriReport(sup, bound, margin, sup <= bound + APRIORI_SLACK)


@dataclass
class BmoReport:
    statistic: float
    statistic_at_origin: float
    bound: float
    margin: float
    passed: bool

    def as_dict(self):
        return dict(self.__dict__)


def bmo_bound(F: QuadraticGenerator, y_sup: float) -> float:
    """(1/g^2) e^{4 g |Y|} (1 + 2 g (alpha_bar + beta_bar |Y|))."""
    if F.growth is None:
        raise DiagnosticsError(f"generator {F.name} has no growth certificate")
    g = F.growth
    with np.errstate(over="ignore"):
        e = math.exp(min(4 * g.gamma * y_sup, 700.0))
    return e * (1 + 2 * g.gamma * (g.alpha_bar + g.beta_bar * y_sup)) / g.gamma**2


def energy_surface(sol: BsdeSolution) -> np.ndarray:
    """S_k(x) = E[sum_{j>=k} |a^{1/2} z_j|^2 h | B_{t_k} = x] on the lattice (t_0 .. t_N)."""
    a = sol.scenario
    h = sol.grid.h
    st = Stencil(sol.lattice, a, h)
    N = sol.grid.n_steps
    if sol.z.shape[0] != N + 1:
        raise DiagnosticsError("energy statistic needs the full z surface")
    S = np.zeros((N + 1,) + sol.lattice.shape)
    for k in range(N - 1, -1, -1):
        uz = sol.z[k] @ a.sqrt_array
        S[k] = np.sum(uz * uz, axis=-1) * h + st.expect(S[k + 1])
    return S


def check_bmo(sol: BsdeSolution, F: QuadraticGenerator) -> BmoReport:
    """Max over grid times and nodes of the conditional remaining energy of z."""
    S = energy_surface(sol)
    stat = float(np.max(S))
    bound = bmo_bound(F, float(np.max(np.abs(sol.y))))
    at0 = float(S[0][sol.lattice.origin_index])
    return BmoReport(stat, at0, bound, bound - stat, stat <= bound)


@dataclass
class StabilityReport:
    delta_y: float
    delta_xi: float
    ratio: float
    limit: float
    passed: bool

    def as_dict(self):
        return dict(self.__dict__)


def check_stability(sol_a, sol_b, delta_xi_norm: float, mu: float = 0.0) -> StabilityReport:
    """||dY||_inf / ||d xi||_inf against e^{mu} + 0.05."""
    if not delta_xi_norm > 0:
        raise DiagnosticsError("claim perturbation is zero; stability ratio undefined")
    ya, _ = _surfaces(sol_a)
    yb, _ = _surfaces(sol_b)
    if ya.shape != yb.shape:
        raise DiagnosticsError("solutions are on different grids")
    dy = float(np.max(np.abs(ya - yb)))
    ratio = dy / delta_xi_norm
    limit = math.exp(mu) + STABILITY_SLACK
    return StabilityReport(dy, float(delta_xi_norm), ratio, limit, ratio <= limit)


@dataclass
class DiagnosticsReport:
    apriori: AprioriReport
    bmo: Optional[BmoReport]
    stability: Optional[StabilityReport]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in (self.apriori, self.bmo, self.stability) if r is not None)

    def as_dict(self):
        return {
            "y_sup_norm": self.apriori.y_sup_norm,
            "y_bound": self.apriori.y_bound,
            "apriori": self.apriori.as_dict(),
            "bmo": None if self.bmo is None else self.bmo.as_dict(),
            "stability": None if self.stability is None else self.stability.as_dict(),
            "passed": self.passed,
        }
