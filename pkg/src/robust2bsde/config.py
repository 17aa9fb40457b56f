"""Run configuration: YAML file with market / claim / utility / generator / numerics / outputs sections."""
from __future__ import annotations

import ast
import copy
import math
import operator
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional

import numpy as np
import yaml

from . import constraints as cs
from .engine import StateLattice, TerminalClaim, TimeGrid
from .generators import (
    QuadraticGenerator,
    TruncationGrid,
    UtilityParams,
    constant_drift,
    exp_generator,
    linear_generator,
    piecewise_linear_drift,
    power_generator,
    zero_generator,
)
from .robust import ScenarioFamily
from .spd import SpdError, SpdMatrix, loewner_leq

RANGES = {
    "time_steps": (10, 5000),
    "scenarios": (1, 201),
    "quad_order": (8, 64),
}


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass
class MarketConfig:
    dim: int = 1
    drift: Any = 0.2  # constant (scalar / vector) or table of [t, b_1, ..., b_d] rows
    a_bounds: Any = None  # [a_lo, a_hi]; scalars for d = 1, matrices otherwise
    sigma_bounds: Any = None  # [sigma_lo, sigma_hi]; a = sigma^2
    scenarios: int = 21
    extremal: list = field(default_factory=list)


@dataclass
class ClaimConfig:
    builtin: Optional[str] = None
    expr: Optional[str] = None
    params: dict = field(default_factory=dict)
    linf_bound: Optional[float] = None


@dataclass
class UtilityConfig:
    kind: Optional[str] = "exponential"
    risk_aversion: float = 1.0
    wealth: float = 1.0
    constraint: dict = field(default_factory=lambda: {"shape": "whole_space"})


@dataclass
class GeneratorConfig:
    kind: str = "utility"  # utility | zero | linear
    b: Any = 0.0
    kappa: float = 0.0
    mu: float = 0.0


@dataclass
class NumericsConfig:
    time_steps: int = 200
    lattice_nodes: Any = 1201
    lattice_width: float = 6.0
    quad_order: int = 16
    fp_tol: float = 1e-12
    fp_max_iter: int = 50
    truncation: dict = field(default_factory=lambda: {
        "p_lo": 0.2, "p_hi": 5.0, "n_p": 97, "q_lo": -4.0, "q_hi": 4.0, "n_q": 161, "levels": [5, 10, 20, 40]})
    mc_paths: int = 200_000
    k_paths: int = 20_000
    seed: int = 0
    perturbations: int = 5
    perturb_scale: float = 0.5
    adversarial: bool = True
    audit_samples: int = 10_000


@dataclass
class OutputsConfig:
    report: str = "report"
    csv: bool = True
    figures: bool = True
    surface_time_stride: int = 10  # every k-th time step in surfaces.csv (t_N always included)


SECTIONS = {
    "market": MarketConfig,
    "claim": ClaimConfig,
    "utility": UtilityConfig,
    "generator": GeneratorConfig,
    "numerics": NumericsConfig,
    "outputs": OutputsConfig,
}


@dataclass
class RunConfig:
    market: MarketConfig = field(default_factory=MarketConfig)
    claim: ClaimConfig = field(default_factory=ClaimConfig)
    utility: UtilityConfig = field(default_factory=UtilityConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    outputs: OutputsConfig = field(default_factory=OutputsConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _section(cls, data, name, violations):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        violations.append(f"{name}: expected a mapping")
        return cls()
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            violations.append(f"{name}.{key}: unknown field")
    return cls(**{k: copy.deepcopy(v) for k, v in data.items() if k in known})


def from_dict(data: dict, check: bool = True) -> RunConfig:
    violations = []
    data = data or {}
    for key in data:
        if key not in SECTIONS:
            violations.append(f"{key}: unknown section")
    cfg = RunConfig(**{name: _section(cls, data.get(name), name, violations) for name, cls in SECTIONS.items()})
    if check:
        violations += validate(cfg)
        if violations:
            raise ConfigError(violations)
    return cfg


def load(path) -> RunConfig:
    with open(path) as fh:
        return from_dict(yaml.safe_load(fh))


def loads(text: str) -> RunConfig:
    return from_dict(yaml.safe_load(text))


# -- validation ---------------------------------------------------------------

def _in_range(v, name, lo, hi, out, label):
    if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or not lo <= v <= hi:
        out.append(f"numerics.{name}: {label} out of range [{lo}, {hi}] (got {v!r})" if name != "scenarios"
                   else f"market.scenarios: scenario count out of range [{lo}, {hi}] (got {v!r})")


def bounds_matrices(m: MarketConfig):
    """(a_lo, a_hi) as SpdMatrix, from a_bounds or sigma_bounds."""
    if m.a_bounds is not None:
        lo, hi = m.a_bounds
        tr = lambda v: np.asarray(v, dtype=float)  # noqa: E731
    elif m.sigma_bounds is not None:
        lo, hi = m.sigma_bounds

        def tr(v):
            s = np.asarray(v, dtype=float)
            return s * s if s.ndim < 2 else s @ s.T
    else:
        raise ValueError("market needs a_bounds or sigma_bounds")

    def mat(v):
        arr = tr(v)
        if arr.ndim == 0:
            arr = np.eye(m.dim) * arr if m.dim > 1 else arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = np.diag(arr)
        return SpdMatrix(arr)

    return mat(lo), mat(hi)


def validate(cfg: RunConfig) -> list:
    """Every violation found, never just the first."""
    out = []
    m, n, u, c = cfg.market, cfg.numerics, cfg.utility, cfg.claim
    if m.dim not in (1, 2):
        out.append(f"market.dim: lattice solver supports d in {{1, 2}} (got {m.dim!r})")
    _in_range(n.time_steps, "time_steps", *RANGES["time_steps"], out, "time steps")
    _in_range(m.scenarios, "scenarios", *RANGES["scenarios"], out, "scenario count")
    _in_range(n.quad_order, "quad_order", *RANGES["quad_order"], out, "quadrature order")
    if not (isinstance(n.lattice_width, (int, float)) and n.lattice_width >= 5):
        out.append("numerics.lattice_width: must be >= 5 standard deviations")
    nodes = np.atleast_1d(np.asarray(n.lattice_nodes))
    if nodes.dtype.kind not in "iu" or np.any(nodes < 3):
        out.append("numerics.lattice_nodes: need integers >= 3")
    if not (isinstance(n.fp_tol, (int, float)) and 0 < n.fp_tol < 1e-3):
        out.append("numerics.fp_tol: must lie in (0, 1e-3)")
    if not (isinstance(n.fp_max_iter, int) and n.fp_max_iter >= 1):
        out.append("numerics.fp_max_iter: must be a positive integer")
    for key in ("mc_paths", "k_paths"):
        v = getattr(n, key)
        if not (isinstance(v, int) and v >= 2):
            out.append(f"numerics.{key}: need at least 2 paths")
    if not (isinstance(n.seed, int) and n.seed >= 0):
        out.append("numerics.seed: must be a non-negative integer")
    if not (isinstance(cfg.outputs.surface_time_stride, int) and cfg.outputs.surface_time_stride >= 1):
        out.append("outputs.surface_time_stride: must be a positive integer")
    if not (isinstance(n.perturbations, int) and n.perturbations >= 0):
        out.append("numerics.perturbations: must be a non-negative integer")
    try:
        a_lo, a_hi = bounds_matrices(m)
        if a_lo.dim != m.dim or a_hi.dim != m.dim:
            out.append("market.a_bounds: matrix dimension does not match market.dim")
        elif not loewner_leq(a_lo, a_hi):
            out.append("market.a_bounds: a_lo is not <= a_hi in Loewner order")
        else:
            for i, e in enumerate(m.extremal):
                try:
                    a = SpdMatrix(np.asarray(e, dtype=float))
                    if not (loewner_leq(a_lo, a) and loewner_leq(a, a_hi)):
                        out.append(f"market.extremal[{i}]: outside the scenario bounds")
                except (SpdError, ValueError) as exc:
                    out.append(f"market.extremal[{i}]: {exc}")
    except (SpdError, ValueError, TypeError) as exc:
        out.append(f"market.a_bounds: {exc}")
    try:
        drift_of(m)
    except (ValueError, TypeError) as exc:
        out.append(f"market.drift: {exc}")
    if u.kind not in (None, "exponential", "power"):
        out.append(f"utility.kind: unknown kind {u.kind!r}")
    elif u.kind == "exponential" and not (isinstance(u.risk_aversion, (int, float)) and u.risk_aversion > 0):
        out.append("utility.risk_aversion: exponential utility requires c > 0")
    elif u.kind == "power":
        g = u.risk_aversion
        if not (isinstance(g, (int, float)) and g < 1 and g != 0):
            out.append(f"utility.risk_aversion: power utility requires gamma < 1 and gamma != 0 (got {g!r})")
        if not (isinstance(u.wealth, (int, float)) and u.wealth > 0):
            out.append("utility.wealth: power utility requires positive initial wealth")
    try:
        cs.from_spec(u.constraint or {}, m.dim)
    except (cs.ConstraintError, KeyError, ValueError, TypeError) as exc:
        out.append(f"utility.constraint: {exc}")
    if cfg.generator.kind not in ("utility", "zero", "linear"):
        out.append(f"generator.kind: unknown kind {cfg.generator.kind!r}")
    elif cfg.generator.kind == "utility" and u.kind is None:
        out.append("generator.kind: 'utility' needs a utility section")
    if c.builtin is not None and c.expr is not None:
        out.append("claim: give only one of builtin or expr")
    else:
        try:
            claim_function(c, m.dim)
        except (ValueError, SyntaxError, KeyError, TypeError) as exc:
            out.append(f"claim: {exc}")
    if c.linf_bound is not None and not (isinstance(c.linf_bound, (int, float)) and c.linf_bound >= 0):
        out.append("claim.linf_bound: must be a non-negative number")
    t = n.truncation or {}
    try:
        TruncationGrid(*(float(t[k]) if k[0] != "n" else int(t[k]) for k in ("p_lo", "p_hi", "n_p", "q_lo", "q_hi", "n_q"))).axes()
        if any(int(v) <= 0 for v in t.get("levels", [])):
            raise ValueError("levels must be positive")
    except (KeyError, ValueError, TypeError) as exc:
        out.append(f"numerics.truncation: {exc}")
    return out


# -- claims -------------------------------------------------------------------

_FUNCS = {
    "min": np.minimum, "max": np.maximum, "abs": np.abs, "exp": np.exp, "log": np.log,
    "sqrt": np.sqrt, "cos": np.cos, "sin": np.sin, "tanh": np.tanh, "clip": np.clip,
}
_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}


def _compile(expr: str, names: tuple, consts: Optional[dict] = None):
    tree = ast.parse(expr, mode="eval")

    def ev(node, env):
        if isinstance(node, ast.Expression):
            return ev(node.body, env)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id in env:
                return env[node.id]
            if node.id == "pi":
                return math.pi
            raise ValueError(f"unknown name {node.id!r} in claim expression")
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left, env), ev(node.right, env))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            return _UNARY[type(node.op)](ev(node.operand, env))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS and not node.keywords:
            return _FUNCS[node.func.id](*(ev(a, env) for a in node.args))
        raise ValueError(f"unsupported construct in claim expression: {ast.dump(node)[:40]}")

    consts = {k: float(v) for k, v in (consts or {}).items()}

    def env_of(cols):
        env = dict(consts)
        env.update({k: cols[i] for i, k in enumerate(names)})
        env["x1"] = cols[0]
        env["x"] = cols[0]
        return env

    ev(tree, env_of([np.zeros(1)] * len(names)))  # reject bad names early

    def g(points):
        pts = np.asarray(points, dtype=float).reshape(-1, len(names))
        env = env_of([pts[:, i] for i in range(len(names))])
        return np.broadcast_to(np.asarray(ev(tree, env), dtype=float), (pts.shape[0],)).copy()

    return g


# builtins act on the first coordinate; parameters come from claim.params
BUILTINS = {
    "zero": "0",
    "constant": "K",
    "square": "x**2",
    "neg_square": "-x**2",
    "capped_square": "min(x**2, cap)",
    "capped_call": "clip(x - strike, 0, cap)",
}


def claim_function(c: ClaimConfig, dim: int):
    names = ("x",) if dim == 1 else tuple(f"x{i + 1}" for i in range(dim))
    if c.expr is not None:
        return _compile(str(c.expr), names, c.params), str(c.expr)
    name = "zero" if c.builtin is None else c.builtin
    if name not in BUILTINS:
        raise ValueError(f"unknown builtin claim {name!r}")
    return _compile(BUILTINS[name], names, c.params), name


def build_claim(cfg: RunConfig) -> TerminalClaim:
    g, name = claim_function(cfg.claim, cfg.market.dim)
    return TerminalClaim(g, cfg.claim.linf_bound, name)


# -- builders -----------------------------------------------------------------

def drift_of(m: MarketConfig):
    arr = np.asarray(m.drift, dtype=float)
    if arr.ndim == 2:
        if arr.shape[1] != m.dim + 1:
            raise ValueError("drift table rows must be [t, b_1, ..., b_d]")
        return piecewise_linear_drift(arr)
    vec = np.broadcast_to(arr, (m.dim,)).astype(float)
    if not np.all(np.isfinite(vec)):
        raise ValueError("drift must be finite")
    return constant_drift(vec), float(np.linalg.norm(vec))


def build_family(cfg: RunConfig) -> ScenarioFamily:
    a_lo, a_hi = bounds_matrices(cfg.market)
    return ScenarioFamily.grid(a_lo, a_hi, cfg.market.scenarios, [np.asarray(e, dtype=float) for e in cfg.market.extremal])


def build_utility(cfg: RunConfig) -> Optional[UtilityParams]:
    u, m = cfg.utility, cfg.market
    if u.kind is None:
        return None
    drift, bound = drift_of(m)
    return UtilityParams(u.kind, float(u.risk_aversion), drift, bound, cs.from_spec(u.constraint or {}, m.dim), m.dim)


def build_generator(cfg: RunConfig) -> QuadraticGenerator:
    g, fam = cfg.generator, build_family(cfg)
    if g.kind == "zero":
        return zero_generator(cfg.market.dim)
    if g.kind == "linear":
        b = np.broadcast_to(np.asarray(g.b, dtype=float), (cfg.market.dim,))
        return linear_generator(b, float(g.kappa), float(g.mu), cfg.market.dim, a_lo=fam.a_lo)
    u = build_utility(cfg)
    if u.kind == "exponential":
        return exp_generator(u, fam.a_lo, fam.a_hi)
    return power_generator(u, fam.a_lo, fam.a_hi)


def build_grid(cfg: RunConfig) -> TimeGrid:
    return TimeGrid(int(cfg.numerics.time_steps))


def build_lattice(cfg: RunConfig) -> StateLattice:
    _, a_hi = bounds_matrices(cfg.market)
    return StateLattice.build(a_hi, cfg.numerics.lattice_nodes, float(cfg.numerics.lattice_width))


def build_truncation_grid(cfg: RunConfig) -> TruncationGrid:
    t = cfg.numerics.truncation
    return TruncationGrid(float(t["p_lo"]), float(t["p_hi"]), int(t["n_p"]), float(t["q_lo"]), float(t["q_hi"]), int(t["n_q"]))


def override(cfg: RunConfig, *, seed=None, time_steps=None, scenarios=None, paths=None, out=None) -> RunConfig:
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg.numerics.seed = int(seed)
    if time_steps is not None:
        cfg.numerics.time_steps = int(time_steps)
    if scenarios is not None:
        cfg.market.scenarios = int(scenarios)
    if paths is not None:
        cfg.numerics.mc_paths = int(paths)
    if out is not None:
        cfg.outputs.report = str(out)
    violations = validate(cfg)
    if violations:
        raise ConfigError(violations)
    return cfg
