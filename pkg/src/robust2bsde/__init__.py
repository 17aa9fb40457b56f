"""Quadratic second-order BSDE solver under volatility uncertainty, with robust utility applications."""

__version__ = "0.1.0"

from .spd import SpdMatrix, inv_sqrt, loewner_leq, sqrt  # noqa: E402
from .constraints import (  # noqa: E402
    Ball,
    Box,
    ConstraintSet,
    FinitePointSet,
    HalfSpace,
    IntervalUnion,
    WholeSpace,
    dist,
    dist_transformed,
    project,
    project_transformed,
)
from .generators import (  # noqa: E402
    GrowthCertificate,
    LocalLipschitzZ,
    QuadraticGenerator,
    TruncationGrid,
    UtilityParams,
    audit_certificates,
    exp_generator,
    exp_transform_generator,
    fenchel_conjugate,
    linear_generator,
    lipschitz_truncation,
    power_generator,
    zero_generator,
)
from .engine import (  # noqa: E402
    BsdeSolution,
    StateLattice,
    TerminalClaim,
    TimeGrid,
    flow_restart_check,
    solve_bsde,
    solve_bsde_exp_transform,
)
from .robust import (  # noqa: E402
    RobustSolution,
    ScenarioFamily,
    extract_k,
    minimum_condition_check,
    representation_check,
    solve_2bsde,
)
from .utility import (  # noqa: E402
    RobustValuation,
    simulate_robustness,
    solve_robust_exponential,
    solve_robust_power,
    strategy_exponential,
    strategy_power,
    verify_optimality_identity,
)
from .diagnostics import check_apriori, check_bmo, check_stability  # noqa: E402

__all__ = [
    "SpdMatrix",
    "inv_sqrt",
    "loewner_leq",
    "sqrt",
    "Ball",
    "Box",
    "ConstraintSet",
    "FinitePointSet",
    "HalfSpace",
    "IntervalUnion",
    "WholeSpace",
    "dist",
    "dist_transformed",
    "project",
    "project_transformed",
    "GrowthCertificate",
    "LocalLipschitzZ",
    "QuadraticGenerator",
    "TruncationGrid",
    "UtilityParams",
    "audit_certificates",
    "exp_generator",
    "exp_transform_generator",
    "fenchel_conjugate",
    "linear_generator",
    "lipschitz_truncation",
    "power_generator",
    "zero_generator",
    "BsdeSolution",
    "StateLattice",
    "TerminalClaim",
    "TimeGrid",
    "flow_restart_check",
    "solve_bsde",
    "solve_bsde_exp_transform",
    "RobustSolution",
    "ScenarioFamily",
    "extract_k",
    "minimum_condition_check",
    "representation_check",
    "solve_2bsde",
    "RobustValuation",
    "simulate_robustness",
    "solve_robust_exponential",
    "solve_robust_power",
    "strategy_exponential",
    "strategy_power",
    "verify_optimality_identity",
    "check_apriori",
    "check_bmo",
    "check_stability",
]
