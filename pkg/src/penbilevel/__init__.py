"""Penalty-based first-order methods for bilevel optimization."""
from .algorithms import (
    ALGORITHMS,
    PenaltyConfig,
    TrajectoryRecord,
    alt_pbgd,
    jnt_pbgd,
    pbgd_blocc,
    pbgd_free,
    pbgd_free_cc,
    run_algorithm,
)
from .core import (
    AllSpace,
    Ball,
    BilevelError,
    BilevelProblem,
    Box,
    ConfigError,
    CoupledConstraint,
    NonNegOrthant,
    ProblemConstants,
    project,
)
from .estimators import BilevelSVC, PenaltyBilevelSolver
from .problems import CATALOG, make_example

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS",
    "AllSpace",
    "Ball",
    "BilevelError",
    "BilevelProblem",
    "BilevelSVC",
    "Box",
    "CATALOG",
    "ConfigError",
    "CoupledConstraint",
    "NonNegOrthant",
    "PenaltyBilevelSolver",
    "PenaltyConfig",
    "ProblemConstants",
    "TrajectoryRecord",
    "alt_pbgd",
    "jnt_pbgd",
    "make_example",
    "pbgd_blocc",
    "pbgd_free",
    "pbgd_free_cc",
    "project",
    "run_algorithm",
]
