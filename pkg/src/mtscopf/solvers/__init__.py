"""Bundled desk-scale solvers: LP simplex, branch-and-bound MILP,
augmented-Lagrangian NLP, and MPS model exchange."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class SolverError(Exception):
    pass


class NumericError(SolverError):
    """Numeric breakdown, reported with the offending row/column."""

    def __init__(self, message, row=None, col=None):
        self.row = row
        self.col = col
        super().__init__(f"{message} (row={row}, col={col})")


@dataclass
class SolveOptions:
    time_limit: float = 300.0  # seconds
    mip_gap: float = 1e-4  # relative
    feas_tol: float = 1e-7
    opt_tol: float = 1e-7
    worker_count: int = 1

    def __post_init__(self):
        if self.time_limit <= 0:
            raise ValueError("time_limit must be positive")
        for name in ("mip_gap", "feas_tol", "opt_tol"):
            v = getattr(self, name)
            if not (0 < v <= 1e-2):
                raise ValueError(f"{name} must be in (0, 1e-2], got {v}")
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")


@dataclass
class LpResult:
    status: str  # optimal | infeasible | unbounded | iteration_limit | time_limit
    objective: float | None  # in the model's (maximize) sense
    x: np.ndarray | None  # structural variable values
    iterations: int = 0
    basis: object = None  # opaque warm-start snapshot


@dataclass
class MilpResult:
    status: str  # optimal | incumbent_time_limit | infeasible_reported
    objective: float | None
    x: np.ndarray | None
    bound: float  # best dual bound (maximize: upper bound)
    gap: float
    nodes: int = 0
    log: list[str] = field(default_factory=list)


@dataclass
class NlpResult:
    status: str  # converged | max_iter | time_limit
    x: np.ndarray
    objective: float
    residual: float  # constraint residual inf-norm
    iterations: int
    stationarity: float = math.inf


from .simplex import solve_lp  # noqa: E402
from .branch_bound import solve_milp  # noqa: E402
from .aug_lag import solve_nlp  # noqa: E402
from .mps import export_mps, parse_mps  # noqa: E402

__all__ = [
    "SolveOptions", "SolverError", "NumericError",
    "LpResult", "MilpResult", "NlpResult",
    "solve_lp", "solve_milp", "solve_nlp", "export_mps", "parse_mps",
]
