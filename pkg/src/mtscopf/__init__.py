"""Multi-timestep security-constrained OPF: a DC MILP commitment stage
followed by per-interval full-AC dispatch under wall-clock budgets."""

from .instance import Instance, parse_instance, validate
from .solution import Solution, read_solution, write_solution
from .pipeline import run_pipeline

__version__ = "0.1.0"

__all__ = ["Instance", "parse_instance", "validate", "Solution",
           "read_solution", "write_solution", "run_pipeline", "__version__"]
