"""Bilevel polynomial optimization with affine lower-level constraints.

The pipeline: closed-form multiplier expressions on row subsets, a
disjunctive branch decomposition, moment relaxations solved by an in-repo
conic interior-point method, lower-level verification with feasible-extension
cuts, and local/global optimality certification.
"""

from .poly import PolyError, PolyMatrix, Polynomial, RationalFn, VarSpace
from .parsing import ParseError, parse_source
from .model import (
    BilevelProblem,
    BudgetError,
    LowerElimination,
    LowerRow,
    ModelError,
    build_problem,
    eliminate_lower_equalities,
    enumerate_supports,
    generic_rank,
    load_problem,
    problem_to_text,
)

__version__ = "0.1.0"

__all__ = [
    "BilevelProblem",
    "BudgetError",
    "LowerElimination",
    "LowerRow",
    "ModelError",
    "ParseError",
    "PolyError",
    "PolyMatrix",
    "Polynomial",
    "RationalFn",
    "VarSpace",
    "build_problem",
    "eliminate_lower_equalities",
    "enumerate_supports",
    "generic_rank",
    "load_problem",
    "parse_source",
    "problem_to_text",
    "__version__",
]
