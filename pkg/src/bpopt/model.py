"""Problem data model for bilevel programs with affine lower-level constraints.

The lower level is  min_z f(x, z)  subject to rows  a_j(x)^T z - b_j(x)
(= 0 for equality rows, >= 0 for inequality rows), with polynomial a_j, b_j.
The shared feasible region U consists of the upper-level constraints together
with every lower-level row rewritten in the upper copy of the variables.

This module parses and validates problems, eliminates equality rows with
constant coefficients by Gaussian pivoting, samples the generic rank of the
row-coefficient matrix A(x), and enumerates the rank-respecting supports that
drive the disjunctive decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import combinations
from math import comb
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import parsing
from .poly import PolyError, PolyMatrix, Polynomial, RationalFn, VarSpace

PolyLike = Union[Polynomial, RationalFn]

RANK_SAMPLE_COUNT = 12
RANK_SAMPLE_BOX = 2.0
SV_CUTOFF = 1e-8
SUPPORT_CAP = 2000


class ModelError(ValueError):
    """Structural problem-data error (non-affine rows, bad elimination, ...)."""


class BudgetError(RuntimeError):
    """A combinatorial size cap was exceeded."""


@dataclass(frozen=True)
class LowerRow:
    """One lower-level constraint row a(x)^T z - b(x) (kind 'eq' or 'ineq')."""

    coeffs: Tuple[Polynomial, ...]
    rhs: Polynomial
    kind: str

    def as_poly(self) -> Polynomial:
        space = self.rhs.space
        acc = -self.rhs
        for i, a in enumerate(self.coeffs):
            acc = acc + a * Polynomial.variable(space, space.n_upper + i)
        return acc

    def coeff_degree(self) -> int:
        return max((a.degree for a in self.coeffs), default=0)


@dataclass(frozen=True)
class BilevelProblem:
    space: VarSpace
    upper_obj: Polynomial
    upper_eq: Tuple[Polynomial, ...]
    upper_ineq: Tuple[Polynomial, ...]
    lower_obj: PolyLike
    rows: Tuple[LowerRow, ...]
    name: str = ""

    @property
    def n(self) -> int:
        return self.space.n_upper

    @property
    def p(self) -> int:
        return self.space.n_lower

    @property
    def m(self) -> int:
        return len(self.rows)

    def eq_row_indices(self) -> Tuple[int, ...]:
        return tuple(j for j, r in enumerate(self.rows) if r.kind == "eq")

    def ineq_row_indices(self) -> Tuple[int, ...]:
        return tuple(j for j, r in enumerate(self.rows) if r.kind == "ineq")

    def row_poly(self, j: int) -> Polynomial:
        return self.rows[j].as_poly()

    def lower_A(self, support: Sequence[int]) -> PolyMatrix:
        return PolyMatrix([list(self.rows[j].coeffs) for j in support])

    def A_eval(self, x_point: Sequence[float]) -> np.ndarray:
        """Numeric row-coefficient matrix A(x), shape (m, p)."""
        pt = list(x_point) + [0.0] * self.p
        return np.array(
            [[a.evaluate(pt) for a in row.coeffs] for row in self.rows]
        )

    def coeffs_constant(self) -> bool:
        return all(a.is_constant() for row in self.rows for a in row.coeffs)

    def shared_feasibility_residual(self, point: Sequence[float]) -> float:
        """Max violation of U at a full (x, y) point."""
        worst = 0.0
        for h in self.upper_eq:
            worst = max(worst, abs(h.evaluate(point)))
        for h in self.upper_ineq:
            worst = max(worst, -min(0.0, h.evaluate(point)))
        for j, row in enumerate(self.rows):
            v = row.as_poly().evaluate(point)
            worst = max(worst, abs(v) if row.kind == "eq" else -min(0.0, v))
        return worst

    def active_inequalities(self, point: Sequence[float], tol: float = 1e-4) -> Tuple[int, ...]:
        """Lower rows active at (x, y): every eq row plus ineq rows within tol of 0."""
        out = []
        for j, row in enumerate(self.rows):
            if row.kind == "eq":
                out.append(j)
            elif abs(row.as_poly().evaluate(point)) <= tol:
                out.append(j)
        return tuple(out)


def assemble(parsed: parsing.ParsedSource, name: str = "") -> BilevelProblem:
    """Validate a parsed source and build the problem model."""
    space = parsed.space
    lower_idx = tuple(space.lower_indices())
    rows: List[LowerRow] = []
    for kind, section, exprs in (
        ("eq", "lower.eq", parsed.lower_eq),
        ("ineq", "lower.ineq", parsed.lower_ineq),
    ):
        for pos, g in enumerate(exprs, start=1):
            zdeg = g.degree_in(lower_idx)
            if zdeg > 1:
                raise ModelError(
                    f"{section} #{pos} is not affine in the lower variables "
                    f"(degree {zdeg} in z)"
                )
            coeffs = tuple(g.differentiate(i) for i in lower_idx)
            rhs = -g.fix({i: 0.0 for i in lower_idx})
            rows.append(LowerRow(coeffs=coeffs, rhs=rhs, kind=kind))
    # row indices: lower.eq lines first (file order), then lower.ineq lines
    return BilevelProblem(
        space=space,
        upper_obj=parsed.upper_obj,
        upper_eq=tuple(parsed.upper_eq),
        upper_ineq=tuple(parsed.upper_ineq),
        lower_obj=parsed.lower_obj,
        rows=tuple(rows),
        name=name,
    )


def build_problem(text: str, name: str = "") -> BilevelProblem:
    return assemble(parsing.parse_source(text), name=name)


def load_problem(path: str, name: str = "") -> BilevelProblem:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return build_problem(text, name=name or path)


def problem_to_text(problem: BilevelProblem) -> str:
    """Render back to the file format (round-trips through the parser)."""
    lines = [f"vars x {problem.n} y {problem.p}"]
    lines.append(f"upper.obj {problem.upper_obj.to_text('y')}")
    for h in problem.upper_eq:
        lines.append(f"upper.eq {h.to_text('y')}")
    for h in problem.upper_ineq:
        lines.append(f"upper.ineq {h.to_text('y')}")
    lines.append(f"lower.obj {problem.lower_obj.to_text('z')}")
    for row in problem.rows:
        key = "lower.eq" if row.kind == "eq" else "lower.ineq"
        lines.append(f"{key} {row.as_poly().to_text('z')}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# equality-row elimination


@dataclass(frozen=True)
class LowerElimination:
    """Change of lower variables after equality-row elimination.

    ``backmap[i]`` expresses original lower variable i as a polynomial over
    the reduced space (x variables plus the surviving free z's).
    """

    original_p: int
    free_original: Tuple[int, ...]
    backmap: Tuple[Polynomial, ...]
    promoted_rows: Tuple[int, ...] = ()

    @property
    def is_identity(self) -> bool:
        return len(self.free_original) == self.original_p

    def lift_point(self, x_point: Sequence[float], y_reduced: Sequence[float]) -> np.ndarray:
        pt = list(x_point) + list(y_reduced)
        return np.array([b.evaluate(pt) for b in self.backmap])

    def restrict_point(self, y_full: Sequence[float]) -> np.ndarray:
        return np.array([y_full[i] for i in self.free_original])


def eliminate_lower_equalities(
    problem: BilevelProblem, tol: float = 1e-9
) -> Tuple[BilevelProblem, LowerElimination]:
    """Remove equality rows with constant coefficients by Gaussian pivoting.

    Returns the reduced problem (inequality rows only) and the variable map.
    Rows that lose all z dependence after substitution move to the upper
    inequality list (they constrain x only).  Raises ``ModelError`` for
    x-dependent equality coefficients or an inconsistent equality system.
    """
    eq_idx = problem.eq_row_indices()
    if not eq_idx:
        ident = LowerElimination(
            original_p=problem.p,
            free_original=tuple(range(problem.p)),
            backmap=tuple(
                Polynomial.variable(problem.space, problem.space.n_upper + i)
                for i in range(problem.p)
            ),
        )
        return problem, ident

    p = problem.p
    for j in eq_idx:
        for a in problem.rows[j].coeffs:
            if not a.is_constant():
                raise ModelError(
                    f"equality row #{j + 1} has x-dependent coefficients; "
                    "only constant-coefficient equality rows can be eliminated"
                )
    E = np.array(
        [[a.constant_value() for a in problem.rows[j].coeffs] for j in eq_idx]
    )
    rhs: List[Polynomial] = [problem.rows[j].rhs for j in eq_idx]
    k = E.shape[0]
    scale = max(np.max(np.abs(E)), 1.0)

    pivots: List[Tuple[int, int]] = []  # (row, col)
    row = 0
    for col in range(p):
        if row >= k:
            break
        sub = np.abs(E[row:, col])
        best = int(np.argmax(sub)) + row
        if abs(E[best, col]) <= tol * scale:
            continue
        if best != row:
            E[[row, best]] = E[[best, row]]
            rhs[row], rhs[best] = rhs[best], rhs[row]
        piv = E[row, col]
        E[row] = E[row] / piv
        rhs[row] = rhs[row] * (1.0 / piv)
        for r in range(k):
            if r != row and abs(E[r, col]) > 0:
                factor = E[r, col]
                E[r] = E[r] - factor * E[row]
                rhs[r] = rhs[r] - rhs[row] * factor
        pivots.append((row, col))
        row += 1
    rhs_scale = max([q.max_abs_coeff() for q in rhs] + [1.0])
    for r in range(row, k):
        if rhs[r].max_abs_coeff() > 1e-9 * rhs_scale:
            raise ModelError(
                "lower-level equality rows are inconsistent (no z satisfies them)"
            )

    pivot_cols = [c for _, c in pivots]
    free_cols = [c for c in range(p) if c not in pivot_cols]
    if not free_cols:
        raise ModelError(
            "equality rows determine every lower variable; the lower level "
            "has no remaining freedom and is not supported here"
        )
    reduced_space = VarSpace(problem.n, len(free_cols))
    index_map: Dict[int, int] = {i: i for i in range(problem.n)}
    for new_i, c in enumerate(free_cols):
        index_map[problem.n + c] = problem.n + new_i

    # backmap over the reduced space
    backmap: List[Polynomial] = [Polynomial.zero(reduced_space)] * p
    for new_i, c in enumerate(free_cols):
        backmap[c] = Polynomial.variable(reduced_space, problem.n + new_i)
    for r, c in pivots:
        expr = rhs[r].remap(reduced_space, index_map)
        for fc in free_cols:
            coeff = E[r, fc]
            if abs(coeff) > tol * scale:
                expr = expr - coeff * Polynomial.variable(
                    reduced_space, problem.n + free_cols.index(fc)
                )
        backmap[c] = expr

    subs: Dict[int, Polynomial] = {
        i: Polynomial.variable(reduced_space, index_map[i]) for i in range(problem.n)
    }
    for c in range(p):
        subs[problem.n + c] = backmap[c]

    def sub_poly(q: Polynomial) -> Polynomial:
        out = q.substitute(subs)
        if isinstance(out, RationalFn):
            out = out.as_polynomial()
        return out

    new_upper_eq = [sub_poly(h) for h in problem.upper_eq]
    new_upper_ineq = [sub_poly(h) for h in problem.upper_ineq]
    new_lower_obj: PolyLike
    if isinstance(problem.lower_obj, RationalFn):
        sub_obj = problem.lower_obj.substitute(subs)
        new_lower_obj = sub_obj
    else:
        new_lower_obj = sub_poly(problem.lower_obj)

    reduced_lower_idx = tuple(reduced_space.lower_indices())
    new_rows: List[LowerRow] = []
    promoted: List[int] = []
    for j in problem.ineq_row_indices():
        g = sub_poly(problem.row_poly(j)).chop(1e-13)
        if g.degree_in(reduced_lower_idx) == 0:
            if g.is_constant():
                if g.constant_value() < -1e-9:
                    raise ModelError(
                        f"lower.ineq row #{j + 1} is constant and violated after "
                        "equality elimination; the lower level is infeasible"
                    )
                continue
            new_upper_ineq.append(g)
            promoted.append(j)
            continue
        coeffs = tuple(g.differentiate(i) for i in reduced_lower_idx)
        rhs_poly = -g.fix({i: 0.0 for i in reduced_lower_idx})
        new_rows.append(LowerRow(coeffs=coeffs, rhs=rhs_poly, kind="ineq"))

    reduced = BilevelProblem(
        space=reduced_space,
        upper_obj=sub_poly(problem.upper_obj),
        upper_eq=tuple(new_upper_eq),
        upper_ineq=tuple(new_upper_ineq),
        lower_obj=new_lower_obj,
        rows=tuple(new_rows),
        name=problem.name,
    )
    elim = LowerElimination(
        original_p=p,
        free_original=tuple(free_cols),
        backmap=tuple(backmap),
        promoted_rows=tuple(promoted),
    )
    return reduced, elim


# ---------------------------------------------------------------------------
# generic rank and supports


def _sample_points(problem: BilevelProblem, seed: int, count: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-RANK_SAMPLE_BOX, RANK_SAMPLE_BOX, size=(count, problem.n))


def _numeric_rank(mat: np.ndarray) -> int:
    if mat.size == 0:
        return 0
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > SV_CUTOFF * sv[0]))


def generic_rank(
    problem: BilevelProblem,
    seed: int = 42,
    samples: int = RANK_SAMPLE_COUNT,
    override: Optional[int] = None,
) -> int:
    """Generic rank of A(x): sampled, or exact for constant coefficients."""
    if override is not None:
        if not 1 <= override <= min(problem.m, problem.p):
            raise ModelError(
                f"rank override {override} outside [1, {min(problem.m, problem.p)}]"
            )
        return override
    if problem.m == 0:
        return 0
    if problem.coeffs_constant():
        return _numeric_rank(problem.A_eval([0.0] * problem.n))
    pts = _sample_points(problem, seed, samples)
    return max(_numeric_rank(problem.A_eval(x)) for x in pts)


def enumerate_supports(
    problem: BilevelProblem,
    t: int,
    seed: int = 42,
    samples: int = RANK_SAMPLE_COUNT,
    cap: int = SUPPORT_CAP,
) -> Tuple[Tuple[int, ...], ...]:
    """All size-t row subsets whose coefficient block reaches rank t somewhere.

    Subsets are tested at the same sample points used for the generic rank
    (single evaluation for constant coefficients).  Deterministic order.
    """
    if t == 0:
        return ()
    total = comb(problem.m, t)
    if total > cap:
        raise BudgetError(
            f"{total} candidate supports of size {t} from {problem.m} rows "
            f"exceed the cap of {cap}"
        )
    if problem.coeffs_constant():
        mats = [problem.A_eval([0.0] * problem.n)]
    else:
        mats = [problem.A_eval(x) for x in _sample_points(problem, seed, samples)]
    retained = []
    for J in combinations(range(problem.m), t):
        for A in mats:
            if _numeric_rank(A[list(J)]) == t:
                retained.append(J)
                break
    return tuple(retained)


def with_extra_upper_ineq(problem: BilevelProblem, extra: Sequence[Polynomial]) -> BilevelProblem:
    return replace(problem, upper_ineq=problem.upper_ineq + tuple(extra))
