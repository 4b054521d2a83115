"""Bilevel solver: disjunctive branches over multiplier supports.

The optimistic bilevel problem with affine lower-level rows is split into
finitely many branches, one per row subset that can carry the least-norm
multipliers.  Each branch is a polynomial optimization problem over the
shared constraints, the cleared stationarity rows, and complementarity for
the chosen support.  Branch minimizers are checked against the true lower
level; failures produce feasible-extension cuts and the branch is re-solved.
The bilevel optimum is the best value over solved branches, and the report
says whether every branch finished (complete) or some stalled (partial).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from . import fe
from .model import BilevelProblem, LowerElimination, eliminate_lower_equalities
from .model import enumerate_supports, generic_rank
from .multipliers import MultiplierScheme, build_branch_system, build_multipliers
from .poly import Polynomial, RationalFn, VarSpace
from .pop import PolyProgram, PopOptions, RationalObjectiveError
from .pop import minimize_rational, solve_pop

ETA_TOL = 1e-6
VALUE_TIE_TOL = 1e-6
ACTIVE_TOL = 1e-4
POINT_MATCH_TOL = 1e-3
DEN_POSITIVE_TOL = 1e-8


@dataclass(frozen=True)
class SolveOptions:
    rank: Optional[int] = None  # override the generic multiplier rank
    order: Optional[int] = None  # first relaxation order
    extra_orders: int = 3
    seed: int = 42
    max_rounds: int = 10  # cut rounds per branch
    eta_tol: float = ETA_TOL
    ball: Optional[float] = None  # compactifying ball radius around origin
    threads: int = 1
    lower_convex: bool = False  # stationarity already implies lower optimality


@dataclass(frozen=True)
class RoundRecord:
    round: int
    pop_status: str
    value: Optional[float]
    eta: Optional[float]
    # feasible-extension map that generated this round's cut, if any
    extension: Optional[Tuple[Polynomial, ...]] = None


@dataclass(frozen=True)
class BranchOutcome:
    support: Tuple[int, ...]
    status: str  # solved | infeasible | stalled | unbounded | fe_unavailable | max_rounds
    value: Optional[float]
    minimizer: Optional[Tuple[float, ...]]  # point over the reduced space
    bound: Optional[float]
    rounds: Tuple[RoundRecord, ...]
    message: str = ""


@dataclass(frozen=True)
class GlobalReport:
    name: str
    status: str  # complete | partial | infeasible
    value: Optional[float]
    minimizers: Tuple[Tuple[float, ...], ...]  # original-space (x, y) points
    rank: int
    branches: Tuple[BranchOutcome, ...]

    def solved_values(self) -> Tuple[Tuple[Tuple[int, ...], float], ...]:
        return tuple(
            (b.support, b.value) for b in self.branches if b.status == "solved"
        )

    def to_json_dict(self) -> dict:
        return {
            "schema": 1,
            "name": self.name,
            "status": self.status,
            "value": self.value,
            "rank": self.rank,
            "minimizers": [list(map(float, pt)) for pt in self.minimizers],
            "branches": [
                {
                    "support": list(b.support),
                    "status": b.status,
                    "value": b.value,
                    "bound": b.bound,
                    "minimizer": None
                    if b.minimizer is None
                    else list(map(float, b.minimizer)),
                    "rounds": [
                        {
                            "round": r.round,
                            "pop_status": r.pop_status,
                            "value": r.value,
                            "eta": r.eta,
                            "extension": None
                            if r.extension is None
                            else [c.to_text("y") for c in r.extension],
                        }
                        for r in b.rounds
                    ],
                    "message": b.message,
                }
                for b in self.branches
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)


@dataclass(frozen=True)
class LocalCertificate:
    point: Tuple[float, ...]
    value: float
    certified: bool
    method: str  # containment | comparison | none
    support: Optional[Tuple[int, ...]]
    ball_value: Optional[float] = None
    message: str = ""


def _pop_options(options: SolveOptions, order: Optional[int] = None) -> PopOptions:
    return PopOptions(
        order=order if order is not None else options.order,
        extra_orders=options.extra_orders,
        seed=options.seed,
    )


def _origin_ball(space: VarSpace, radius: float) -> Polynomial:
    acc = Polynomial.const(space, radius * radius)
    for i in range(space.total):
        v = Polynomial.variable(space, i)
        acc = acc - v * v
    return acc


def _point_ball(space: VarSpace, center: Sequence[float], radius: float) -> Polynomial:
    acc = Polynomial.const(space, radius * radius)
    for i in range(space.total):
        v = Polynomial.variable(space, i) - float(center[i])
        acc = acc - v * v
    return acc


def _objective_value(problem: BilevelProblem, point: Sequence[float]) -> float:
    return float(problem.upper_obj.evaluate(point))


def _lower_value_at(problem: BilevelProblem, point: Sequence[float]) -> float:
    return float(problem.lower_obj.evaluate(point))


def lower_level_minimize(
    problem: BilevelProblem,
    x_point: Sequence[float],
    y_point: Sequence[float],
    options: SolveOptions,
):
    """Solve the lower level at fixed x.  Returns (value, argmin or None)."""
    zspace = VarSpace(0, problem.p)
    shift = problem.space.n_upper
    idx_map = {shift + i: i for i in range(problem.p)}
    fixvals = {i: float(x_point[i]) for i in range(problem.n)}

    def reduce(poly: Polynomial) -> Polynomial:
        return poly.fix(fixvals).remap(zspace, idx_map)

    rows = [reduce(problem.rows[j].as_poly()) for j in problem.ineq_row_indices()]
    eqs = [reduce(problem.rows[j].as_poly()) for j in problem.eq_row_indices()]
    popts = _pop_options(options)
    f = problem.lower_obj
    if isinstance(f, RationalFn):
        res = minimize_rational(
            reduce(f.num),
            reduce(f.den),
            eqs,
            rows,
            popts,
            feasible_point=np.asarray(y_point, float),
        )
    else:
        res = solve_pop(PolyProgram(reduce(f), tuple(eqs), tuple(rows)), popts)
    if res.status != "optimal":
        return None
    return float(res.value), res.minimizer


def solve_branch(
    problem: BilevelProblem,
    support: Sequence[int],
    options: SolveOptions = SolveOptions(),
    scheme: Optional[MultiplierScheme] = None,
) -> BranchOutcome:
    """Solve one branch, adding feasible-extension cuts as needed."""
    support = tuple(support)
    if scheme is None:
        scheme = build_multipliers(problem, support)
    ball = None
    if options.ball is not None:
        ball = _origin_ball(problem.space, options.ball)
    cuts: list = []
    records: list = []
    last_bound = None
    for rnd in range(options.max_rounds):
        system = build_branch_system(problem, scheme, cuts=cuts, ball=ball)
        pop = PolyProgram(
            problem.upper_obj, system.eq_polys(), system.ineq_polys()
        )
        res = solve_pop(pop, _pop_options(options))
        last_bound = res.bound
        if res.status == "infeasible":
            records.append(RoundRecord(rnd, res.status, None, None))
            return BranchOutcome(
                support, "infeasible", None, None, None, tuple(records),
                message="branch system is infeasible",
            )
        if res.status in ("stalled", "unbounded"):
            records.append(RoundRecord(rnd, res.status, None, None))
            return BranchOutcome(
                support, res.status, None, None, res.bound, tuple(records),
                message=res.message,
            )
        cand = res.minimizer
        theta = float(res.value)
        x_hat = np.asarray(cand[: problem.n], float)
        y_hat = np.asarray(cand[problem.n :], float)
        if options.lower_convex:
            records.append(RoundRecord(rnd, res.status, theta, 0.0))
            return BranchOutcome(
                support, "solved", theta, tuple(map(float, cand)),
                res.bound, tuple(records),
                message="lower level declared convex; stationary points accepted",
            )
        lower = lower_level_minimize(problem, x_hat, y_hat, options)
        if lower is None:
            records.append(RoundRecord(rnd, res.status, theta, None))
            return BranchOutcome(
                support, "stalled", None, None, res.bound, tuple(records),
                message="lower-level verification did not certify",
            )
        low_value, z_hat = lower
        eta = low_value - _lower_value_at(problem, cand)
        records.append(RoundRecord(rnd, res.status, theta, float(eta)))
        if eta >= -options.eta_tol:
            return BranchOutcome(
                support, "solved", theta, tuple(map(float, cand)),
                res.bound, tuple(records),
            )
        if z_hat is None:
            return BranchOutcome(
                support, "fe_unavailable", None, None, res.bound,
                tuple(records),
                message="no lower minimizer available for a refinement cut",
            )
        point = fe.normalize_candidate(
            problem, fe.CandidatePoint(x_hat, y_hat, np.asarray(z_hat, float))
        )
        ext = fe.synthesize_extension(problem, point)
        if ext is None:
            return BranchOutcome(
                support, "fe_unavailable", None, None, res.bound,
                tuple(records),
                message="no certified feasible extension for the candidate",
            )
        cut, den = fe.extension_cut(problem, ext)
        if den is not None and not _denominator_positive(
            problem, system, den, options
        ):
            return BranchOutcome(
                support, "fe_unavailable", None, None, res.bound,
                tuple(records),
                message="cut denominator could not be certified positive",
            )
        cuts.append(cut)
        records[-1] = replace(records[-1], extension=ext.components)
    return BranchOutcome(
        support, "max_rounds", None, None, last_bound, tuple(records),
        message="cut budget exhausted before the branch settled",
    )


def _denominator_positive(problem, system, den, options: SolveOptions) -> bool:
    pop = PolyProgram(den, system.eq_polys(), system.ineq_polys())
    res = solve_pop(pop, _pop_options(options))
    if res.status == "infeasible":
        return True  # empty branch; the cut is vacuous there
    if res.bound is None:
        return False
    return res.bound > DEN_POSITIVE_TOL


def solve(
    problem: BilevelProblem, options: SolveOptions = SolveOptions()
) -> GlobalReport:
    reduced, elim = eliminate_lower_equalities(problem)
    rank = generic_rank(reduced, seed=options.seed, override=options.rank)
    if rank == 0:
        supports: Tuple[Tuple[int, ...], ...] = ((),)
    else:
        supports = enumerate_supports(reduced, rank, seed=options.seed)
    schemes = [build_multipliers(reduced, J) for J in supports]

    def run(pair):
        J, scheme = pair
        return solve_branch(reduced, J, options, scheme=scheme)

    if options.threads > 1 and len(supports) > 1:
        with ThreadPoolExecutor(max_workers=options.threads) as pool:
            outcomes = tuple(pool.map(run, zip(supports, schemes)))
    else:
        outcomes = tuple(run(pair) for pair in zip(supports, schemes))

    solved = [b for b in outcomes if b.status == "solved"]
    value = min((b.value for b in solved), default=None)
    minimizers: list = []
    if value is not None:
        for b in solved:
            if b.value <= value + VALUE_TIE_TOL and b.minimizer is not None:
                lifted = _lift_minimizer(problem, elim, b.minimizer)
                if not any(
                    np.allclose(lifted, m, atol=1e-6) for m in minimizers
                ):
                    minimizers.append(lifted)
    if all(b.status == "infeasible" for b in outcomes):
        status = "infeasible"
    elif all(b.status in ("solved", "infeasible") for b in outcomes):
        status = "complete"
    else:
        status = "partial"
    minimizers.sort(key=lambda m: tuple(m))
    return GlobalReport(
        name=problem.name,
        status=status,
        value=value,
        minimizers=tuple(tuple(map(float, m)) for m in minimizers),
        rank=rank,
        branches=outcomes,
    )


def _lift_minimizer(
    problem: BilevelProblem, elim: LowerElimination, point: Sequence[float]
) -> np.ndarray:
    n = problem.n
    x_part = np.asarray(point[:n], float)
    y_reduced = np.asarray(point[n:], float)
    y_full = elim.lift_point(x_part, y_reduced)
    return np.concatenate([x_part, y_full])


def verify_local(
    problem: BilevelProblem,
    report: GlobalReport,
    point: Sequence[float],
    options: SolveOptions = SolveOptions(),
    active_tol: float = ACTIVE_TOL,
    match_tol: float = POINT_MATCH_TOL,
    ball_check: bool = False,
    rho: float = 0.05,
) -> LocalCertificate:
    """Certify a candidate as a local bilevel minimizer from branch data.

    Containment: some solved branch attains the point and its support covers
    every active lower row there.  Comparison: the candidate value beats
    every solved branch whose support sits inside the active set; branches
    outside the active set cannot undercut the point locally.  A failed
    comparison (a strictly better value on an active-set branch) rejects the
    point.
    """
    reduced, elim = eliminate_lower_equalities(problem)
    pt = np.asarray(point, float)
    restricted = np.concatenate(
        [pt[: problem.n], elim.restrict_point(pt[problem.n :])]
    )
    value = _objective_value(reduced, restricted)
    active = set(reduced.active_inequalities(restricted, tol=active_tol))

    for b in report.branches:
        if b.status != "solved" or b.minimizer is None:
            continue
        if np.max(np.abs(np.asarray(b.minimizer) - restricted)) > match_tol:
            continue
        if not set(b.support) >= active:
            continue
        if ball_check:
            ball_val = _ball_minimum(reduced, b.support, restricted, rho, options)
            if ball_val is None:
                return LocalCertificate(
                    tuple(map(float, pt)), value, False, "none", b.support,
                    message="ball re-solve stalled; not certified",
                )
            if ball_val < value - 1e-6:
                return LocalCertificate(
                    tuple(map(float, pt)), value, False, "none", b.support,
                    ball_value=ball_val,
                    message="a better point exists inside the ball",
                )
            return LocalCertificate(
                tuple(map(float, pt)), value, True, "containment", b.support,
                ball_value=ball_val,
            )
        return LocalCertificate(
            tuple(map(float, pt)), value, True, "containment", b.support
        )

    checked = 0
    for b in report.branches:
        if not set(b.support) <= active:
            continue
        if b.status == "infeasible":
            continue
        if b.status != "solved":
            return LocalCertificate(
                tuple(map(float, pt)), value, False, "none", None,
                message=f"branch {b.support} over the active set is unresolved",
            )
        checked += 1
        if value > b.value + 1e-6:
            return LocalCertificate(
                tuple(map(float, pt)), value, False, "none", b.support,
                message=(
                    f"branch {b.support} attains {b.value:.6f}, "
                    "strictly below the candidate"
                ),
            )
    return LocalCertificate(
        tuple(map(float, pt)), value, True, "comparison", None,
        message=f"{checked} active-set branches compared",
    )


def _ball_minimum(
    problem: BilevelProblem,
    support: Tuple[int, ...],
    center: np.ndarray,
    rho: float,
    options: SolveOptions,
) -> Optional[float]:
    scheme = build_multipliers(problem, support)
    ball = _point_ball(problem.space, center, rho)
    system = build_branch_system(problem, scheme, ball=ball)
    pop = PolyProgram(problem.upper_obj, system.eq_polys(), system.ineq_polys())
    res = solve_pop(pop, _pop_options(options))
    if res.status == "optimal":
        return float(res.value)
    if res.status == "infeasible":
        return None
    return None
