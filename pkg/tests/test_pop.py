"""Moment hierarchy: relaxation assembly, flat truncation, extraction."""

import numpy as np
import pytest

from bpopt.conic import solve_conic
from bpopt.poly import Polynomial, VarSpace
from bpopt.pop import (
    PolyProgram,
    PopOptions,
    PopResult,
    RationalObjectiveError,
    minimize_rational,
    moment_count,
    monomials,
    relax,
    solve_pop,
)

from _oracles import oracle_minimize, random_poly


def make_vars(n):
    space = VarSpace(n, 0)
    return space, [Polynomial.variable(space, i) for i in range(n)]


def box(space, vs, lo=-1.0, hi=1.0):
    one = Polynomial.const(space, 1.0)
    out = []
    for v in vs:
        out.append(v - lo * one)
        out.append(hi * one - v)
    return out


# -- basis bookkeeping -------------------------------------------------


def test_monomials_graded_and_complete():
    ms = monomials(2, 2)
    assert ms == [(0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0)]
    assert len(monomials(3, 4)) == moment_count(3, 2)


def test_monomials_degree_prefix_property():
    ms = monomials(3, 3)
    degs = [sum(m) for m in ms]
    assert degs == sorted(degs)


# -- analytic problems --------------------------------------------------


def test_min_square_on_interval():
    space, (x,) = make_vars(1)
    pop = PolyProgram(x * x, ineqs=tuple(box(space, [x])))
    res = solve_pop(pop)
    assert res.status == "optimal"
    assert res.value == pytest.approx(0.0, abs=1e-6)
    assert res.minimizer[0] == pytest.approx(0.0, abs=5e-4)


def test_linear_objective_tight_bound():
    space, (x,) = make_vars(1)
    pop = PolyProgram(x, ineqs=(x - Polynomial.const(space, 0.25),
                                Polynomial.const(space, 1.0) - x))
    res = solve_pop(pop)
    assert res.status == "optimal"
    assert res.value == pytest.approx(0.25, abs=1e-7)
    assert res.minimizer[0] == pytest.approx(0.25, abs=1e-6)


def test_shifted_quadratic_two_vars():
    space, (x, y) = make_vars(2)
    obj = (x - 0.3) ** 2 + (y - 0.7) ** 2
    pop = PolyProgram(obj, ineqs=tuple(box(space, [x, y])))
    res = solve_pop(pop)
    assert res.status == "optimal"
    assert res.value == pytest.approx(0.0, abs=1e-6)
    np.testing.assert_allclose(res.minimizer, [0.3, 0.7], atol=5e-4)


def test_circle_equality_linear_objective():
    # min x+y on the unit circle: -sqrt(2) at both coordinates -1/sqrt(2)
    space, (x, y) = make_vars(2)
    circle = x * x + y * y - Polynomial.const(space, 1.0)
    pop = PolyProgram(x + y, eqs=(circle,))
    res = solve_pop(pop)
    assert res.status == "optimal"
    assert res.value == pytest.approx(-np.sqrt(2.0), abs=1e-6)
    np.testing.assert_allclose(res.minimizer, [-np.sqrt(0.5), -np.sqrt(0.5)], atol=5e-4)


def test_two_symmetric_minimizers_extracted():
    space, (x,) = make_vars(1)
    obj = (x * x - Polynomial.const(space, 1.0)) ** 2
    pop = PolyProgram(obj, ineqs=tuple(box(space, [x], -2.0, 2.0)))
    res = solve_pop(pop)
    assert res.status == "optimal"
    assert res.value == pytest.approx(0.0, abs=1e-6)
    roots = sorted(p[0] for p in res.points)
    assert len(roots) == 2
    assert roots[0] == pytest.approx(-1.0, abs=5e-4)
    assert roots[1] == pytest.approx(1.0, abs=5e-4)


def test_motzkin_needs_higher_order():
    # x^4 y^2 + x^2 y^4 - 3 x^2 y^2 + 1: nonnegative, zero at |x| = |y| = 1
    space, (x, y) = make_vars(2)
    obj = (
        x ** 4 * y ** 2
        + x ** 2 * y ** 4
        - 3.0 * x ** 2 * y ** 2
        + Polynomial.const(space, 1.0)
    )
    ball = Polynomial.const(space, 4.0) - x * x - y * y
    pop = PolyProgram(obj, ineqs=(ball,))
    res = solve_pop(pop)
    assert res.status == "optimal"
    assert res.value == pytest.approx(0.0, abs=1e-5)
    assert res.order > pop.min_order() or res.flat_order is not None
    for p in res.points:
        np.testing.assert_allclose(np.abs(p), [1.0, 1.0], atol=5e-4)


def test_infeasible_constraints_detected():
    space, (x,) = make_vars(1)
    one = Polynomial.const(space, 1.0)
    pop = PolyProgram(x, ineqs=(x - one, -x))
    res = solve_pop(pop)
    assert res.status == "infeasible"


def test_unbounded_problem_never_reports_optimal():
    # min x with no constraints: the moment cone has no improving ray, so
    # the relaxation diverges; what matters is that no optimum is claimed
    space, (x,) = make_vars(1)
    pop = PolyProgram(x)
    res = solve_pop(pop)
    assert res.status in ("stalled", "unbounded")
    assert res.points == ()


def test_constant_objective_feasibility():
    space, (x,) = make_vars(1)
    pop = PolyProgram(Polynomial.const(space, 3.5), ineqs=tuple(box(space, [x])))
    res = solve_pop(pop)
    assert res.status == "optimal"
    assert res.value == pytest.approx(3.5, abs=1e-7)


def test_moment_budget_skips_gracefully():
    space, vs = make_vars(17)
    obj = sum(vs[1:], vs[0])
    pop = PolyProgram(obj, ineqs=tuple(box(space, vs)))
    res = solve_pop(pop, PopOptions(order=4, extra_orders=0))
    assert res.status == "stalled"
    assert "moments" in res.message
    assert res.history[-1][1] == "skipped"


def test_extraction_deterministic_across_runs():
    space, (x, y) = make_vars(2)
    obj = (x * x - Polynomial.const(space, 1.0)) ** 2 + (y - 0.5) ** 2
    pop = PolyProgram(obj, ineqs=tuple(box(space, [x, y], -2.0, 2.0)))
    r1 = solve_pop(pop, PopOptions(seed=7))
    r2 = solve_pop(pop, PopOptions(seed=7))
    assert r1.status == r2.status == "optimal"
    assert len(r1.points) == len(r2.points)
    for a, b in zip(r1.points, r2.points):
        assert np.array_equal(a, b)


# -- relaxation structure ------------------------------------------------


def test_order_zero_localizer_becomes_row():
    space, (x,) = make_vars(1)
    one = Polynomial.const(space, 1.0)
    pop = PolyProgram(x * x, ineqs=(one - x * x,))
    prog, _ = relax(pop, 1)
    assert prog.lin_D is not None and prog.lin_D.shape[0] == 1
    assert len(prog.psd_blocks) == 1  # just the main moment block


def test_higher_order_localizer_is_block():
    space, (x,) = make_vars(1)
    one = Polynomial.const(space, 1.0)
    pop = PolyProgram(x * x, ineqs=(one - x * x,))
    prog, _ = relax(pop, 2)
    assert len(prog.psd_blocks) == 2
    assert prog.psd_blocks[1].dim == 2  # order-1 localizer over {1, x}


def test_equality_row_count():
    space, (x, y) = make_vars(2)
    h = x + y - Polynomial.const(space, 1.0)
    pop = PolyProgram(x * x + y * y, eqs=(h,))
    prog, meta = relax(pop, 2)
    # one row per monomial of degree <= 2k - deg h = 3
    assert prog.eq_A.shape[0] == moment_count(2, 1) + 4  # C(2+3,3)=10 rows


def test_bound_monotone_in_order():
    rng = np.random.default_rng(11)
    space, (x, y) = make_vars(2)
    obj = random_poly(rng, space, max_deg=4, n_terms=8, int_coeffs=True)
    ball = Polynomial.const(space, 2.0) - x * x - y * y
    pop = PolyProgram(obj, ineqs=tuple(box(space, [x, y])) + (ball,))
    bounds = []
    for k in range(pop.min_order(), pop.min_order() + 2):
        prog, _ = relax(pop, k)
        res = solve_conic(prog)
        assert res.status == "optimal"
        bounds.append(res.objective)
    assert bounds[1] >= bounds[0] - 1e-7


# -- randomized agreement with the grid+polish oracle --------------------


@pytest.mark.parametrize("seed", range(12))
def test_random_pop_matches_oracle(seed):
    rng = np.random.default_rng(1000 + seed)
    space, (x, y) = make_vars(2)
    obj = random_poly(rng, space, max_deg=4, n_terms=7, int_coeffs=True)
    ineqs = tuple(box(space, [x, y]))
    pop = PolyProgram(obj, ineqs=ineqs)
    res = solve_pop(pop)
    ref, _ = oracle_minimize(
        lambda p: obj.evaluate(p),
        constraints=[],
        bounds=[(-1.0, 1.0), (-1.0, 1.0)],
        refine=3,
        pts=15,
    )
    assert res.bound is not None
    assert res.bound <= ref + 1e-4
    if res.status == "optimal":
        assert res.value == pytest.approx(ref, abs=1e-4)
        assert pop.residual(res.minimizer) <= 1e-5


# -- rational objectives --------------------------------------------------


def test_minimize_rational_interval():
    # min (1 + x^2) / (2 - x) on [-1, 1]; stationary at x = 2 - sqrt(5)
    space, (x,) = make_vars(1)
    one = Polynomial.const(space, 1.0)
    num = one + x * x
    den = 2.0 * one - x
    xstar = 2.0 - np.sqrt(5.0)
    fstar = 2.0 * np.sqrt(5.0) - 4.0
    grid = np.linspace(-1.0, 1.0, 20001)
    vals = (1.0 + grid ** 2) / (2.0 - grid)
    assert vals.min() == pytest.approx(fstar, abs=1e-7)

    res = minimize_rational(num, den, eqs=(), ineqs=tuple(box(space, [x])))
    assert res.status == "optimal"
    assert res.value == pytest.approx(fstar, abs=1e-5)
    assert res.minimizer is not None
    assert res.minimizer[0] == pytest.approx(xstar, abs=1e-3)


def test_minimize_rational_rejects_sign_changing_denominator():
    space, (x,) = make_vars(1)
    one = Polynomial.const(space, 1.0)
    with pytest.raises(RationalObjectiveError):
        minimize_rational(one, x, eqs=(), ineqs=tuple(box(space, [x])))


def test_minimize_rational_feasible_point_seed():
    space, (x,) = make_vars(1)
    one = Polynomial.const(space, 1.0)
    num = x * x + one
    den = x + 3.0 * one
    res = minimize_rational(
        num, den, eqs=(), ineqs=tuple(box(space, [x])),
        feasible_point=np.array([0.5]),
    )
    grid = np.linspace(-1.0, 1.0, 20001)
    ref = ((grid ** 2 + 1.0) / (grid + 3.0)).min()
    assert res.status == "optimal"
    assert res.value == pytest.approx(ref, abs=1e-5)
