import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpopt.poly import (
    PolyError,
    PolyMatrix,
    Polynomial,
    RationalFn,
    VarSpace,
    poly_dot,
)

from _oracles import from_sympy, random_poly, rational_to_sympy, sym_vars, to_sympy

import sympy as sp

SP2 = VarSpace(1, 1)  # x1, y1
SP22 = VarSpace(2, 2)


def x(space=SP2, i=0):
    return Polynomial.variable(space, i)


def y(space=SP2, i=0):
    return Polynomial.variable(space, space.n_upper + i)


def test_binomial_square_expands():
    f = (x() + y()) ** 2
    expected = x() * x() + 2.0 * (x() * y()) + y() * y()
    assert f == expected


def test_constant_and_zero_normalization():
    z = Polynomial.const(SP2, 0.0)
    assert z.is_zero() and z.n_terms() == 0
    f = x() - x()
    assert f.is_zero()
    assert (f + 3.0).constant_value() == 3.0


def test_degree_bookkeeping():
    f = x() ** 3 * y() + y() ** 2
    assert f.degree == 4
    assert f.degree_in([0]) == 3
    assert f.degree_in([1]) == 2


def test_evaluate_simple():
    f = (x() - 1.5) ** 2 + y() ** 2
    assert f.evaluate([1.9, 0.2]) == pytest.approx(0.2, abs=1e-12)


def test_evaluate_many_matches_scalar():
    rng = np.random.default_rng(0)
    f = random_poly(rng, SP22, max_deg=4, n_terms=8, int_coeffs=False)
    pts = rng.normal(size=(40, 4))
    vec = f.evaluate_many(pts)
    for k in range(40):
        assert vec[k] == pytest.approx(f.evaluate(pts[k]), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_product_matches_sympy(seed):
    rng = np.random.default_rng(100 + seed)
    f = random_poly(rng, SP22)
    g = random_poly(rng, SP22)
    syms = sym_vars(SP22)
    expected = from_sympy(to_sympy(f, syms) * to_sympy(g, syms), SP22, syms)
    assert (f * g).almost_equal(expected, tol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_differentiate_matches_sympy(seed):
    rng = np.random.default_rng(200 + seed)
    f = random_poly(rng, SP22, max_deg=5)
    syms = sym_vars(SP22)
    for i in range(4):
        expected = from_sympy(sp.diff(to_sympy(f, syms), syms[i]), SP22, syms)
        assert f.differentiate(i).almost_equal(expected, tol=1e-12)


def test_substitute_polynomial_matches_sympy():
    rng = np.random.default_rng(7)
    f = random_poly(rng, SP22, max_deg=3, n_terms=6)
    sub = random_poly(rng, SP22, max_deg=2, n_terms=3)
    syms = sym_vars(SP22)
    expected = from_sympy(
        to_sympy(f, syms).subs(syms[2], to_sympy(sub, syms)), SP22, syms
    )
    got = f.substitute({2: sub})
    assert isinstance(got, Polynomial)
    assert got.almost_equal(expected, tol=1e-9)


def test_substitute_into_new_space_requires_coverage():
    f = x(SP22, 0) * y(SP22, 0)
    small = VarSpace(1, 1)
    with pytest.raises(PolyError):
        f.substitute({0: Polynomial.variable(small, 0)})


def test_fix_pins_variables():
    f = x(SP22, 0) ** 2 * y(SP22, 0) + x(SP22, 1)
    g = f.fix({0: 2.0})
    assert g.evaluate([123.0, 5.0, 7.0, 0.0]) == pytest.approx(4 * 7 + 5)


def test_remap_moves_spaces():
    f = x(SP22, 1) ** 2 + y(SP22, 1)
    target = VarSpace(1, 1)
    g = f.remap(target, {1: 0, 3: 1})
    assert g.evaluate([3.0, 4.0]) == pytest.approx(13.0)
    with pytest.raises(PolyError):
        (f + x(SP22, 0)).remap(target, {1: 0, 3: 1})


def test_pow_matches_repeated_multiplication():
    rng = np.random.default_rng(3)
    f = random_poly(rng, SP2, max_deg=2, n_terms=3)
    acc = Polynomial.const(SP2, 1.0)
    for k in range(5):
        assert (f**k).almost_equal(acc, tol=1e-9)
        acc = acc * f


def test_chop_drops_dust():
    f = x() + Polynomial.const(SP2, 1e-15)
    assert f.chop(1e-12).almost_equal(x(), tol=0.0)


# -- rational functions ------------------------------------------------


def test_rational_constant_denominator_folds():
    r = (x() + 1.0) / Polynomial.const(SP2, 2.0)
    assert isinstance(r, Polynomial)
    assert r.evaluate([1.0, 0.0]) == pytest.approx(1.0)


def test_rational_quotient_rule_matches_sympy():
    rng = np.random.default_rng(11)
    syms = sym_vars(SP22)
    for _ in range(8):
        num = random_poly(rng, SP22, max_deg=2, n_terms=4)
        den = random_poly(rng, SP22, max_deg=1, n_terms=2) + 7.0
        r = RationalFn(num, den)
        for i in range(4):
            mine = r.differentiate(i)
            ref = sp.diff(rational_to_sympy(r, syms), syms[i])
            for _ in range(6):
                pt = rng.uniform(-0.4, 0.4, size=4)
                ref_v = float(ref.subs(dict(zip(syms, pt))))
                assert mine.evaluate(pt) == pytest.approx(ref_v, rel=1e-8, abs=1e-8)


def test_rational_arithmetic_and_equality():
    a = RationalFn(x(), y() + 2.0)
    b = RationalFn(x() * (y() + 2.0), (y() + 2.0) ** 2)
    assert a.almost_equal(b)
    s = a + a
    assert s.almost_equal(RationalFn(2.0 * x(), y() + 2.0))


def test_rational_substitute_collapses_when_possible():
    r = RationalFn(x() * x(), x() + 1.0)
    out = r.fix({0: 3.0})
    assert isinstance(out, Polynomial)
    assert out.constant_value() == pytest.approx(2.25)


# -- matrices ----------------------------------------------------------


def test_adjugate_2x2_closed_form():
    a, b = x(SP22, 0), x(SP22, 1)
    c, d = y(SP22, 0), y(SP22, 1)
    M = PolyMatrix([[a, b], [c, d]])
    adj, det = M.adjugate_det()
    assert det.almost_equal(a * d - b * c)
    assert adj[0, 0] == d and adj[1, 1] == a
    assert adj[0, 1].almost_equal(-b) and adj[1, 0].almost_equal(-c)


@pytest.mark.parametrize("dim", [2, 3, 4])
def test_adjugate_identity_random(dim):
    rng = np.random.default_rng(40 + dim)
    space = VarSpace(2, 0)
    M = PolyMatrix(
        [
            [random_poly(rng, space, max_deg=1, n_terms=2) for _ in range(dim)]
            for _ in range(dim)
        ]
    )
    adj, det = M.adjugate_det()
    prod = adj @ M
    for i in range(dim):
        for j in range(dim):
            target = det if i == j else Polynomial.zero(space)
            assert prod[i, j].almost_equal(target, tol=1e-9)


def test_adjugate_dimension_cap():
    space = VarSpace(1, 0)
    one = Polynomial.const(space, 1.0)
    M = PolyMatrix([[one] * 9 for _ in range(9)])
    with pytest.raises(PolyError):
        M.adjugate_det()


def test_matmul_and_transpose():
    space = VarSpace(1, 2)
    A = PolyMatrix([[x(space), y(space, 0)], [y(space, 1), Polynomial.const(space, 1.0)]])
    G = A @ A.T
    assert G[0, 1].almost_equal(G[1, 0])
    v = A.matvec([Polynomial.const(space, 1.0), Polynomial.const(space, 2.0)])
    assert v[0].almost_equal(x(space) + 2.0 * y(space, 0))


def test_poly_dot():
    space = VarSpace(1, 1)
    assert poly_dot([x(space)], [y(space)]).almost_equal(x(space) * y(space))


# -- hypothesis property checks ---------------------------------------

_coeff = st.integers(min_value=-4, max_value=4)
_exp = st.tuples(
    st.integers(min_value=0, max_value=3), st.integers(min_value=0, max_value=3)
)
_poly_terms = st.dictionaries(_exp, _coeff, min_size=0, max_size=5)


def _mk(terms):
    return Polynomial(SP2, {e: float(c) for e, c in terms.items()})


@settings(max_examples=120, deadline=None)
@given(_poly_terms, _poly_terms)
def test_product_rule_property(t1, t2):
    f, g = _mk(t1), _mk(t2)
    lhs = (f * g).differentiate(0)
    rhs = f.differentiate(0) * g + f * g.differentiate(0)
    assert lhs.almost_equal(rhs, tol=1e-12)


@settings(max_examples=120, deadline=None)
@given(_poly_terms, _poly_terms, st.floats(-2, 2), st.floats(-2, 2))
def test_evaluation_is_ring_homomorphism(t1, t2, a, b):
    f, g = _mk(t1), _mk(t2)
    pt = [a, b]
    scale = max(1.0, abs(f.evaluate(pt)), abs(g.evaluate(pt))) ** 2
    assert (f * g).evaluate(pt) == pytest.approx(
        f.evaluate(pt) * g.evaluate(pt), abs=1e-9 * scale
    )
    assert (f + g).evaluate(pt) == pytest.approx(
        f.evaluate(pt) + g.evaluate(pt), abs=1e-9 * max(1.0, scale)
    )
