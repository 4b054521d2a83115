"""Independent recomputation routes used only by the tests.

Nothing in here is imported by the library.  The point is a second opinion:
symbolic algebra through sympy, brute-force grids plus a local polish for
small polynomial programs, and scipy's LP solver for lower-level checks.
"""

from __future__ import annotations

import numpy as np
import sympy as sp

from bpopt.poly import Polynomial, RationalFn, VarSpace


def sym_vars(space: VarSpace):
    return sp.symbols(f"v0:{space.total}") if space.total else ()


def to_sympy(poly: Polynomial, syms) -> sp.Expr:
    expr = sp.Integer(0)
    for exp, c in poly.terms():
        term = sp.Float(c, 17)
        for s, e in zip(syms, exp):
            if e:
                term *= s**e
        expr += term
    return sp.expand(expr)


def rational_to_sympy(fn: RationalFn, syms) -> sp.Expr:
    return to_sympy(fn.num, syms) / to_sympy(fn.den, syms)


def from_sympy(expr: sp.Expr, space: VarSpace, syms) -> Polynomial:
    expr = sp.expand(expr)
    if not syms:
        return Polynomial.const(space, float(expr))
    poly = sp.Poly(expr, *syms)
    terms = {}
    for monom, coeff in poly.terms():
        terms[tuple(int(e) for e in monom)] = float(coeff)
    return Polynomial(space, terms)


def random_poly(
    rng: np.random.Generator,
    space: VarSpace,
    max_deg: int = 3,
    n_terms: int = 5,
    int_coeffs: bool = True,
) -> Polynomial:
    terms: dict = {}
    for _ in range(n_terms):
        exp = [0] * space.total
        for _ in range(int(rng.integers(0, max_deg + 1))):
            exp[int(rng.integers(0, space.total))] += 1
        c = float(rng.integers(-5, 6)) if int_coeffs else float(rng.normal())
        key = tuple(exp)
        terms[key] = terms.get(key, 0.0) + c
    return Polynomial(space, terms)


def grid_minimize(objective, constraints, bounds, refine=2, pts=11):
    """Brute-force constrained minimum on a box grid, optionally refined.

    ``objective`` maps an (N,) array to a float; ``constraints`` is a list of
    (kind, fn) with kind 'eq' or 'ineq' (>= 0).  Returns (value, point) over
    grid points within loose feasibility, refined around the incumbent.
    """
    value, point, _ = grid_search(objective, constraints, bounds, refine, pts)
    return value, point


def grid_search(objective, constraints, bounds, refine=2, pts=11, keep=8):
    """Like ``grid_minimize`` but also returns the best few feasible points."""
    box_lo = np.array([b[0] for b in bounds], dtype=float)
    box_hi = np.array([b[1] for b in bounds], dtype=float)
    lo, hi = box_lo.copy(), box_hi.copy()
    best_v, best_x = np.inf, None
    candidates: list = []
    for _ in range(refine + 1):
        axes = [np.linspace(lo[i], hi[i], pts) for i in range(len(bounds))]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(bounds))
        eq_tol = 1.5 * float(np.max(hi - lo)) / (pts - 1)
        scored = []
        for x in mesh:
            ok = True
            for kind, fn in constraints:
                v = fn(x)
                if kind == "eq" and abs(v) > eq_tol:
                    ok = False
                    break
                if kind == "ineq" and v < -1e-9:
                    ok = False
                    break
            if ok:
                scored.append((objective(x), x.copy()))
        scored.sort(key=lambda t: t[0])
        candidates.extend(scored[:keep])
        if scored and scored[0][0] < best_v:
            best_v, best_x = scored[0]
        if best_x is None:
            return np.inf, None, []
        span = (hi - lo) / (pts - 1)
        lo = np.maximum(box_lo, best_x - 1.5 * span)
        hi = np.minimum(box_hi, best_x + 1.5 * span)
    return best_v, best_x, candidates


def oracle_minimize(objective, constraints, bounds, refine=2, pts=11, feas_tol=1e-8):
    """Independent minimum estimate: grid search plus multi-start polish.

    Only polish results that verify as feasible count; the coarse grid value
    is the fallback.  Returns (value, point).
    """
    g_val, g_pt, cands = grid_search(objective, constraints, bounds, refine, pts)
    if g_pt is None:
        return np.inf, None
    best_v, best_x = g_val, g_pt
    seen = []
    for _, start in cands[:12]:
        if any(np.allclose(start, s, atol=1e-9) for s in seen):
            continue
        seen.append(start)
        p_val, p_pt = polish_minimize(objective, constraints, start, bounds=bounds)
        ok = all(
            (abs(fn(p_pt)) <= feas_tol) if kind == "eq" else (fn(p_pt) >= -feas_tol)
            for kind, fn in constraints
        )
        in_box = all(b[0] - 1e-9 <= v <= b[1] + 1e-9 for v, b in zip(p_pt, bounds))
        if ok and in_box and p_val < best_v:
            best_v, best_x = p_val, p_pt
    return best_v, best_x


def polish_minimize(objective, constraints, x0, bounds=None):
    """SLSQP polish step for grid oracles."""
    from scipy.optimize import minimize

    cons = []
    for kind, fn in constraints:
        cons.append({"type": "eq" if kind == "eq" else "ineq", "fun": fn})
    res = minimize(
        objective, x0, method="SLSQP", constraints=cons, bounds=bounds,
        options={"maxiter": 300, "ftol": 1e-12},
    )
    if res.success:
        return float(res.fun), res.x
    return objective(x0), np.asarray(x0, dtype=float)
