"""Closed-form Lagrange multipliers for affine lower-level constraints.

For a support J of candidate active rows, the least-norm multiplier of the
lower-level stationarity system is lambda_J = (A_J A_J^T)^{-1} A_J grad_z f.
Clearing the Gram inverse by the adjugate gives polynomial data

    phi = adj(G) A_J N,   d = det(G) * q^2,   G = A_J A_J^T,

where N is the cleared z-gradient of the lower objective (N = grad_z f for
polynomial objectives; N = q * grad num - num * grad q when the objective is
num/q).  det(G) is a Gram determinant, hence nonnegative everywhere, and d
matches lambda_J = phi / d wherever A_J has full row rank.

A branch system is the polynomial description of one disjunct of the
optimality decomposition: shared constraints, cleared stationarity,
complementarity products and multiplier signs for inequality rows in the
support, plus any accumulated cut polynomials.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .model import BilevelProblem
from .poly import Polynomial, PolyMatrix, RationalFn

DUST_REL = 1e-12


@dataclass(frozen=True)
class MultiplierScheme:
    support: Tuple[int, ...]
    phi: Tuple[Polynomial, ...]  # cleared numerators, one per support row
    d: Polynomial  # shared cleared denominator, nonnegative everywhere
    stationarity: Tuple[Polynomial, ...]  # cleared rows, one per lower var

    def multipliers_at(self, point: Sequence[float]) -> Optional[np.ndarray]:
        """Numeric lambda_J at a point, or None where the clearing vanishes."""
        dv = self.d.evaluate(point)
        if abs(dv) < 1e-12:
            return None
        return np.array([p.evaluate(point) / dv for p in self.phi])


@dataclass(frozen=True)
class TaggedPolynomial:
    poly: Polynomial
    tag: str  # upper | lower | stationarity | complementarity | sign | cut | ball
    label: str


@dataclass(frozen=True)
class BranchSystem:
    support: Tuple[int, ...]
    eqs: Tuple[TaggedPolynomial, ...]
    ineqs: Tuple[TaggedPolynomial, ...]
    scheme: MultiplierScheme

    def eq_polys(self) -> Tuple[Polynomial, ...]:
        return tuple(t.poly for t in self.eqs)

    def ineq_polys(self) -> Tuple[Polynomial, ...]:
        return tuple(t.poly for t in self.ineqs)

    def residual(self, point: Sequence[float]) -> float:
        worst = 0.0
        for t in self.eqs:
            worst = max(
                worst, abs(t.poly.evaluate(point)) / max(1.0, t.poly.max_abs_coeff())
            )
        for t in self.ineqs:
            worst = max(
                worst,
                -min(0.0, t.poly.evaluate(point)) / max(1.0, t.poly.max_abs_coeff()),
            )
        return worst


def _cleared_gradient(problem: BilevelProblem):
    """(N, q) with N = q^2 * grad_z(lower objective) and q the denominator."""
    f = problem.lower_obj
    idx = problem.space.lower_indices()
    if isinstance(f, RationalFn):
        num, den = f.num, f.den
        grads = [
            den * num.differentiate(i) - num * den.differentiate(i) for i in idx
        ]
        return grads, den
    one = Polynomial.const(problem.space, 1.0)
    return [f.differentiate(i) for i in idx], one


def build_multipliers(
    problem: BilevelProblem, support: Sequence[int]
) -> MultiplierScheme:
    support = tuple(support)
    if not support:
        # unconstrained stationarity: no multipliers, plain cleared gradient
        N, q = _cleared_gradient(problem)
        return MultiplierScheme(
            support=(),
            phi=(),
            d=(q * q).chop(DUST_REL),
            stationarity=tuple(Ni.chop(DUST_REL) for Ni in N),
        )
    A_J = problem.lower_A(support)
    G = A_J @ A_J.transpose()
    adj, det = G.adjugate_det()
    N, q = _cleared_gradient(problem)
    AN = A_J.matvec(N)
    phi = [p.chop(DUST_REL) for p in adj.matvec(AN)]
    d = (det * q * q).chop(DUST_REL)
    At_phi = A_J.transpose().matvec(phi)
    stationarity = [
        (det * Ni - Ai).chop(DUST_REL) for Ni, Ai in zip(N, At_phi)
    ]
    return MultiplierScheme(
        support=support,
        phi=tuple(phi),
        d=d,
        stationarity=tuple(stationarity),
    )


def build_branch_system(
    problem: BilevelProblem,
    scheme: MultiplierScheme,
    cuts: Sequence[Polynomial] = (),
    ball: Optional[Polynomial] = None,
) -> BranchSystem:
    eqs = []
    ineqs = []
    for i, h in enumerate(problem.upper_eq):
        eqs.append(TaggedPolynomial(h, "upper", f"upper.eq {i + 1}"))
    for i, g in enumerate(problem.upper_ineq):
        ineqs.append(TaggedPolynomial(g, "upper", f"upper.ineq {i + 1}"))
    for j, row in enumerate(problem.rows):
        p = row.as_poly()
        if row.kind == "eq":
            eqs.append(TaggedPolynomial(p, "lower", f"row {j + 1}"))
        else:
            ineqs.append(TaggedPolynomial(p, "lower", f"row {j + 1}"))
    for i, s in enumerate(scheme.stationarity):
        if s.is_zero():
            continue
        eqs.append(TaggedPolynomial(s, "stationarity", f"gradient component {i + 1}"))
    ineq_rows = set(problem.ineq_row_indices())
    for pos, j in enumerate(scheme.support):
        if j not in ineq_rows:
            continue  # equality rows carry free multipliers
        phi_j = scheme.phi[pos]
        prod = (problem.row_poly(j) * phi_j).chop(DUST_REL)
        eqs.append(
            TaggedPolynomial(prod, "complementarity", f"row {j + 1} x multiplier")
        )
        ineqs.append(TaggedPolynomial(phi_j, "sign", f"multiplier of row {j + 1}"))
    for i, cpoly in enumerate(cuts):
        ineqs.append(TaggedPolynomial(cpoly, "cut", f"cut {i + 1}"))
    if ball is not None:
        ineqs.append(TaggedPolynomial(ball, "ball", "ball"))
    return BranchSystem(
        support=scheme.support,
        eqs=tuple(eqs),
        ineqs=tuple(ineqs),
        scheme=scheme,
    )
