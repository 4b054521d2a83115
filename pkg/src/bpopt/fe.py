"""Feasible-extension synthesis for affine lower-level constraint sets.

A feasible extension for a candidate (x^, y^) with lower minimizer z^ is a
polynomial map q(x, y) that interpolates q(x^, y^) = z^ and lands inside the
lower feasible set Z(x) for every point of the shared constraint set.  The
induced inequality  f(x, q(x, y)) - f(x, y) >= 0  holds on the true bilevel
feasible set but fails at (x^, y^) whenever y^ is not lower-level optimal,
so it works as a refinement cut.

Synthesis runs cheapest-first:

1. pattern proposals built coordinate by coordinate (identity where z^
   matches y^, single-bound/box/pinched interval formulas for decoupled
   coordinates, constants otherwise), then an active-set proposal that
   solves the rows tight at z^ as equations in q(x) (least squares when a
   pinched pair makes the system inconsistent), then whole-problem simplex
   and constant-determinant coordinate-change forms;
2. an LP for affine q;
3. an SDP for quadratic q with sum-of-squares row certificates.

Every returned extension carries a row-by-row certificate expressing
a_i(x)^T q - b_i(x) as a nonnegative combination of a constant offset, the
upper-level constraints, the lower rows evaluated at z = y, and (for the SDP
path) a PSD quadratic form.  Pattern proposals that cannot be certified are
discarded rather than trusted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.optimize as sopt
import scipy.sparse as sp

from .conic import ConicProgram, PSDBlock, solve_conic
from .model import BilevelProblem, ModelError
from .poly import Polynomial, PolyMatrix, RationalFn
from .pop import monomials

INTERP_TOL = 1e-7
IDENTITY_TOL = 1e-7
SIGN_TOL = 1e-9
PSD_EIG_TOL = 1e-7
SNAP_TOL = 1e-5


@dataclass(frozen=True)
class CandidatePoint:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def combined(self) -> np.ndarray:
        return np.concatenate([self.x, self.y])


@dataclass(frozen=True)
class RowCertificate:
    offset: float  # constant slack, >= 0
    upper_weights: np.ndarray  # over upper eqs then ineqs; eq part free
    row_weights: np.ndarray  # over lower rows at z = y, >= 0
    psd: Optional[np.ndarray]  # PSD quadratic form over (1, x, y), or None


@dataclass(frozen=True)
class Extension:
    components: Tuple[Polynomial, ...]
    # active | pattern | simplex | coordinate | constant | linear | quadratic
    method: str
    certificates: Tuple[RowCertificate, ...]


@dataclass(frozen=True)
class VerificationReport:
    ok: bool
    interpolation_error: float
    certificate_error: float
    min_weight: float
    min_psd_eig: float
    sample_count: int
    worst_sample_violation: float
    message: str = ""


def _upper_list(problem: BilevelProblem) -> List[Tuple[Polynomial, str]]:
    out = [(h, "eq") for h in problem.upper_eq]
    out += [(g, "ineq") for g in problem.upper_ineq]
    return out


def _row_at_y(problem: BilevelProblem, j: int) -> Polynomial:
    return problem.rows[j].as_poly()


def _substituted_rows(
    problem: BilevelProblem, components: Sequence[Polynomial]
) -> List[Polynomial]:
    sub = {
        idx: components[i]
        for i, idx in enumerate(problem.space.lower_indices())
    }
    out = []
    for row in problem.rows:
        val = row.as_poly().substitute(sub)
        if isinstance(val, RationalFn):
            raise ModelError("extension components must be polynomial")
        out.append(val)
    return out


def normalize_candidate(
    problem: BilevelProblem, point: CandidatePoint, tol: float = SNAP_TOL
) -> CandidatePoint:
    """Snap the lower minimizer onto nearby exact structure.

    Moment extraction reports z^ to roughly solver precision.  Snapping a
    coordinate onto y^ or onto an active single-coordinate bound makes the
    pattern formulas interpolate exactly; validity is unaffected because the
    row certificates never depend on z^.
    """
    z = np.array(point.z, dtype=float)
    xfull = list(point.x) + [0.0] * problem.p
    for i in range(problem.p):
        if abs(z[i] - point.y[i]) <= tol:
            z[i] = point.y[i]
            continue
        bounds = _coordinate_bounds(problem, i)
        if bounds is None:
            continue
        best = None
        for _, bnd, _ in bounds:
            val = bnd.evaluate(xfull)
            gap = abs(z[i] - val)
            if gap <= tol and (best is None or gap < best[0]):
                best = (gap, val)
        if best is not None:
            z[i] = best[1]
    return CandidatePoint(x=np.array(point.x, float), y=np.array(point.y, float), z=z)


# ---------------------------------------------------------------------------
# pattern proposals


def _coordinate_bounds(problem: BilevelProblem, i: int):
    """Bounds for coordinate i when its rows touch no other coordinate.

    Returns a list of (row_index, bound_polynomial, side) with side "lo" for
    z_i >= bound and "hi" for z_i <= bound, or None when the coordinate is
    coupled or a touching coefficient is not a nonzero constant.
    """
    out = []
    for j, row in enumerate(problem.rows):
        c = row.coeffs[i]
        if c.is_zero():
            continue
        others = any(
            not row.coeffs[k].is_zero() for k in range(problem.p) if k != i
        )
        if others or not c.is_constant():
            return None
        cv = c.constant_value()
        bound = row.rhs / cv
        out.append((j, bound, "lo" if cv > 0 else "hi"))
    return out


def _single_coordinate_formula(
    problem: BilevelProblem, i: int, point: CandidatePoint
) -> Optional[Polynomial]:
    bounds = _coordinate_bounds(problem, i)
    if bounds is None:
        return None
    xfull = list(point.x) + [0.0] * problem.p
    zi = float(point.z[i])
    los = [(j, b) for j, b, side in bounds if side == "lo"]
    his = [(j, b) for j, b, side in bounds if side == "hi"]
    if len(los) == 1 and len(his) == 1:
        lo, hi = los[0][1], his[0][1]
        lo_v, hi_v = lo.evaluate(xfull), hi.evaluate(xfull)
        if abs(hi_v - lo_v) <= 1e-9:
            return lo
        alpha = (zi - lo_v) / (hi_v - lo_v)
        return (1.0 - alpha) * lo + alpha * hi
    if len(los) == 1 and not his:
        b = los[0][1]
        return b + (zi - b.evaluate(xfull))
    if len(his) == 1 and not los:
        b = his[0][1]
        return b + (zi - b.evaluate(xfull))
    if not bounds:
        return Polynomial.const(problem.space, zi)
    # several one-sided bounds: follow the one active at z^
    best = None
    for j, b, side in bounds:
        gap = abs(zi - b.evaluate(xfull))
        if best is None or gap < best[0]:
            best = (gap, b)
    return best[1] + (zi - best[1].evaluate(xfull))


def _simplex_proposal(
    problem: BilevelProblem, point: CandidatePoint
) -> Optional[List[Polynomial]]:
    """Rows sigma_i z_i >= b_i plus one row -tau e^T z >= -tau b_0."""
    p = problem.p
    lower = [None] * p
    cap = None
    for j, row in enumerate(problem.rows):
        vec = []
        for c in row.coeffs:
            if not c.is_constant():
                return None
            vec.append(c.constant_value())
        vec = np.array(vec)
        nz = np.nonzero(np.abs(vec) > 1e-12)[0]
        if len(nz) == 1 and vec[nz[0]] > 0:
            if lower[nz[0]] is not None:
                return None
            lower[nz[0]] = row.rhs / vec[nz[0]]
        elif len(nz) == p and np.all(vec < 0) and np.ptp(vec) <= 1e-12:
            if cap is not None:
                return None
            cap = row.rhs / vec[0]  # e^T z <= cap
        else:
            return None
    if cap is None or any(b is None for b in lower):
        return None
    xfull = list(point.x) + [0.0] * problem.p
    b_hat = np.array([b.evaluate(xfull) for b in lower])
    cap_hat = cap.evaluate(xfull)
    denom = cap_hat - b_hat.sum()
    total = cap
    for b in lower:
        total = total - b
    if abs(denom) <= 1e-9:
        return list(lower)
    out = []
    for i, b in enumerate(lower):
        w = (float(point.z[i]) - b_hat[i]) / denom
        out.append(b + w * total)
    return out


def _paired_coordinate_proposal(
    problem: BilevelProblem, point: CandidatePoint
) -> Optional[List[Polynomial]]:
    """Box constraints in transformed coordinates b(x) <= B(x) z <= c(x)."""
    p = problem.p
    if problem.m != 2 * p:
        return None
    rows = list(range(problem.m))
    pairs = []
    while rows:
        j = rows.pop(0)
        partner = None
        for k in rows:
            if all(
                problem.rows[j].coeffs[i].almost_equal(
                    -1.0 * problem.rows[k].coeffs[i], tol=1e-12
                )
                for i in range(p)
            ):
                partner = k
                break
        if partner is None:
            return None
        rows.remove(partner)
        pairs.append((j, partner))
    if len(pairs) != p:
        return None
    B = PolyMatrix([list(problem.rows[j].coeffs) for j, _ in pairs])
    adj, det = B.adjugate_det()
    if not det.is_constant() or abs(det.constant_value()) <= 1e-9:
        return None
    det_v = det.constant_value()
    xfull = list(point.x) + [0.0] * problem.p
    Bx = np.array(
        [
            [problem.rows[j].coeffs[i].evaluate(xfull) for i in range(p)]
            for j, _ in pairs
        ]
    )
    w_hat = Bx @ np.asarray(point.z, float)
    w_comps = []
    for idx, (j, k) in enumerate(pairs):
        lo = problem.rows[j].rhs  # B_r z >= lo
        hi = -1.0 * problem.rows[k].rhs  # B_r z <= hi
        lo_v, hi_v = lo.evaluate(xfull), hi.evaluate(xfull)
        if abs(hi_v - lo_v) <= 1e-9:
            w_comps.append(lo)
        else:
            alpha = (w_hat[idx] - lo_v) / (hi_v - lo_v)
            w_comps.append((1.0 - alpha) * lo + alpha * hi)
    q = adj.matvec(w_comps)
    return [comp / det_v for comp in q]


def _active_set_proposal(
    problem: BilevelProblem, point: CandidatePoint
) -> Optional[List[Polynomial]]:
    """Solve the rows active at z^ as equations in q(x).

    Rows tight at the lower minimizer stay tight as polynomial identities
    when the active system (constant z-coefficients only) is solved for q;
    an inconsistent system, such as a pinched pair of bounds, resolves by
    least squares, which freezes the pinched coordinate at its value.
    Coordinates no active row touches keep the identity q_i = y_i when z^_i
    matches y^_i and freeze at z^_i otherwise.  Nullspace freedom left by a
    rank-deficient active system is fixed by interpolation at the candidate.
    """
    p = problem.p
    space = problem.space
    xfull = list(point.x) + [0.0] * p
    z = np.asarray(point.z, float)
    scale = 1.0 + float(np.max(np.abs(z))) if p else 1.0
    coeff_rows: List[np.ndarray] = []
    rhs_polys: List[Polynomial] = []
    for row in problem.rows:
        vec = []
        constant = True
        for c in row.coeffs:
            if not c.is_constant():
                constant = False
                break
            vec.append(c.constant_value())
        if not constant:
            continue
        vec = np.asarray(vec)
        val = float(vec @ z) - row.rhs.evaluate(xfull)
        if abs(val) <= 1e-6 * scale:
            coeff_rows.append(vec)
            rhs_polys.append(row.rhs)
    if not coeff_rows:
        return None
    M = np.vstack(coeff_rows)
    touched = np.nonzero(np.max(np.abs(M), axis=0) > 1e-12)[0]
    if touched.size == 0:
        return None
    Mt = M[:, touched]
    pinv = np.linalg.pinv(Mt, rcond=1e-10)
    part = [Polynomial.zero(space) for _ in touched]
    for i in range(len(touched)):
        for j, rhs in enumerate(rhs_polys):
            if abs(pinv[i, j]) > 1e-12:
                part[i] = part[i] + pinv[i, j] * rhs
    # shift along null(Mt) so the map interpolates the candidate
    proj = np.eye(len(touched)) - pinv @ Mt
    gap = z[touched] - np.array([c.evaluate(xfull) for c in part])
    shift, *_ = np.linalg.lstsq(proj, gap, rcond=None)
    shift = proj @ shift
    comps: List[Polynomial] = []
    pos = {int(t): k for k, t in enumerate(touched)}
    for i, idx in enumerate(space.lower_indices()):
        if i in pos:
            comps.append((part[pos[i]] + float(shift[pos[i]])).chop(1e-12))
        elif abs(z[i] - point.y[i]) <= 1e-12:
            comps.append(Polynomial.variable(space, idx))
        else:
            comps.append(Polynomial.const(space, float(z[i])))
    combined = point.combined()
    err = max(abs(c.evaluate(combined) - z[i]) for i, c in enumerate(comps))
    if err > 1e-7 * scale:
        return None
    return comps


def _pattern_proposals(
    problem: BilevelProblem, point: CandidatePoint
) -> List[Tuple[List[Polynomial], str]]:
    space = problem.space
    proposals: List[Tuple[List[Polynomial], str]] = []
    mixed: List[Polynomial] = []
    for i, idx in enumerate(space.lower_indices()):
        if abs(point.z[i] - point.y[i]) <= 1e-12:
            mixed.append(Polynomial.variable(space, idx))
            continue
        formula = _single_coordinate_formula(problem, i, point)
        if formula is not None:
            mixed.append(formula)
        else:
            mixed.append(Polynomial.const(space, float(point.z[i])))
    proposals.append((mixed, "pattern"))
    active = _active_set_proposal(problem, point)
    if active is not None:
        proposals.append((active, "active"))
    simplex = _simplex_proposal(problem, point)
    if simplex is not None:
        proposals.append((simplex, "simplex"))
    paired = _paired_coordinate_proposal(problem, point)
    if paired is not None:
        proposals.append((paired, "coordinate"))
    half = [
        Polynomial.variable(space, idx)
        if abs(point.z[i] - point.y[i]) <= 1e-12
        else Polynomial.const(space, float(point.z[i]))
        for i, idx in enumerate(space.lower_indices())
    ]
    proposals.append((half, "pattern"))
    constant = [Polynomial.const(space, float(v)) for v in point.z]
    proposals.append((constant, "constant"))
    # dedup while preserving order
    seen: List[List[Polynomial]] = []
    out = []
    for comps, method in proposals:
        if any(
            all(a.almost_equal(b, tol=1e-12) for a, b in zip(comps, prev))
            for prev in seen
        ):
            continue
        seen.append(comps)
        out.append((comps, method))
    return out


# ---------------------------------------------------------------------------
# certification and synthesis programs


def _monomial_union(polys: Sequence[Polynomial]) -> List[Tuple[int, ...]]:
    deg = max([p.degree for p in polys] + [0])
    return monomials(polys[0].space.total, deg)


def _certify_fixed(
    problem: BilevelProblem, components: Sequence[Polynomial]
) -> Optional[Tuple[RowCertificate, ...]]:
    """Row certificates for a fixed q via one LP per row, PSD fallback."""
    uppers = _upper_list(problem)
    row_polys = [_row_at_y(problem, j) for j in range(problem.m)]
    lhs_list = _substituted_rows(problem, components)
    certs: List[RowCertificate] = []
    for lhs in lhs_list:
        cert = _row_certificate_lp(lhs, uppers, row_polys)
        if cert is None:
            cert = _row_certificate_psd(lhs, uppers, row_polys)
        if cert is None:
            return None
        certs.append(cert)
    return tuple(certs)


def _row_certificate_lp(
    lhs: Polynomial,
    uppers: Sequence[Tuple[Polynomial, str]],
    row_polys: Sequence[Polynomial],
) -> Optional[RowCertificate]:
    space = lhs.space
    basis = _monomial_union([lhs] + [u for u, _ in uppers] + list(row_polys))
    index = {m: i for i, m in enumerate(basis)}
    n_up = len(uppers)
    n_rows = len(row_polys)
    nv = 1 + n_up + n_rows
    A = np.zeros((len(basis), nv))
    A[index[tuple([0] * space.total)], 0] = 1.0
    for k, (h, _) in enumerate(uppers):
        for exp, c in h.terms():
            A[index[exp], 1 + k] += c
    for k, r in enumerate(row_polys):
        for exp, c in r.terms():
            A[index[exp], 1 + n_up + k] += c
    b = np.zeros(len(basis))
    for exp, c in lhs.terms():
        b[index[exp]] += c
    bounds = [(0, None)]
    for _, kind in uppers:
        bounds.append((None, None) if kind == "eq" else (0, None))
    bounds += [(0, None)] * n_rows
    c_obj = np.ones(nv)
    for k, (_, kind) in enumerate(uppers):
        if kind == "eq":
            c_obj[1 + k] = 0.0
    res = sopt.linprog(c_obj, A_eq=A, b_eq=b, bounds=bounds, method="highs")
    if not res.success:
        return None
    sol = res.x
    if np.max(np.abs(A @ sol - b)) > 1e-8 * max(1.0, np.abs(b).max()):
        return None
    return RowCertificate(
        offset=float(sol[0]),
        upper_weights=sol[1 : 1 + n_up].copy(),
        row_weights=sol[1 + n_up :].copy(),
        psd=None,
    )


def _row_certificate_psd(
    lhs: Polynomial,
    uppers: Sequence[Tuple[Polynomial, str]],
    row_polys: Sequence[Polynomial],
) -> Optional[RowCertificate]:
    space = lhs.space
    nt = space.total
    if lhs.degree > 2:
        return None
    basis1 = monomials(nt, 1)
    s = len(basis1)
    basis = _monomial_union([lhs] + [u for u, _ in uppers] + list(row_polys))
    if max(sum(m) for m in basis) < 2:
        basis = monomials(nt, 2)
    index = {m: i for i, m in enumerate(basis)}
    n_up = len(uppers)
    n_rows = len(row_polys)
    n_lin = 1 + n_up + n_rows
    n_psd = s * (s + 1) // 2
    nv = n_lin + n_psd
    rows_eq = len(basis)
    A = np.zeros((rows_eq, nv))
    A[index[tuple([0] * nt)], 0] = 1.0
    for k, (h, _) in enumerate(uppers):
        for exp, c in h.terms():
            A[index[exp], 1 + k] += c
    for k, r in enumerate(row_polys):
        for exp, c in r.terms():
            A[index[exp], 1 + n_up + k] += c
    tri = [(i, j) for i in range(s) for j in range(i, s)]
    for v, (i, j) in enumerate(tri):
        exp = tuple(a + b for a, b in zip(basis1[i], basis1[j]))
        A[index[exp], n_lin + v] += 1.0 if i == j else 2.0
    b = np.zeros(rows_eq)
    for exp, c in lhs.terms():
        b[index[exp]] += c
    entries = [(n_lin + v, i, j, 1.0) for v, (i, j) in enumerate(tri)]
    block = PSDBlock.from_entries(s, np.zeros((s, s)), entries)
    nonneg_idx = [0]
    for k, (_, kind) in enumerate(uppers):
        if kind == "ineq":
            nonneg_idx.append(1 + k)
    nonneg_idx += list(range(1 + n_up, n_lin))
    D = sp.csr_matrix(
        (np.ones(len(nonneg_idx)), (range(len(nonneg_idx)), nonneg_idx)),
        shape=(len(nonneg_idx), nv),
    )
    c_obj = np.zeros(nv)
    c_obj[nonneg_idx] = 1.0
    for v, (i, j) in enumerate(tri):
        if i == j:
            c_obj[n_lin + v] = 1.0
    prog = ConicProgram(
        n_vars=nv,
        c=c_obj,
        offset=0.0,
        psd_blocks=[block],
        lin_const=np.zeros(len(nonneg_idx)),
        lin_D=D,
        eq_A=sp.csr_matrix(A),
        eq_b=b,
    )
    res = solve_conic(prog)
    if res.status != "optimal":
        return None
    sol = res.u
    Y = np.zeros((s, s))
    for v, (i, j) in enumerate(tri):
        Y[i, j] = Y[j, i] = sol[n_lin + v]
    return RowCertificate(
        offset=float(max(sol[0], 0.0)),
        upper_weights=sol[1 : 1 + n_up].copy(),
        row_weights=sol[1 + n_up : n_lin].copy(),
        psd=Y,
    )


def _synthesis_program(
    problem: BilevelProblem, point: CandidatePoint, degree: int
) -> Optional[Extension]:
    """Joint synthesis of q (degree 1 or 2) with row certificates.

    Degree 1 solves an LP with purely linear certificates; degree 2 solves an
    SDP adding one PSD quadratic form per row.
    """
    space = problem.space
    nt = space.total
    uppers = _upper_list(problem)
    row_polys = [_row_at_y(problem, j) for j in range(problem.m)]
    qbasis = monomials(nt, degree)
    nq = len(qbasis)
    p = problem.p
    m = problem.m
    n_up = len(uppers)
    use_psd = degree >= 2

    max_coef_deg = max(
        [c.degree for row in problem.rows for c in row.coeffs]
        + [row.rhs.degree for row in problem.rows]
    )
    eq_deg = max(
        degree + max_coef_deg,
        max([u.degree for u, _ in uppers] + [0]),
        max(r.degree for r in row_polys),
        2 if use_psd else 0,
    )
    basis = monomials(nt, eq_deg)
    index = {mm: i for i, mm in enumerate(basis)}

    # variable layout: q coefficients, then per-row (offset, nu, theta),
    # then PSD entries per row when enabled
    n_w = p * nq
    n_cert = m * (1 + n_up + m)
    basis1 = monomials(nt, 1)
    s = len(basis1)
    tri = [(i, j) for i in range(s) for j in range(i, s)]
    n_psd = m * len(tri) if use_psd else 0
    nv = n_w + n_cert + n_psd

    def wvar(k: int, beta_pos: int) -> int:
        return k * nq + beta_pos

    def cvar(j: int, local: int) -> int:
        return n_w + j * (1 + n_up + m) + local

    def yvar(j: int, v: int) -> int:
        return n_w + n_cert + j * len(tri) + v

    eq_rows: List[Dict[int, float]] = []
    eq_rhs: List[float] = []

    # interpolation q_k(x^, y^) = z^_k
    pt = point.combined()
    mono_vals = [float(np.prod(pt ** np.array(mm))) for mm in qbasis]
    for k in range(p):
        row = {wvar(k, b): mono_vals[b] for b in range(nq)}
        eq_rows.append(row)
        eq_rhs.append(float(point.z[k]))

    # identity rows: a_j^T q - b_j = offset + nu h + theta rows (+ u'Yu)
    qb_index = {mm: i for i, mm in enumerate(qbasis)}
    for j in range(m):
        coes = problem.rows[j].coeffs
        rhs_poly = problem.rows[j].rhs
        lin: Dict[Tuple[int, ...], Dict[int, float]] = {}

        def bump(exp, var, val):
            lin.setdefault(exp, {})[var] = lin.get(exp, {}).get(var, 0.0) + val

        for k in range(p):
            for aexp, ac in coes[k].terms():
                for bpos, bexp in enumerate(qbasis):
                    tot = tuple(x + y for x, y in zip(aexp, bexp))
                    bump(tot, wvar(k, bpos), ac)
        const_exp = tuple([0] * nt)
        bump(const_exp, cvar(j, 0), -1.0)
        for u, (h, _) in enumerate(uppers):
            for exp, c in h.terms():
                bump(exp, cvar(j, 1 + u), -c)
        for r in range(m):
            for exp, c in row_polys[r].terms():
                bump(exp, cvar(j, 1 + n_up + r), -c)
        if use_psd:
            for v, (i1, i2) in enumerate(tri):
                exp = tuple(a + b for a, b in zip(basis1[i1], basis1[i2]))
                bump(exp, yvar(j, v), -(1.0 if i1 == i2 else 2.0))
        rhs_terms = dict(rhs_poly.terms())
        exps = set(lin) | set(rhs_terms) | set(index)
        for exp in sorted(exps, key=lambda e: (sum(e), e)):
            if exp not in index:
                return None  # degree bookkeeping failure; do not synthesize
            eq_rows.append(lin.get(exp, {}))
            eq_rhs.append(rhs_terms.get(exp, 0.0))

    nonneg: List[int] = []
    for j in range(m):
        nonneg.append(cvar(j, 0))
        for u, (_, kind) in enumerate(uppers):
            if kind == "ineq":
                nonneg.append(cvar(j, 1 + u))
        for r in range(m):
            nonneg.append(cvar(j, 1 + n_up + r))

    c_obj = np.zeros(nv)
    c_obj[nonneg] = 1.0

    if not use_psd:
        A = np.zeros((len(eq_rows), nv))
        for i, row in enumerate(eq_rows):
            for v, val in row.items():
                A[i, v] = val
        bounds = [(None, None)] * nv
        for v in nonneg:
            bounds[v] = (0, None)
        res = sopt.linprog(
            c_obj, A_eq=A, b_eq=np.array(eq_rhs), bounds=bounds, method="highs"
        )
        if not res.success:
            return None
        sol = res.x
    else:
        rows_i: List[int] = []
        cols_i: List[int] = []
        vals: List[float] = []
        for i, row in enumerate(eq_rows):
            for v, val in row.items():
                rows_i.append(i)
                cols_i.append(v)
                vals.append(val)
        eq_A = sp.csr_matrix((vals, (rows_i, cols_i)), shape=(len(eq_rows), nv))
        D = sp.csr_matrix(
            (np.ones(len(nonneg)), (range(len(nonneg)), nonneg)),
            shape=(len(nonneg), nv),
        )
        blocks = []
        for j in range(m):
            entries = [(yvar(j, v), i1, i2, 1.0) for v, (i1, i2) in enumerate(tri)]
            blocks.append(PSDBlock.from_entries(s, np.zeros((s, s)), entries))
            for v, (i1, i2) in enumerate(tri):
                if i1 == i2:
                    c_obj[yvar(j, v)] = 1.0
        prog = ConicProgram(
            n_vars=nv,
            c=c_obj,
            offset=0.0,
            psd_blocks=blocks,
            lin_const=np.zeros(len(nonneg)),
            lin_D=D,
            eq_A=eq_A,
            eq_b=np.array(eq_rhs),
        )
        res = solve_conic(prog)
        if res.status != "optimal":
            return None
        sol = res.u

    comps = []
    for k in range(p):
        terms = {qbasis[bpos]: sol[wvar(k, bpos)] for bpos in range(nq)}
        comps.append(Polynomial(space, terms).chop(1e-10))
    certs = []
    for j in range(m):
        Y = None
        if use_psd:
            Y = np.zeros((s, s))
            for v, (i1, i2) in enumerate(tri):
                Y[i1, i2] = Y[i2, i1] = sol[yvar(j, v)]
        certs.append(
            RowCertificate(
                offset=float(max(sol[cvar(j, 0)], 0.0)),
                upper_weights=np.array(
                    [sol[cvar(j, 1 + u)] for u in range(n_up)]
                ),
                row_weights=np.array(
                    [sol[cvar(j, 1 + n_up + r)] for r in range(m)]
                ),
                psd=Y,
            )
        )
    return Extension(
        components=tuple(comps),
        method="linear" if degree == 1 else "quadratic",
        certificates=tuple(certs),
    )


# ---------------------------------------------------------------------------
# driver


def synthesize_extension(
    problem: BilevelProblem, point: CandidatePoint
) -> Optional[Extension]:
    if problem.eq_row_indices():
        raise ModelError(
            "feasible extensions require the lower equalities to be "
            "eliminated first"
        )
    samples = sample_shared_points(problem, 200, seed=0, scale_hint=point)
    for comps, method in _pattern_proposals(problem, point):
        if _proposal_violates_samples(problem, comps, samples):
            continue
        certs = _certify_fixed(problem, comps)
        if certs is not None:
            return Extension(tuple(comps), method, certs)
    for degree in (1, 2):
        ext = _synthesis_program(problem, point, degree)
        if ext is not None:
            return ext
    return None


def _proposal_violates_samples(
    problem: BilevelProblem,
    components: Sequence[Polynomial],
    samples: np.ndarray,
) -> bool:
    if samples.shape[0] == 0:
        return False
    try:
        lhs = _substituted_rows(problem, components)
    except ModelError:
        return True
    for poly in lhs:
        vals = poly.evaluate_many(samples)
        if vals.min() < -1e-7 * max(1.0, poly.max_abs_coeff()):
            return True
    return False


# ---------------------------------------------------------------------------
# verification


def sample_shared_points(
    problem: BilevelProblem,
    n_points: int,
    seed: int = 0,
    scale_hint: Optional[CandidatePoint] = None,
) -> np.ndarray:
    """Seeded rejection sample of the shared constraint set."""
    rng = np.random.default_rng(seed)
    dim = problem.space.total
    radius = 2.0
    if scale_hint is not None:
        radius = max(2.0, 1.5 * float(np.max(np.abs(scale_hint.combined()))) + 1.0)
    affine_eqs = [h for h in problem.upper_eq if h.degree <= 1]
    other_eqs = [h for h in problem.upper_eq if h.degree > 1]
    H = None
    if affine_eqs:
        H = np.zeros((len(affine_eqs), dim))
        c0 = np.zeros(len(affine_eqs))
        zero = tuple([0] * dim)
        for i, h in enumerate(affine_eqs):
            for exp, cc in h.terms():
                if exp == zero:
                    c0[i] = cc
                else:
                    H[i, exp.index(1)] = cc
    accepted: List[np.ndarray] = []
    # thin sets starve plain rejection sampling, so retry at smaller scales
    for scale in (radius, radius / 2.0, radius / 4.0, radius / 8.0):
        budget = 40
        while len(accepted) < n_points and budget > 0:
            budget -= 1
            batch = rng.uniform(-scale, scale, size=(2500, dim))
            if H is not None:
                resid = batch @ H.T + c0
                corr, *_ = np.linalg.lstsq(H, resid.T, rcond=None)
                batch = batch - corr.T
            keep = np.ones(len(batch), dtype=bool)
            for h in other_eqs:
                keep &= np.abs(h.evaluate_many(batch)) <= 1e-3
            for g in problem.upper_ineq:
                keep &= g.evaluate_many(batch) >= -1e-9
            for row in problem.rows:
                keep &= row.as_poly().evaluate_many(batch) >= -1e-9
            for pt in batch[keep]:
                accepted.append(pt)
                if len(accepted) >= n_points:
                    break
        if len(accepted) >= n_points:
            break
    return np.array(accepted) if accepted else np.zeros((0, dim))


def _certificate_residual(
    problem: BilevelProblem,
    lhs: Polynomial,
    cert: RowCertificate,
) -> float:
    space = problem.space
    rhs = Polynomial.const(space, cert.offset)
    for w, (h, _) in zip(cert.upper_weights, _upper_list(problem)):
        if w != 0.0:
            rhs = rhs + float(w) * h
    for w, j in zip(cert.row_weights, range(problem.m)):
        if w != 0.0:
            rhs = rhs + float(w) * _row_at_y(problem, j)
    if cert.psd is not None:
        basis1 = monomials(space.total, 1)
        terms: Dict[Tuple[int, ...], float] = {}
        s = len(basis1)
        for i in range(s):
            for j in range(s):
                exp = tuple(a + b for a, b in zip(basis1[i], basis1[j]))
                terms[exp] = terms.get(exp, 0.0) + cert.psd[i, j]
        rhs = rhs + Polynomial(space, terms)
    diff = lhs - rhs
    return diff.max_abs_coeff() / max(1.0, lhs.max_abs_coeff())


def verify_extension(
    problem: BilevelProblem,
    ext: Extension,
    point: CandidatePoint,
    n_samples: int = 1000,
    seed: int = 0,
) -> VerificationReport:
    pt = point.combined()
    interp = max(
        abs(comp.evaluate(pt) - float(z))
        for comp, z in zip(ext.components, point.z)
    )
    lhs_list = _substituted_rows(problem, ext.components)
    cert_err = 0.0
    min_weight = np.inf
    min_eig = np.inf
    for lhs, cert in zip(lhs_list, ext.certificates):
        cert_err = max(cert_err, _certificate_residual(problem, lhs, cert))
        min_weight = min(min_weight, cert.offset)
        for w, (_, kind) in zip(cert.upper_weights, _upper_list(problem)):
            if kind == "ineq":
                min_weight = min(min_weight, float(w))
        if len(cert.row_weights):
            min_weight = min(min_weight, float(cert.row_weights.min()))
        if cert.psd is not None:
            min_eig = min(min_eig, float(np.linalg.eigvalsh(cert.psd)[0]))
    samples = sample_shared_points(problem, n_samples, seed, scale_hint=point)
    worst = 0.0
    for lhs in lhs_list:
        if samples.shape[0]:
            vals = lhs.evaluate_many(samples)
            worst = max(
                worst, -float(vals.min()) / max(1.0, lhs.max_abs_coeff())
            )
    ok = (
        interp <= INTERP_TOL
        and cert_err <= IDENTITY_TOL
        and min_weight >= -SIGN_TOL
        and (min_eig == np.inf or min_eig >= -PSD_EIG_TOL)
        and worst <= 1e-7
    )
    return VerificationReport(
        ok=bool(ok),
        interpolation_error=float(interp),
        certificate_error=float(cert_err),
        min_weight=float(min_weight if min_weight != np.inf else 0.0),
        min_psd_eig=float(min_eig if min_eig != np.inf else 0.0),
        sample_count=int(samples.shape[0]),
        worst_sample_violation=float(worst),
    )


# ---------------------------------------------------------------------------
# refinement cuts


def extension_cut(
    problem: BilevelProblem, ext: Extension
) -> Tuple[Polynomial, Optional[Polynomial]]:
    """Cleared cut polynomial for f(x, q(x, y)) - f(x, y) >= 0.

    Returns (cut, None) for a polynomial lower objective.  For a rational
    objective returns (numerator, denominator); the caller must check the
    denominator is positive on the feasible set before using the cut.
    """
    sub = {
        idx: ext.components[i]
        for i, idx in enumerate(problem.space.lower_indices())
    }
    f = problem.lower_obj
    if isinstance(f, RationalFn):
        shifted = f.substitute(sub)
        diff = (
            shifted - f
            if isinstance(shifted, RationalFn)
            else RationalFn(
                shifted * f.den - f.num, f.den
            )
        )
        if isinstance(diff, Polynomial):
            return diff.chop(1e-14), None
        num = diff.num.chop(1e-14)
        den = diff.den.chop(1e-14)
        return num, den
    shifted = f.substitute(sub)
    assert isinstance(shifted, Polynomial)
    return (shifted - f).chop(1e-14), None
