"""Moment relaxation hierarchy for polynomial optimization problems.

A :class:`PolyProgram` is  min f(w)  over  {w : h_i(w) = 0, g_j(w) >= 0}
with everything polynomial.  Order-k relaxation: one PSD moment matrix over
the degree-k monomial basis, a localizing PSD block per inequality at order
k - ceil(deg/2) (order-0 localizers degenerate to linear rows), and linear
equality rows h_i * w^alpha for every monomial alpha that keeps the product
within degree 2k.  The hierarchy climbs until flat truncation certifies
exactness and minimizer extraction succeeds, or the order budget runs out
(reported as ``stalled`` with the best bound; never silently upgraded).

Minimizer extraction is the usual multiplication-operator construction:
greedy column basis from the moment matrix, operators solved in least
squares, simultaneous diagonalization via one ordered real Schur
factorization of a seeded random convex combination.

``minimize_rational`` handles a quotient objective by bisection on the level
parameter, after certifying the denominator positive on the feasible set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import comb
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .conic import RAY_RADIUS_FLOOR, ConicProgram, PSDBlock, solve_conic
from .poly import Polynomial, RationalFn, VarSpace

MOMENT_WARN = 1_000_000
RANK_RATIO = 1e-6
FEAS_TOL = 1e-5
GAP_TOL = 1e-5
BOUND_BACKSTEP = 1e-7
BISECT_WIDTH = 1e-7

# A stalled interior-point endgame is still usable when the iterate is
# primal-feasible with a closed gap: extract a candidate point from its
# moments, then certify it by refuting a value cut.  If the same
# relaxation with the extra constraint  objective <= value - delta  is
# infeasible (dual ray), no feasible point sits delta below the
# candidate, which bounds the optimum without trusting the stalled dual.
STALL_PRES = 1e-7
STALL_GAP = 1e-5
STALL_CERT_DELTA = 1e-4


class PopError(ValueError):
    pass


@dataclass(frozen=True)
class PolyProgram:
    objective: Polynomial
    eqs: Tuple[Polynomial, ...] = ()
    ineqs: Tuple[Polynomial, ...] = ()

    @property
    def space(self) -> VarSpace:
        return self.objective.space

    @property
    def n_vars(self) -> int:
        return self.space.total

    def min_order(self) -> int:
        d = max(
            [self.objective.degree]
            + [h.degree for h in self.eqs]
            + [g.degree for g in self.ineqs]
            + [1]
        )
        return (d + 1) // 2

    def residual(self, point: np.ndarray) -> float:
        worst = 0.0
        for h in self.eqs:
            worst = max(worst, abs(h.evaluate(point)) / max(1.0, h.max_abs_coeff()))
        for g in self.ineqs:
            worst = max(
                worst, -min(0.0, g.evaluate(point)) / max(1.0, g.max_abs_coeff())
            )
        return worst


@dataclass(frozen=True)
class PopOptions:
    order: Optional[int] = None  # starting order, default: minimal legal
    extra_orders: int = 3  # hierarchy budget above the start
    seed: int = 42
    feas_tol: float = FEAS_TOL
    gap_tol: float = GAP_TOL
    max_conic_iter: int = 200
    # how many extra hierarchy orders to try after the conic solver first
    # stalls; recovery at the same order does most of the work, so the
    # climb is kept short to bound runtime
    stall_extra_orders: int = 1


@dataclass(frozen=True)
class PopResult:
    status: str  # optimal | infeasible | unbounded | stalled
    bound: Optional[float]
    value: Optional[float]
    points: Tuple[np.ndarray, ...]
    order: int
    flat_order: Optional[int]
    history: Tuple[Tuple[int, str, Optional[float]], ...]
    message: str = ""

    @property
    def minimizer(self) -> Optional[np.ndarray]:
        return self.points[0] if self.points else None


@dataclass(frozen=True)
class _Meta:
    k: int
    basis: Tuple[Tuple[int, ...], ...]  # degree <= 2k, graded order
    index: Dict[Tuple[int, ...], int]
    sizes: Tuple[int, ...]  # L_d for d = 0..2k


def monomials(n_vars: int, max_deg: int) -> List[Tuple[int, ...]]:
    """All exponent tuples with total degree <= max_deg, graded-lex order."""
    out: List[Tuple[int, ...]] = []

    def rec(prefix: List[int], remaining: int, slots: int) -> None:
        if slots == 0:
            out.append(tuple(prefix))
            return
        for e in range(remaining + 1):
            prefix.append(e)
            rec(prefix, remaining - e, slots - 1)
            prefix.pop()

    by_deg: List[Tuple[int, ...]] = []
    for d in range(max_deg + 1):
        level: List[Tuple[int, ...]] = []

        def rec_exact(prefix: List[int], remaining: int, slots: int) -> None:
            if slots == 1:
                level.append(tuple(prefix + [remaining]))
                return
            for e in range(remaining + 1):
                prefix.append(e)
                rec_exact(prefix, remaining - e, slots - 1)
                prefix.pop()

        if n_vars == 0:
            if d == 0:
                level.append(())
        else:
            rec_exact([], d, n_vars)
        by_deg.extend(sorted(level))
    return by_deg


def moment_count(n_vars: int, k: int) -> int:
    return comb(n_vars + 2 * k, 2 * k)


def _build_meta(n_vars: int, k: int) -> _Meta:
    basis = tuple(monomials(n_vars, 2 * k))
    index = {m: i for i, m in enumerate(basis)}
    sizes = tuple(comb(n_vars + d, d) for d in range(2 * k + 1))
    return _Meta(k=k, basis=basis, index=index, sizes=sizes)


def _add(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    return tuple(x + y for x, y in zip(a, b))


def relax(pop: PolyProgram, k: int) -> Tuple[ConicProgram, _Meta]:
    n = pop.n_vars
    if k < pop.min_order():
        raise PopError(f"order {k} below the minimal legal order {pop.min_order()}")
    meta = _build_meta(n, k)
    idx = meta.index
    n_moments = len(meta.basis) - 1  # the zero monomial is pinned to 1

    def var_of(mono: Tuple[int, ...]) -> int:
        return idx[mono] - 1

    # objective
    c = np.zeros(n_moments)
    offset = 0.0
    for exp, coeff in pop.objective.terms():
        if sum(exp) == 0:
            offset += coeff
        else:
            c[var_of(exp)] += coeff

    blocks: List[PSDBlock] = []
    lin_rows: List[Tuple[float, Dict[int, float]]] = []

    # principal moment block over basis_k
    Lk = meta.sizes[k]
    f0 = np.zeros((Lk, Lk))
    entries: List[Tuple[int, int, int, float]] = []
    for r in range(Lk):
        for cc in range(r, Lk):
            gamma = _add(meta.basis[r], meta.basis[cc])
            if sum(gamma) == 0:
                f0[r, cc] = 1.0
                f0[cc, r] = 1.0
            else:
                entries.append((var_of(gamma), r, cc, 1.0))
    blocks.append(PSDBlock.from_entries(Lk, f0, entries))

    # localizing blocks / rows per inequality
    for g in pop.ineqs:
        kg = k - (g.degree + 1) // 2
        if kg < 0:
            raise PopError("inequality degree exceeds 2k")
        if kg == 0:
            const = 0.0
            row: Dict[int, float] = {}
            for exp, coeff in g.terms():
                if sum(exp) == 0:
                    const += coeff
                else:
                    row[var_of(exp)] = row.get(var_of(exp), 0.0) + coeff
            lin_rows.append((const, row))
            continue
        L = meta.sizes[kg]
        f0g = np.zeros((L, L))
        ent: List[Tuple[int, int, int, float]] = []
        for r in range(L):
            for cc in range(r, L):
                base = _add(meta.basis[r], meta.basis[cc])
                for exp, coeff in g.terms():
                    gamma = _add(base, exp)
                    if sum(gamma) == 0:
                        f0g[r, cc] += coeff
                        if r != cc:
                            f0g[cc, r] += coeff
                    else:
                        ent.append((var_of(gamma), r, cc, coeff))
        blocks.append(PSDBlock.from_entries(L, f0g, ent))

    # equality rows h * w^alpha
    eq_data: List[Tuple[Dict[int, float], float]] = []
    for h in pop.eqs:
        top = 2 * k - h.degree
        if top < 0:
            raise PopError("equality degree exceeds 2k")
        for alpha in meta.basis[: meta.sizes[top]]:
            row: Dict[int, float] = {}
            rhs = 0.0
            for exp, coeff in h.terms():
                gamma = _add(alpha, exp)
                if sum(gamma) == 0:
                    rhs -= coeff
                else:
                    row[var_of(gamma)] = row.get(var_of(gamma), 0.0) + coeff
            eq_data.append((row, rhs))

    eq_A = None
    eq_b = None
    if eq_data:
        rows_i: List[int] = []
        cols_i: List[int] = []
        vals: List[float] = []
        b = np.zeros(len(eq_data))
        for i, (row, rhs) in enumerate(eq_data):
            b[i] = rhs
            for j, v in row.items():
                rows_i.append(i)
                cols_i.append(j)
                vals.append(v)
        eq_A = sp.csr_matrix(
            (vals, (rows_i, cols_i)), shape=(len(eq_data), n_moments)
        )
        eq_b = b

    lin_const = None
    lin_D = None
    if lin_rows:
        rows_i = []
        cols_i = []
        vals = []
        const = np.zeros(len(lin_rows))
        for i, (cst, row) in enumerate(lin_rows):
            const[i] = cst
            for j, v in row.items():
                rows_i.append(i)
                cols_i.append(j)
                vals.append(v)
        lin_const = const
        lin_D = sp.csr_matrix(
            (vals, (rows_i, cols_i)), shape=(len(lin_rows), n_moments)
        )

    prog = ConicProgram(
        n_vars=n_moments,
        c=c,
        offset=offset,
        psd_blocks=blocks,
        lin_const=lin_const,
        lin_D=lin_D,
        eq_A=eq_A,
        eq_b=eq_b,
    )
    return prog, meta


def _moment_matrix(y_full: np.ndarray, meta: _Meta, s: int) -> np.ndarray:
    L = meta.sizes[s]
    M = np.empty((L, L))
    for r in range(L):
        for cc in range(r, L):
            v = y_full[meta.index[_add(meta.basis[r], meta.basis[cc])]]
            M[r, cc] = v
            M[cc, r] = v
    return M


def _rank(M: np.ndarray) -> int:
    sv = np.linalg.svd(M, compute_uv=False)
    if sv.size == 0:
        return 0
    return int(np.sum(sv > RANK_RATIO * max(sv[0], 1e-12)))


def _extract_points(
    y_full: np.ndarray, meta: _Meta, pop: PolyProgram, s: int, d: int, rng: np.random.Generator
) -> Optional[List[np.ndarray]]:
    """Minimizer candidates from a flat moment matrix, or None on failure."""
    n = pop.n_vars
    Ms = _moment_matrix(y_full, meta, s)
    r = _rank(Ms)
    if r == 1:
        pt = np.array([y_full[meta.index[tuple(np.eye(n, dtype=int)[i])]] for i in range(n)])
        return [pt]
    # greedy independent columns among monomials of degree <= s - d
    limit = meta.sizes[s - d]
    norm_scale = float(np.linalg.norm(Ms)) or 1.0
    sel: List[int] = []
    Q: Optional[np.ndarray] = None
    for j in range(limit):
        col = Ms[:, j]
        resid = col if Q is None else col - Q @ (Q.T @ col)
        if np.linalg.norm(resid) > 1e-6 * norm_scale:
            q = resid / np.linalg.norm(resid)
            Q = q[:, None] if Q is None else np.hstack([Q, q[:, None]])
            sel.append(j)
        if len(sel) == r:
            break
    if len(sel) < r:
        return None
    W = Ms[:, sel]
    ops: List[np.ndarray] = []
    for i in range(n):
        cols = []
        for j in sel:
            target = list(meta.basis[j])
            target[i] += 1
            tt = tuple(target)
            pos = meta.index.get(tt)
            if pos is None or sum(tt) > s:
                return None
            cols.append(Ms[:, pos] if pos < Ms.shape[1] else None)
            if cols[-1] is None:
                return None
        Wi = np.stack(cols, axis=1)
        Ni, *_ = np.linalg.lstsq(W, Wi, rcond=None)
        ops.append(Ni)
    weights = rng.random(n) + 0.1
    weights /= weights.sum()
    Ncomb = sum(w * Ni for w, Ni in zip(weights, ops))
    try:
        T, Qs = sla.schur(Ncomb, output="real")
    except Exception:
        return None
    pts = []
    for j in range(Qs.shape[1]):
        q = Qs[:, j]
        pts.append(np.array([float(q @ Ni @ q) for Ni in ops]))
    # dedup
    uniq: List[np.ndarray] = []
    for pt in sorted(pts, key=lambda p: tuple(p)):
        if not any(np.max(np.abs(pt - u)) <= 1e-6 for u in uniq):
            uniq.append(pt)
    return uniq


def solve_pop(pop: PolyProgram, options: PopOptions = PopOptions()) -> PopResult:
    k0 = options.order if options.order is not None else pop.min_order()
    k0 = max(k0, pop.min_order())
    kmax = k0 + options.extra_orders
    d = max(
        [1]
        + [(h.degree + 1) // 2 for h in pop.eqs]
        + [(g.degree + 1) // 2 for g in pop.ineqs]
    )
    history: List[Tuple[int, str, Optional[float]]] = []
    best_bound: Optional[float] = None
    message = ""
    first_stall: Optional[int] = None

    def harvest(
        y_full: np.ndarray, meta, k: int, rng: np.random.Generator
    ) -> Tuple[List[np.ndarray], Optional[int]]:
        """Feasible points read off a moment vector, plus the flat order."""
        flat_hit: Optional[int] = None
        found: List[np.ndarray] = []
        for s in range(d, k + 1):
            r_low = _rank(_moment_matrix(y_full, meta, s - d))
            r_high = _rank(_moment_matrix(y_full, meta, s))
            if r_low != r_high:
                continue
            if flat_hit is None:
                flat_hit = s
            pts = _extract_points(y_full, meta, pop, s, d, rng)
            if pts is None:
                continue
            feas = [p for p in pts if pop.residual(p) <= options.feas_tol]
            if feas:
                found.extend(feas)
                break
        # the first-order moments themselves often form a feasible point
        # even when no rank condition holds
        eye = np.eye(pop.n_vars, dtype=int)
        mean_pt = np.array(
            [y_full[meta.index[tuple(eye[i])]] for i in range(pop.n_vars)]
        )
        if pop.residual(mean_pt) <= options.feas_tol:
            found.append(mean_pt)
        return found, flat_hit

    def select(cands: List[np.ndarray]) -> Tuple[float, Tuple[np.ndarray, ...]]:
        vals = [float(pop.objective.evaluate(p)) for p in cands]
        v_best = min(vals)
        keep = [
            p
            for p, v in sorted(zip(cands, vals), key=lambda t: (t[1], tuple(t[0])))
            if v <= v_best + 1e-6 * max(1.0, abs(v_best))
        ]
        return v_best, tuple(keep)

    def refute_below(v_best: float, k: int, moment_norm: float) -> Optional[float]:
        """Certify v_best by showing the set has nothing delta below it.

        The refutation is only trusted when the dual ray excludes points
        far beyond the moment scale seen at the stalled solve, so a
        merely-distant feasible point cannot slip past as infeasibility.
        """
        delta = STALL_CERT_DELTA * max(1.0, abs(v_best))
        cut = Polynomial.const(pop.space, v_best - delta) - pop.objective
        probe = PolyProgram(pop.objective, pop.eqs, pop.ineqs + (cut,))
        prog_c, _ = relax(probe, max(k, probe.min_order()))
        floor = max(RAY_RADIUS_FLOOR, 1e3 * (1.0 + moment_norm))
        cres = solve_conic(
            prog_c, max_iter=options.max_conic_iter, ray_radius_floor=floor
        )
        if cres.status == "infeasible":
            return delta
        return None

    for k in range(k0, kmax + 1):
        if moment_count(pop.n_vars, k) > MOMENT_WARN:
            message = (
                f"order-{k} relaxation needs {moment_count(pop.n_vars, k)} moments; "
                "consider a ball constraint or a rank override"
            )
            history.append((k, "skipped", None))
            break
        prog, meta = relax(pop, k)
        res = solve_conic(prog, max_iter=options.max_conic_iter)
        history.append((k, res.status, res.objective))
        if res.status == "infeasible":
            return PopResult(
                status="infeasible",
                bound=None,
                value=None,
                points=(),
                order=k,
                flat_order=None,
                history=tuple(history),
                message=res.message,
            )
        if res.status == "unbounded":
            if k == kmax:
                return PopResult(
                    status="unbounded",
                    bound=None,
                    value=None,
                    points=(),
                    order=k,
                    flat_order=None,
                    history=tuple(history),
                    message="relaxation unbounded at every tried order",
                )
            continue
        rng = np.random.default_rng(options.seed + 7919 * k)
        if res.status == "stalled":
            if (
                res.u is not None
                and res.primal_residual <= STALL_PRES
                and res.relative_gap <= STALL_GAP
            ):
                y_full = np.concatenate([[1.0], res.u])
                cands, flat = harvest(y_full, meta, k, rng)
                if cands:
                    v_best, pts = select(cands)
                    delta = refute_below(
                        v_best, k, float(np.linalg.norm(y_full))
                    )
                    if delta is not None:
                        return PopResult(
                            status="optimal",
                            bound=v_best - delta,
                            value=v_best,
                            points=pts,
                            order=k,
                            flat_order=flat,
                            history=tuple(history),
                            message=(
                                "stalled endgame recovered; a value cut "
                                f"below the candidate was refuted at gap {delta:.1e}"
                            ),
                        )
            message = f"conic solver stalled at order {k}: {res.message}"
            if first_stall is None:
                first_stall = k
            if k - first_stall >= options.stall_extra_orders:
                break
            continue
        bound = float(res.objective)
        if best_bound is None or bound > best_bound - BOUND_BACKSTEP:
            best_bound = bound if best_bound is None else max(best_bound, bound)
        y_full = np.concatenate([[1.0], res.u])
        cands, flat = harvest(y_full, meta, k, rng)
        if cands:
            v_best, pts = select(cands)
            if v_best - bound <= options.gap_tol * max(1.0, abs(bound)):
                msg = (
                    ""
                    if flat is not None
                    else "certified via the first-order moment point"
                )
                return PopResult(
                    status="optimal",
                    bound=bound,
                    value=v_best,
                    points=pts,
                    order=k,
                    flat_order=flat,
                    history=tuple(history),
                    message=msg,
                )
    return PopResult(
        status="stalled",
        bound=best_bound,
        value=None,
        points=(),
        order=min(kmax, history[-1][0] if history else kmax),
        flat_order=None,
        history=tuple(history),
        message=message or "no flat truncation within the order budget",
    )


# ---------------------------------------------------------------------------
# rational objectives


class RationalObjectiveError(RuntimeError):
    pass


def minimize_rational(
    num: Polynomial,
    den: Polynomial,
    eqs: Sequence[Polynomial],
    ineqs: Sequence[Polynomial],
    options: PopOptions = PopOptions(),
    feasible_point: Optional[np.ndarray] = None,
) -> PopResult:
    """Minimize num/den over a basic closed set via level-set bisection.

    The denominator must be certified strictly positive on the set first;
    otherwise the quotient is meaningless there and we refuse.
    """
    eqs = tuple(eqs)
    ineqs = tuple(ineqs)
    base_opts = replace(options, order=None)

    den_res = solve_pop(PolyProgram(den, eqs, ineqs), base_opts)
    if den_res.status == "infeasible":
        return den_res
    if den_res.bound is None or den_res.bound <= 1e-8:
        raise RationalObjectiveError(
            "denominator not certified positive on the feasible set "
            f"(best lower bound {den_res.bound})"
        )
    den_lo = den_res.bound

    num_res = solve_pop(PolyProgram(num, eqs, ineqs), base_opts)
    if num_res.status == "infeasible":
        return num_res
    neg_den_res = solve_pop(PolyProgram(-den, eqs, ineqs), base_opts)
    den_hi = -neg_den_res.bound if neg_den_res.bound is not None else None

    a = num_res.bound
    if a is None:
        raise RationalObjectiveError("no lower bound for the numerator")
    if a <= 0:
        lo = a / den_lo
    else:
        lo = 0.0 if den_hi is None else a / den_hi

    pt = feasible_point
    if pt is None and den_res.points:
        pt = den_res.points[0]
    if pt is None and num_res.points:
        pt = num_res.points[0]
    if pt is None:
        raise RationalObjectiveError(
            "no feasible point available to start the bisection"
        )
    hi = float(num.evaluate(pt) / den.evaluate(pt))
    lo = min(lo, hi)

    best_points: Tuple[np.ndarray, ...] = ()
    history: List[Tuple[int, str, Optional[float]]] = []
    guard = 0
    while hi - lo > BISECT_WIDTH and guard < 80:
        guard += 1
        gamma = 0.5 * (lo + hi)
        test = solve_pop(PolyProgram(num - gamma * den, eqs, ineqs), base_opts)
        history.extend(test.history)
        if test.status == "infeasible":
            return test
        if test.bound is None:
            return PopResult(
                status="stalled",
                bound=lo,
                value=None,
                points=best_points,
                order=0,
                flat_order=None,
                history=tuple(history),
                message="level-set subproblem gave no bound",
            )
        if test.bound >= -1e-9 * max(1.0, abs(gamma)):
            lo = gamma
        else:
            hi = gamma
            if test.points:
                best_points = test.points
    value = 0.5 * (lo + hi)
    pts = best_points
    if pts:
        vals = [float(num.evaluate(p) / den.evaluate(p)) for p in pts]
        order = np.argsort(vals)
        pts = tuple(pts[i] for i in order)
        value = min(min(vals), value)
    return PopResult(
        status="optimal",
        bound=lo,
        value=float(value),
        points=pts,
        order=0,
        flat_order=None,
        history=tuple(history),
        message="bisection on the level parameter",
    )
