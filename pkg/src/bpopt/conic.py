"""Dense primal-dual interior-point solver for linear conic programs.

Problem form (all data dense or scipy-sparse, variables u in R^n):

    minimize    c^T u + offset
    subject to  A_eq u = b_eq
                const_r + D u >= 0                       (componentwise)
                S_b(u) = F_{b,0} + sum_i u_i F_{b,i}  PSD    for each block b

Equalities are removed up front by an orthogonal nullspace change of
variables (QR with pivoting; inconsistent systems are reported as infeasible
before any iteration).  The iteration is a standard Nesterov-Todd scaled
Mehrotra predictor-corrector with a single common step length.  The Schur
complement is assembled blockwise from the sparse coefficient structure in
the *original* variables and congruence-projected by the nullspace basis,
which keeps the cost workable for moment-matrix sized blocks.

Infeasibility and unboundedness are detected heuristically from normalized
ray certificates (no self-dual embedding); anything undecided within the
iteration budget is reported as ``stalled``, never as solved or infeasible.
The solver is fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

FEAS_TOL = 1e-9
OPT_TOL = 1e-8
ACCEPT_TOL = 1e-7
MAX_ITER = 200
RAY_TOL = 1e-7
# A scaled dual ray zh (<f0,zh> = -1) only excludes feasible points with
# norm below 1/||A*zh||.  Accepting it as an infeasibility certificate
# therefore needs that exclusion radius to be large; wandering iterates
# on feasible problems with huge solutions plateau at the solution norm
# and are filtered out by the floor.
RAY_RADIUS_FLOOR = 1e8


@dataclass
class PSDBlock:
    """S(u) = f0 + sum_i u_i F_i must be PSD.

    Coefficient entries are stored fully symmetric (both triangles present),
    sorted by variable index.
    """

    dim: int
    f0: np.ndarray
    var_idx: np.ndarray
    row_idx: np.ndarray
    col_idx: np.ndarray
    vals: np.ndarray

    @classmethod
    def from_entries(
        cls, dim: int, f0: np.ndarray, entries: Sequence[Tuple[int, int, int, float]]
    ) -> "PSDBlock":
        """Build from upper-triangle entries (var, r, c, val) with r <= c."""
        vi: List[int] = []
        ri: List[int] = []
        ci: List[int] = []
        vv: List[float] = []
        for var, r, c, val in entries:
            if val == 0.0:
                continue
            vi.append(var)
            ri.append(r)
            ci.append(c)
            vv.append(val)
            if r != c:
                vi.append(var)
                ri.append(c)
                ci.append(r)
                vv.append(val)
        order = np.lexsort((np.asarray(ci), np.asarray(ri), np.asarray(vi))) if vi else np.array([], int)
        f0 = np.asarray(f0, dtype=float)
        f0 = 0.5 * (f0 + f0.T)
        return cls(
            dim=dim,
            f0=f0,
            var_idx=np.asarray(vi, int)[order] if len(vi) else np.array([], int),
            row_idx=np.asarray(ri, int)[order] if len(vi) else np.array([], int),
            col_idx=np.asarray(ci, int)[order] if len(vi) else np.array([], int),
            vals=np.asarray(vv, float)[order] if len(vi) else np.array([], float),
        )

    def map_point(self, u: np.ndarray) -> np.ndarray:
        out = self.f0.copy()
        if len(self.var_idx):
            np.add.at(out, (self.row_idx, self.col_idx), self.vals * u[self.var_idx])
        return out

    def map_linear(self, du: np.ndarray) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        if len(self.var_idx):
            np.add.at(out, (self.row_idx, self.col_idx), self.vals * du[self.var_idx])
        return out

    def adjoint(self, Z: np.ndarray, n_vars: int) -> np.ndarray:
        out = np.zeros(n_vars)
        if len(self.var_idx):
            np.add.at(out, self.var_idx, self.vals * Z[self.row_idx, self.col_idx])
        return out

    def gather_matrix(self, n_vars: int) -> sp.csr_matrix:
        """Sparse (n_vars, dim*dim) matrix with row i = vec(F_i)."""
        if not len(self.var_idx):
            return sp.csr_matrix((n_vars, self.dim * self.dim))
        flat = self.row_idx * self.dim + self.col_idx
        return sp.csr_matrix(
            (self.vals, (self.var_idx, flat)), shape=(n_vars, self.dim * self.dim)
        )


@dataclass
class ConicProgram:
    n_vars: int
    c: np.ndarray
    offset: float = 0.0
    psd_blocks: List[PSDBlock] = field(default_factory=list)
    lin_const: Optional[np.ndarray] = None  # (rows,)
    lin_D: Optional[sp.csr_matrix] = None  # (rows, n_vars)
    eq_A: Optional[sp.csr_matrix] = None  # (k, n_vars)
    eq_b: Optional[np.ndarray] = None

    def validate(self) -> None:
        assert self.c.shape == (self.n_vars,)
        if self.lin_D is not None:
            assert self.lin_D.shape[1] == self.n_vars
            assert self.lin_const is not None
            assert self.lin_const.shape[0] == self.lin_D.shape[0]


@dataclass
class ConicResult:
    status: str  # optimal | infeasible | unbounded | stalled
    u: Optional[np.ndarray]
    objective: Optional[float]
    dual_objective: Optional[float]
    iterations: int
    primal_residual: float
    dual_residual: float
    relative_gap: float
    psd_duals: List[np.ndarray] = field(default_factory=list)
    lin_dual: Optional[np.ndarray] = None
    message: str = ""
    # exclusion radius of the accepted dual ray (infeasible status only):
    # every feasible point of the reduced problem has norm at least this
    infeas_radius: Optional[float] = None


# ---------------------------------------------------------------------------
# presolve


@dataclass
class _Reduced:
    u0: np.ndarray
    N: Optional[np.ndarray]  # nullspace basis, None means identity
    c_red: np.ndarray
    offset: float
    psd: List[PSDBlock]  # original blocks, shifted constants handled via u0
    f0_eff: List[np.ndarray]
    lin_const_eff: np.ndarray
    lin_D: sp.csr_matrix  # original lin rows kept (possibly empty)
    lin_D_red: np.ndarray  # dense projected rows (rows, nv)
    kept_rows: np.ndarray
    n_red: int


def _presolve(prog: ConicProgram) -> Tuple[Optional[_Reduced], Optional[ConicResult]]:
    n = prog.n_vars
    if prog.eq_A is not None and prog.eq_A.shape[0] > 0:
        A = prog.eq_A.toarray() if sp.issparse(prog.eq_A) else np.asarray(prog.eq_A)
        b = np.asarray(prog.eq_b, float)
        u0, res, rank_ls, _ = np.linalg.lstsq(A, b, rcond=None)
        resid = np.linalg.norm(A @ u0 - b)
        if resid > 1e-7 * (1.0 + np.linalg.norm(b)):
            return None, ConicResult(
                status="infeasible",
                u=None,
                objective=None,
                dual_objective=None,
                iterations=0,
                primal_residual=float(resid),
                dual_residual=0.0,
                relative_gap=np.inf,
                message="equality rows are inconsistent",
            )
        # SVD nullspace: unpivoted QR misorders dependent rows and then the
        # trailing columns no longer span null(A)
        _, svals, Vt = np.linalg.svd(A, full_matrices=True)
        cutoff = 1e-10 * (svals.max() if svals.size else 1.0)
        rank = int(np.sum(svals > cutoff))
        N = Vt[rank:].T
        if N.shape[1] == 0:
            N = None  # fully determined
    else:
        u0 = np.zeros(n)
        N = np.eye(n)

    nv = 0 if N is None else N.shape[1]
    c_red = np.zeros(0) if N is None else N.T @ prog.c
    offset = prog.offset + float(prog.c @ u0)

    f0_eff = [blk.map_point(u0) for blk in prog.psd_blocks]

    if prog.lin_D is not None and prog.lin_D.shape[0] > 0:
        D = prog.lin_D.tocsr() if sp.issparse(prog.lin_D) else sp.csr_matrix(prog.lin_D)
        const_eff = np.asarray(prog.lin_const, float) + D @ u0
        D_red = (D @ N) if N is not None else np.zeros((D.shape[0], 0))
        if sp.issparse(D_red):
            D_red = D_red.toarray()
        row_norm = np.sqrt(np.sum(D_red * D_red, axis=1)) if nv else np.zeros(D.shape[0])
        keep = row_norm > 1e-12 * max(1.0, float(np.max(row_norm)) if row_norm.size else 1.0)
        dropped_bad = (~keep) & (const_eff < -1e-7 * np.maximum(1.0, np.abs(const_eff)))
        if np.any(dropped_bad):
            return None, ConicResult(
                status="infeasible",
                u=None,
                objective=None,
                dual_objective=None,
                iterations=0,
                primal_residual=float(-const_eff[dropped_bad].min()),
                dual_residual=0.0,
                relative_gap=np.inf,
                message="a constant inequality row is violated after elimination",
            )
        kept_rows = np.where(keep)[0]
        lin_const_eff = const_eff[kept_rows]
        lin_D = D[kept_rows]
        lin_D_red = D_red[kept_rows]
    else:
        kept_rows = np.array([], int)
        lin_const_eff = np.zeros(0)
        lin_D = sp.csr_matrix((0, n))
        lin_D_red = np.zeros((0, nv))

    # constant PSD blocks after projection: must be PSD outright
    live_psd: List[PSDBlock] = []
    live_f0: List[np.ndarray] = []
    for blk, f0 in zip(prog.psd_blocks, f0_eff):
        active = False
        if len(blk.var_idx) and N is not None:
            sub = N[blk.var_idx, :]
            active = bool(np.any(np.abs(sub) > 1e-14))
        if not active:
            w = np.linalg.eigvalsh(f0) if blk.dim else np.array([0.0])
            if w.min() < -1e-7 * max(1.0, abs(w).max()):
                return None, ConicResult(
                    status="infeasible",
                    u=None,
                    objective=None,
                    dual_objective=None,
                    iterations=0,
                    primal_residual=float(-w.min()),
                    dual_residual=0.0,
                    relative_gap=np.inf,
                    message="a constant semidefinite block is violated after elimination",
                )
            continue
        live_psd.append(blk)
        live_f0.append(f0)

    red = _Reduced(
        u0=u0,
        N=N,
        c_red=c_red,
        offset=offset,
        psd=live_psd,
        f0_eff=live_f0,
        lin_const_eff=lin_const_eff,
        lin_D=lin_D,
        lin_D_red=lin_D_red,
        kept_rows=kept_rows,
        n_red=nv,
    )
    return red, None


# ---------------------------------------------------------------------------
# Schur complement assembly


_CHUNK_BUDGET = 6_000_000  # floats per temporary chunk


def _schur_block(blk: PSDBlock, Uw: np.ndarray, gather: sp.csr_matrix, n_vars: int) -> np.ndarray:
    """M_ij = <F_i, Uw F_j Uw> for one block, in original variables.

    Active variables only would be cheaper still, but the gather matrix is
    already restricted to the block's nonzeros, so dead rows cost nothing.
    """
    dim = blk.dim
    if not len(blk.var_idx):
        return np.zeros((0, 0))
    active = np.unique(blk.var_idx)
    na = len(active)
    # positions of each entry's variable inside `active`
    entry_pos = np.searchsorted(active, blk.var_idx)
    boundaries = np.searchsorted(entry_pos, np.arange(na + 1))
    M_active = np.zeros((na, na))
    Ur = Uw[blk.row_idx, :]
    Uc = Uw[blk.col_idx, :]
    gather_active = gather[active]
    chunk_vars = max(1, int(_CHUNK_BUDGET // (dim * dim + 1)))
    start_var = 0
    while start_var < na:
        end_var = min(na, start_var + chunk_vars)
        e0, e1 = boundaries[start_var], boundaries[end_var]
        if e1 > e0:
            contrib = (
                blk.vals[e0:e1, None, None]
                * Ur[e0:e1, :, None]
                * Uc[e0:e1, None, :]
            )
            seg_bounds = boundaries[start_var : end_var + 1] - e0
            H = np.add.reduceat(contrib, seg_bounds[:-1], axis=0)
            # reduceat quirk: empty segments copy the element; zero them
            empty = seg_bounds[:-1] == seg_bounds[1:]
            if np.any(empty):
                H[empty] = 0.0
            cols = gather_active @ H.reshape(end_var - start_var, dim * dim).T
            M_active[:, start_var:end_var] = cols
        start_var = end_var
    M = np.zeros((n_vars, n_vars))
    M[np.ix_(active, active)] = 0.5 * (M_active + M_active.T)
    return M


def _nt_scaling_psd(s: np.ndarray, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return (R, Rinv, lam, Uw) with R^-1 s R^-T = R^T z R = diag(lam)."""
    Ls = np.linalg.cholesky(s)
    Lz = np.linalg.cholesky(z)
    U_, sv, Vt = np.linalg.svd(Lz.T @ Ls)
    lam = sv
    sq = np.sqrt(sv)
    R = Ls @ Vt.T / sq
    Rinv = (U_ * (1.0 / sq)).T @ Lz.T  # diag(1/sq) @ U^T @ Lz^T
    Uw = Rinv.T @ Rinv
    return R, Rinv, lam, Uw


def _max_step_psd(L: np.ndarray, d: np.ndarray) -> float:
    """Largest alpha with X + alpha d PSD, where L = chol(X)."""
    Y = sla.solve_triangular(L, d, lower=True)
    Y = sla.solve_triangular(L, Y.T, lower=True)
    w = np.linalg.eigvalsh(0.5 * (Y + Y.T))
    wmin = w.min() if w.size else 0.0
    if wmin >= 0:
        return np.inf
    return 1.0 / (-wmin)


def solve_conic(
    prog: ConicProgram,
    max_iter: int = MAX_ITER,
    ray_radius_floor: float = RAY_RADIUS_FLOOR,
) -> ConicResult:
    prog.validate()
    red, early = _presolve(prog)
    if early is not None:
        return early
    assert red is not None

    nv = red.n_red
    if nv == 0:
        # equalities pinned every variable; feasibility already verified
        obj = red.offset
        return ConicResult(
            status="optimal",
            u=red.u0,
            objective=obj,
            dual_objective=obj,
            iterations=0,
            primal_residual=0.0,
            dual_residual=0.0,
            relative_gap=0.0,
        )

    psd = red.psd
    nblk = len(psd)
    nl = red.lin_const_eff.shape[0]
    if nblk == 0 and nl == 0:
        # unconstrained linear objective
        if np.linalg.norm(red.c_red) <= 1e-12:
            return ConicResult(
                status="optimal",
                u=red.u0,
                objective=red.offset,
                dual_objective=red.offset,
                iterations=0,
                primal_residual=0.0,
                dual_residual=0.0,
                relative_gap=0.0,
            )
        return ConicResult(
            status="unbounded",
            u=None,
            objective=None,
            dual_objective=None,
            iterations=0,
            primal_residual=0.0,
            dual_residual=0.0,
            relative_gap=np.inf,
            message="no cone constraints restrict a nonzero objective",
        )

    N = red.N
    n_orig = prog.n_vars
    gathers = [blk.gather_matrix(n_orig) for blk in psd]
    Dred = red.lin_D_red
    cone_order = sum(blk.dim for blk in psd) + nl

    def map_linear_red(dv: np.ndarray, blk: PSDBlock) -> np.ndarray:
        du = N @ dv if N is not None else dv
        return blk.map_linear(du)

    def adjoint_red(mats: List[np.ndarray], zlin: np.ndarray) -> np.ndarray:
        acc = np.zeros(n_orig)
        for blk, Z in zip(psd, mats):
            acc += blk.adjoint(Z, n_orig)
        if nl:
            acc += red.lin_D.T @ zlin
        return (N.T @ acc) if N is not None else acc

    # -- initial point --------------------------------------------------
    v = np.zeros(nv)
    s_psd: List[np.ndarray] = []
    z_psd: List[np.ndarray] = []
    for f0 in red.f0_eff:
        w = np.linalg.eigvalsh(f0)
        shift = max(0.0, -float(w.min())) + 1.0
        s_psd.append(f0 + shift * np.eye(f0.shape[0]))
        z_psd.append(np.eye(f0.shape[0]))
    s_lin = np.maximum(red.lin_const_eff, 1.0)
    z_lin = np.ones(nl)

    c_scale = 1.0 + float(np.linalg.norm(red.c_red))
    best = None
    stall_count = 0
    last_progress = np.inf

    status = "stalled"
    message = ""
    infeas_radius: Optional[float] = None
    it = 0
    for it in range(1, max_iter + 1):
        # residuals
        rp_psd = [
            red.f0_eff[b] + map_linear_red(v, psd[b]) - s_psd[b] for b in range(nblk)
        ]
        rp_lin = red.lin_const_eff + (Dred @ v if nl else np.zeros(0)) - s_lin
        rd = red.c_red - adjoint_red(z_psd, z_lin)

        gap = sum(float(np.sum(s_psd[b] * z_psd[b])) for b in range(nblk)) + float(
            s_lin @ z_lin
        )
        mu = gap / max(cone_order, 1)
        pobj = float(red.c_red @ v) + red.offset
        dobj = (
            red.offset
            - sum(float(np.sum(red.f0_eff[b] * z_psd[b])) for b in range(nblk))
            - float(red.lin_const_eff @ z_lin)
        )

        pres = max(
            [np.linalg.norm(r) / (1.0 + np.linalg.norm(red.f0_eff[b])) for b, r in enumerate(rp_psd)]
            + ([np.linalg.norm(rp_lin) / (1.0 + np.linalg.norm(red.lin_const_eff))] if nl else [])
            + [0.0]
        )
        dres = float(np.linalg.norm(rd)) / c_scale
        relgap = gap / max(1.0, abs(pobj))

        if pres <= OPT_TOL and dres <= OPT_TOL and relgap <= OPT_TOL:
            status = "optimal"
            break
        if best is None or max(pres, dres, relgap) < best[0]:
            best = (max(pres, dres, relgap), v.copy(), [m.copy() for m in z_psd], z_lin.copy(), pres, dres, relgap, pobj, dobj)

        # primal infeasibility: normalized dual ray
        ray_gamma = -(
            sum(float(np.sum(red.f0_eff[b] * z_psd[b])) for b in range(nblk))
            + float(red.lin_const_eff @ z_lin)
        )
        znorm = max(
            [float(np.linalg.norm(m)) for m in z_psd] + ([float(np.linalg.norm(z_lin))] if nl else []) + [0.0]
        )
        if ray_gamma > 1e3 * max(1.0, c_scale) and ray_gamma > 1e5 * max(1e-10, min(1.0, pres)):
            zh = [m / ray_gamma for m in z_psd]
            zlh = z_lin / ray_gamma
            ray_res = float(np.linalg.norm(adjoint_red(zh, zlh)))
            radius = 1.0 / ray_res if ray_res > 0.0 else np.inf
            if (
                ray_res <= RAY_TOL * max(1.0, znorm / ray_gamma)
                and radius >= ray_radius_floor
            ):
                status = "infeasible"
                message = "dual ray certificate found"
                infeas_radius = radius
                break
        # dual infeasibility: primal ray
        vnorm = float(np.linalg.norm(v))
        if vnorm > 1e8 and pobj < -1e6 * max(1.0, abs(red.offset)):
            vh = v / vnorm
            ok = float(red.c_red @ vh) < -1e-9
            for blk in psd:
                if ok:
                    w = np.linalg.eigvalsh(map_linear_red(vh, blk))
                    ok = w.min() >= -1e-7
            if ok and nl:
                ok = float((Dred @ vh).min()) >= -1e-7
            if ok:
                status = "unbounded"
                message = "primal ray certificate found"
                break

        # NT scalings
        try:
            scal = [
                _nt_scaling_psd(s_psd[b], z_psd[b]) for b in range(nblk)
            ]
        except np.linalg.LinAlgError:
            message = "scaling breakdown"
            break
        w_lin = np.sqrt(s_lin / z_lin) if nl else np.zeros(0)
        lam_lin = np.sqrt(s_lin * z_lin) if nl else np.zeros(0)

        # Schur complement in original variables, then projected
        M_orig = np.zeros((n_orig, n_orig))
        for b, blk in enumerate(psd):
            M_orig += _schur_block(blk, scal[b][3], gathers[b], n_orig)
        M_red = (N.T @ M_orig @ N) if N is not None else M_orig
        if nl:
            M_red = M_red + (Dred.T * (1.0 / (w_lin**2))) @ Dred
        M_red = 0.5 * (M_red + M_red.T)

        diag_scale = max(float(np.trace(M_red)) / max(nv, 1), 1e-10)
        chol = None
        reg = 1e-13
        while reg <= 1e-3:
            try:
                chol = np.linalg.cholesky(M_red + reg * diag_scale * np.eye(nv))
                break
            except np.linalg.LinAlgError:
                reg *= 100.0
        if chol is None:
            message = "Schur factorization breakdown"
            break

        def solve_M(rhs: np.ndarray) -> np.ndarray:
            t = sla.solve_triangular(chol, rhs, lower=True)
            return sla.solve_triangular(chol.T, t, lower=False)

        def direction(
            E_psd: List[np.ndarray], e_lin: np.ndarray
        ) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray], np.ndarray, np.ndarray]:
            rhs_v = -rd.copy()
            t1_mats = []
            for b, blk in enumerate(psd):
                R, Rinv, lam, Uw = scal[b]
                K = 2.0 * E_psd[b] / np.add.outer(lam, lam)
                T1 = Rinv.T @ K @ Rinv
                t1_mats.append(T1)
            acc = np.zeros(n_orig)
            for b, blk in enumerate(psd):
                Uw = scal[b][3]
                acc += blk.adjoint(t1_mats[b] - Uw @ rp_psd[b] @ Uw, n_orig)
            rhs_v += (N.T @ acc) if N is not None else acc
            if nl:
                rhs_v += Dred.T @ (
                    e_lin / (w_lin * lam_lin) - rp_lin / (w_lin**2)
                )
            dv = solve_M(rhs_v)
            ds_psd = []
            dz_psd = []
            for b, blk in enumerate(psd):
                Uw = scal[b][3]
                dS = map_linear_red(dv, blk) + rp_psd[b]
                dS = 0.5 * (dS + dS.T)
                dZ = t1_mats[b] - Uw @ dS @ Uw
                dZ = 0.5 * (dZ + dZ.T)
                ds_psd.append(dS)
                dz_psd.append(dZ)
            if nl:
                ds_lin = Dred @ dv + rp_lin
                dz_lin = e_lin / (w_lin * lam_lin) - ds_lin / (w_lin**2)
            else:
                ds_lin = np.zeros(0)
                dz_lin = np.zeros(0)
            return dv, ds_psd, dz_psd, ds_lin, dz_lin

        def max_step(
            ds_psd: List[np.ndarray], dz_psd: List[np.ndarray], ds_lin: np.ndarray, dz_lin: np.ndarray
        ) -> float:
            alpha = np.inf
            for b in range(nblk):
                Ls = np.linalg.cholesky(s_psd[b])
                Lz = np.linalg.cholesky(z_psd[b])
                alpha = min(alpha, _max_step_psd(Ls, ds_psd[b]))
                alpha = min(alpha, _max_step_psd(Lz, dz_psd[b]))
            if nl:
                neg = ds_lin < 0
                if np.any(neg):
                    alpha = min(alpha, float(np.min(-s_lin[neg] / ds_lin[neg])))
                neg = dz_lin < 0
                if np.any(neg):
                    alpha = min(alpha, float(np.min(-z_lin[neg] / dz_lin[neg])))
            return alpha

        # predictor
        E_aff = []
        for b in range(nblk):
            lam = scal[b][2]
            E_aff.append(np.diag(-(lam**2)))
        e_aff = -(lam_lin**2) if nl else np.zeros(0)
        aff = direction(E_aff, e_aff)
        alpha_aff = min(1.0, max_step(aff[1], aff[2], aff[3], aff[4]))

        gap_aff = 0.0
        for b in range(nblk):
            gap_aff += float(
                np.sum((s_psd[b] + alpha_aff * aff[1][b]) * (z_psd[b] + alpha_aff * aff[2][b]))
            )
        if nl:
            gap_aff += float((s_lin + alpha_aff * aff[3]) @ (z_lin + alpha_aff * aff[4]))
        sigma = min(1.0, max(0.0, (gap_aff / gap))) ** 3 if gap > 0 else 0.1

        # corrector
        E_cor = []
        for b in range(nblk):
            R, Rinv, lam, Uw = scal[b]
            Dsa = Rinv @ aff[1][b] @ Rinv.T
            Dza = R.T @ aff[2][b] @ R
            cross = 0.5 * (Dsa @ Dza + Dza @ Dsa)
            E_cor.append(sigma * mu * np.eye(blk_dim(psd[b])) - np.diag(lam**2) - cross)
        if nl:
            dsa = aff[3] / w_lin
            dza = aff[4] * w_lin
            e_cor = sigma * mu - lam_lin**2 - dsa * dza
        else:
            e_cor = np.zeros(0)
        dv, ds_psd, dz_psd, ds_lin, dz_lin = direction(E_cor, e_cor)

        alpha = min(1.0, 0.99 * max_step(ds_psd, dz_psd, ds_lin, dz_lin))
        if not np.isfinite(alpha) or alpha <= 1e-12:
            message = "step collapsed"
            break

        v = v + alpha * dv
        for b in range(nblk):
            s_psd[b] = 0.5 * ((s_psd[b] + alpha * ds_psd[b]) + (s_psd[b] + alpha * ds_psd[b]).T)
            z_psd[b] = 0.5 * ((z_psd[b] + alpha * dz_psd[b]) + (z_psd[b] + alpha * dz_psd[b]).T)
        if nl:
            s_lin = s_lin + alpha * ds_lin
            z_lin = z_lin + alpha * dz_lin

        progress = max(pres, dres, relgap)
        if progress > 0.9999 * last_progress:
            stall_count += 1
        else:
            stall_count = 0
        last_progress = progress
        if stall_count >= 30:
            message = "no progress over 30 iterations"
            break

    else:
        it = max_iter

    # final bookkeeping
    u_full = red.u0 + (N @ v if N is not None else v)
    rp_psd = [red.f0_eff[b] + map_linear_red(v, psd[b]) - s_psd[b] for b in range(nblk)]
    rp_lin = red.lin_const_eff + (Dred @ v if nl else np.zeros(0)) - s_lin
    rd = red.c_red - adjoint_red(z_psd, z_lin)
    gap = sum(float(np.sum(s_psd[b] * z_psd[b])) for b in range(nblk)) + float(s_lin @ z_lin)
    pobj = float(red.c_red @ v) + red.offset
    dobj = (
        red.offset
        - sum(float(np.sum(red.f0_eff[b] * z_psd[b])) for b in range(nblk))
        - float(red.lin_const_eff @ z_lin)
    )
    pres = max(
        [np.linalg.norm(r) / (1.0 + np.linalg.norm(red.f0_eff[b])) for b, r in enumerate(rp_psd)]
        + ([np.linalg.norm(rp_lin) / (1.0 + np.linalg.norm(red.lin_const_eff))] if nl else [])
        + [0.0]
    )
    dres = float(np.linalg.norm(rd)) / c_scale
    relgap = gap / max(1.0, abs(pobj))

    if status == "optimal" or (
        status == "stalled" and pres <= ACCEPT_TOL and dres <= ACCEPT_TOL and relgap <= ACCEPT_TOL
    ):
        status = "optimal"
    elif status == "stalled" and best is not None and best[0] <= ACCEPT_TOL:
        _, v_b, zp_b, zl_b, pres, dres, relgap, pobj, dobj = best
        u_full = red.u0 + (N @ v_b if N is not None else v_b)
        z_psd, z_lin = zp_b, zl_b
        status = "optimal"

    lin_dual_full = None
    if prog.lin_D is not None and prog.lin_D.shape[0] > 0:
        lin_dual_full = np.zeros(prog.lin_D.shape[0])
        if nl:
            lin_dual_full[red.kept_rows] = z_lin

    # reattach duals for projected-out constant PSD blocks as zeros
    duals: List[np.ndarray] = []
    live = 0
    for blk in prog.psd_blocks:
        if live < len(psd) and psd[live] is blk:
            duals.append(z_psd[live])
            live += 1
        else:
            duals.append(np.zeros((blk.dim, blk.dim)))

    if status in ("infeasible", "unbounded"):
        return ConicResult(
            status=status,
            u=None,
            objective=None,
            dual_objective=None,
            iterations=it,
            primal_residual=float(pres),
            dual_residual=float(dres),
            relative_gap=float(relgap),
            psd_duals=duals,
            lin_dual=lin_dual_full,
            message=message,
            infeas_radius=infeas_radius,
        )
    return ConicResult(
        status=status,
        u=u_full,
        objective=float(prog.c @ u_full) + prog.offset,
        dual_objective=float(dobj),
        iterations=it,
        primal_residual=float(pres),
        dual_residual=float(dres),
        relative_gap=float(relgap),
        psd_duals=duals,
        lin_dual=lin_dual_full,
        message=message,
    )


def blk_dim(blk: PSDBlock) -> int:
    return blk.dim


def kkt_report(prog: ConicProgram, result: ConicResult) -> Dict[str, float]:
    """Residuals of the optimality system at a solve result (for audits)."""
    assert result.u is not None
    u = result.u
    out: Dict[str, float] = {}
    worst_primal = 0.0
    if prog.eq_A is not None and prog.eq_A.shape[0] > 0:
        r = prog.eq_A @ u - prog.eq_b
        worst_primal = max(worst_primal, float(np.max(np.abs(r))) / (1.0 + float(np.max(np.abs(prog.eq_b)))))
    if prog.lin_D is not None and prog.lin_D.shape[0] > 0:
        vals = prog.lin_const + prog.lin_D @ u
        worst_primal = max(worst_primal, -float(vals.min()) / max(1.0, float(np.max(np.abs(prog.lin_const)))))
    for blk in prog.psd_blocks:
        w = np.linalg.eigvalsh(blk.map_point(u))
        worst_primal = max(worst_primal, -float(w.min()) / max(1.0, float(np.linalg.norm(blk.f0))))
    out["primal"] = worst_primal

    # dual feasibility: c - D^T zl - sum adj(Z) in rowspace of eq_A
    resid = prog.c.copy()
    comp = 0.0
    if result.lin_dual is not None and prog.lin_D is not None and prog.lin_D.shape[0] > 0:
        resid -= prog.lin_D.T @ result.lin_dual
        vals = prog.lin_const + prog.lin_D @ u
        comp = max(comp, float(np.max(np.abs(vals * result.lin_dual))) / max(1.0, abs(result.objective or 1.0)))
    for blk, Z in zip(prog.psd_blocks, result.psd_duals):
        resid -= blk.adjoint(Z, prog.n_vars)
        comp = max(
            comp,
            abs(float(np.sum(blk.map_point(u) * Z))) / max(1.0, abs(result.objective or 1.0)),
        )
    if prog.eq_A is not None and prog.eq_A.shape[0] > 0:
        A = prog.eq_A.toarray() if sp.issparse(prog.eq_A) else np.asarray(prog.eq_A)
        y, *_ = np.linalg.lstsq(A.T, resid, rcond=None)
        resid = resid - A.T @ y
    out["dual"] = float(np.linalg.norm(resid)) / (1.0 + float(np.linalg.norm(prog.c)))
    out["complementarity"] = comp
    return out
