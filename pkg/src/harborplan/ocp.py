"""Direct multiple-shooting transcription and a dense SQP solver.

The NLP is solved by sequential quadratic programming with a damped-BFGS
Hessian, an l1-merit backtracking line search, and a dual active-set QP
subproblem (Goldfarb-Idnani form) on the SPD BFGS model. Derivatives come
from the problem when available and from central finite differences
otherwise. The solver never raises on non-convergence; outcomes are
reported through SolveReport.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import vessel as vs

FEAS_TOL = 1e-6
OPT_TOL = 1e-5
MAX_ITER = 200
ELASTIC_BIG_M = 1e4


class DimensionMismatch(ValueError):
    """Raised when evaluator or guess dimensions disagree with the layout."""


# ---------------------------------------------------------------------------
# problem container
# ---------------------------------------------------------------------------

@dataclass
class NlpProblem:
    """Smooth NLP: min f(z) s.t. c_eq(z) = 0, c_in(z) <= 0, lb <= z <= ub."""

    n: int
    objective: callable
    eq_fun: callable
    ineq_fun: callable
    lb: np.ndarray
    ub: np.ndarray
    gradient: callable = None
    eq_jac: callable = None       # -> (m_eq, n) dense
    ineq_jac: callable = None     # -> (m_in, n) CSR or dense
    scaling: np.ndarray = None    # per-variable magnitudes (> 0)
    layout: object = None         # transcription layout, when applicable
    m_eq: int = None
    m_in: int = None

    def __post_init__(self):
        if self.scaling is None:
            self.scaling = np.ones(self.n)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        if self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise DimensionMismatch("bound vectors must have length n")
        if self.m_eq is None:
            self.m_eq = len(np.atleast_1d(self.eq_fun(np.zeros(self.n))))
        if self.m_in is None:
            self.m_in = len(np.atleast_1d(self.ineq_fun(np.zeros(self.n))))


@dataclass
class SolveReport:
    status: str                 # converged | max_iter | infeasible | line_search_failure
    iterations: int
    objective: float
    max_violation: float
    kkt_residual: float

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "iterations": self.iterations,
            "objective": self.objective,
            "max_violation": self.max_violation,
            "kkt_residual": self.kkt_residual,
        }


# ---------------------------------------------------------------------------
# QP subproblem: min 1/2 p'Bp + g'p  s.t.  Aeq p = beq, Ain p <= bin, lo<=p<=hi
# ---------------------------------------------------------------------------

class _QpInfeasible(Exception):
    pass


class _QpStalled(Exception):
    pass


class _DualActiveSetQp:
    """Dual active-set method on an SPD Hessian.

    Equality rows are installed first and never leave the working set;
    inequality rows and simple bounds enter by largest violation and leave
    when their multiplier would turn negative.
    """

    def __init__(self, B, g, A_eq, b_eq, A_in, b_in, lo, hi,
                 tol=1e-9, max_updates=None):
        self.n = len(g)
        self.g = g
        self.L = sla.cho_factor(B, lower=True, check_finite=False)
        self.A_eq = A_eq if A_eq is not None else np.zeros((0, self.n))
        self.b_eq = b_eq if b_eq is not None else np.zeros(0)
        self.A_in = A_in
        self.b_in = b_in if b_in is not None else np.zeros(0)
        self.lo = lo
        self.hi = hi
        self.tol = tol
        self.m_eq = self.A_eq.shape[0]
        self.m_in = 0 if A_in is None else A_in.shape[0]
        self.max_updates = max_updates or (5 * (self.m_eq + 200) + 50 * self.n)

        # equality block factorization
        if self.m_eq:
            self.Y_eq = sla.cho_solve(self.L, self.A_eq.T, check_finite=False)
            S_ee = self.A_eq @ self.Y_eq
            S_ee[np.diag_indices_from(S_ee)] += 1e-12 * max(1.0, S_ee.diagonal().max())
            self.F_ee = sla.cho_factor(S_ee, lower=True, check_finite=False)
        else:
            self.Y_eq = np.zeros((self.n, 0))
            self.F_ee = None

        # active inequality bookkeeping (ids: ('in', k) | ('lo', i) | ('hi', i))
        self.active = []
        self.N_i = np.zeros((self.n, 0))
        self.Z_i = np.zeros((self.n, 0))
        self.S_ei = np.zeros((self.m_eq, 0))
        self.S_ii = np.zeros((0, 0))
        self.nu_eq = np.zeros(self.m_eq)
        self.mu = np.zeros(0)

    # -- constraint access ---------------------------------------------------

    def _normal(self, cid):
        kind, k = cid
        if kind == "in":
            row = self.A_in[k]
            return row.toarray().ravel() if sp.issparse(row) else np.asarray(row).ravel()
        e = np.zeros(self.n)
        e[k] = -1.0 if kind == "lo" else 1.0
        return e

    def _rhs(self, cid):
        kind, k = cid
        if kind == "in":
            return self.b_in[k]
        return -self.lo[k] if kind == "lo" else self.hi[k]

    def _violations(self, x):
        out = []
        if self.m_in:
            r = self.A_in @ x - self.b_in
            idx = np.where(r > self.tol)[0]
            out.extend((float(r[k]), ("in", int(k))) for k in idx)
        lo_v = self.lo - x
        hi_v = x - self.hi
        out.extend((float(lo_v[i]), ("lo", int(i))) for i in np.where(lo_v > self.tol)[0])
        out.extend((float(hi_v[i]), ("hi", int(i))) for i in np.where(hi_v > self.tol)[0])
        return out

    # -- linear algebra -------------------------------------------------------

    def _refactor_mi(self):
        q = len(self.active)
        if q == 0:
            self.M_I = None
            return
        if self.m_eq:
            T = sla.cho_solve(self.F_ee, self.S_ei, check_finite=False)
            M = self.S_ii - self.S_ei.T @ T
        else:
            M = self.S_ii.copy()
        M[np.diag_indices_from(M)] += 1e-12 * max(1.0, abs(M.diagonal()).max())
        try:
            self.M_I = sla.cho_factor(M, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise _QpStalled("singular active-set system") from exc

    def _solve_S(self, w_e, w_i):
        q = len(self.active)
        if self.m_eq == 0 and q == 0:
            return np.zeros(0), np.zeros(0)
        if q == 0:
            return sla.cho_solve(self.F_ee, w_e, check_finite=False), np.zeros(0)
        if self.m_eq == 0:
            return np.zeros(0), sla.cho_solve(self.M_I, w_i, check_finite=False)
        t = sla.cho_solve(self.F_ee, w_e, check_finite=False)
        nu_i = sla.cho_solve(self.M_I, w_i - self.S_ei.T @ t, check_finite=False)
        nu_e = sla.cho_solve(self.F_ee, w_e - self.S_ei @ nu_i, check_finite=False)
        return nu_e, nu_i

    def _direction(self, a):
        """Primal/dual step quantities for candidate normal a."""
        u = sla.cho_solve(self.L, a, check_finite=False)
        w_e = self.A_eq @ u if self.m_eq else np.zeros(0)
        w_i = self.N_i.T @ u if len(self.active) else np.zeros(0)
        r_e, r_i = self._solve_S(w_e, w_i)
        z = u.copy()
        if self.m_eq:
            z -= self.Y_eq @ r_e
        if len(self.active):
            z -= self.Z_i @ r_i
        return u, z, r_e, r_i

    def _add_active(self, cid, a, u, mu_new):
        w_col = self.A_eq @ u if self.m_eq else np.zeros(0)
        s_col = self.N_i.T @ u if len(self.active) else np.zeros(0)
        self.N_i = np.column_stack([self.N_i, a])
        self.Z_i = np.column_stack([self.Z_i, u])
        self.S_ei = np.column_stack([self.S_ei, w_col]) if self.m_eq else self.S_ei
        q = len(self.active)
        S_new = np.zeros((q + 1, q + 1))
        S_new[:q, :q] = self.S_ii
        S_new[:q, q] = s_col
        S_new[q, :q] = s_col
        S_new[q, q] = float(a @ u)
        self.S_ii = S_new
        self.active.append(cid)
        self.mu = np.append(self.mu, mu_new)
        self._refactor_mi()

    def _drop_active(self, j):
        keep = [k for k in range(len(self.active)) if k != j]
        self.active = [self.active[k] for k in keep]
        self.N_i = self.N_i[:, keep]
        self.Z_i = self.Z_i[:, keep]
        if self.m_eq:
            self.S_ei = self.S_ei[:, keep]
        self.S_ii = self.S_ii[np.ix_(keep, keep)]
        self.mu = self.mu[keep]
        self._refactor_mi()

    # -- main loop ------------------------------------------------------------

    def solve(self):
        # equality-constrained start: B x + g + Aeq' nu = 0, Aeq x = beq
        x = -sla.cho_solve(self.L, self.g, check_finite=False)
        if self.m_eq:
            resid = self.A_eq @ x - self.b_eq
            nu = sla.cho_solve(self.F_ee, resid, check_finite=False)
            x = x - self.Y_eq @ nu
            self.nu_eq = nu
        self.M_I = None

        updates = 0
        while True:
            updates += 1
            if updates > self.max_updates:
                raise _QpStalled("active-set update budget exhausted")
            viol = self._violations(x)
            if not viol:
                return x, self.nu_eq, dict(zip(self.active, self.mu))
            viol.sort(key=lambda it: (-it[0], it[1]))
            _, cid = viol[0]
            a = self._normal(cid)
            b = self._rhs(cid)
            mu_k = 0.0
            while True:
                updates += 1
                if updates > self.max_updates:
                    raise _QpStalled("active-set update budget exhausted")
                v = float(a @ x) - b
                if v <= self.tol:
                    if mu_k > 0.0:
                        u = sla.cho_solve(self.L, a, check_finite=False)
                        self._add_active(cid, a, u, mu_k)
                    break
                u, z, r_e, r_i = self._direction(a)
                aTz = float(a @ z)
                dependent = aTz <= 1e-11 * max(1.0, float(a @ u))
                # blocking dual step among active inequalities
                t1 = math.inf
                j_block = -1
                for j in range(len(self.active)):
                    if r_i[j] > 1e-13 and self.mu[j] / r_i[j] < t1:
                        t1 = self.mu[j] / r_i[j]
                        j_block = j
                if dependent:
                    if j_block < 0:
                        raise _QpInfeasible(cid)
                    # dual-only step: swap the blocker out of the active set
                    self.nu_eq = self.nu_eq - t1 * r_e if self.m_eq else self.nu_eq
                    self.mu = self.mu - t1 * r_i
                    mu_k += t1
                    self._drop_active(j_block)
                    continue
                t2 = v / aTz
                if not math.isfinite(t2):
                    raise _QpStalled("non-finite primal step")
                if t1 < t2:
                    x = x - t1 * z
                    self.nu_eq = self.nu_eq - t1 * r_e if self.m_eq else self.nu_eq
                    self.mu = self.mu - t1 * r_i
                    mu_k += t1
                    self._drop_active(j_block)
                    continue
                x = x - t2 * z
                self.nu_eq = self.nu_eq - t2 * r_e if self.m_eq else self.nu_eq
                if len(self.active):
                    self.mu = self.mu - t2 * r_i
                self._add_active(cid, a, u, mu_k + t2)
                break


def solve_qp(B, g, A_eq, b_eq, A_in, b_in, lo, hi, tol=1e-9):
    """Solve the convex QP; returns (p, nu_eq, mu_map, qp) or raises _QpInfeasible."""
    qp = _DualActiveSetQp(B, g, A_eq, b_eq, A_in, b_in, lo, hi, tol=tol)
    p, nu, mu = qp.solve()
    return p, nu, mu, qp


# ---------------------------------------------------------------------------
# SQP driver
# ---------------------------------------------------------------------------

def _fd_gradient(fun, z, h=1e-7):
    n = len(z)
    g = np.zeros(n)
    for i in range(n):
        dz = np.zeros(n)
        dz[i] = h * max(1.0, abs(z[i]))
        g[i] = (fun(z + dz) - fun(z - dz)) / (2 * dz[i])
    return g


def _fd_jacobian(fun, z, m, h=1e-7):
    n = len(z)
    J = np.zeros((m, n))
    for i in range(n):
        dz = np.zeros(n)
        dz[i] = h * max(1.0, abs(z[i]))
        J[:, i] = (np.atleast_1d(fun(z + dz)) - np.atleast_1d(fun(z - dz))) / (2 * dz[i])
    return J


def _violation(c_eq, c_in):
    v = 0.0
    if c_eq.size:
        v = float(np.abs(c_eq).max())
    if c_in.size:
        v = max(v, float(np.maximum(c_in, 0.0).max()))
    return v


def _l1_infeas(c_eq, c_in):
    t = float(np.abs(c_eq).sum()) if c_eq.size else 0.0
    if c_in.size:
        t += float(np.maximum(c_in, 0.0).sum())
    return t


def solve(nlp: NlpProblem, initial_guess, max_iter: int = MAX_ITER,
          feas_tol: float = FEAS_TOL, opt_tol: float = OPT_TOL):
    """SQP with damped BFGS, dual active-set QP and l1-merit line search."""
    z0 = np.asarray(initial_guess, dtype=float)
    if z0.shape != (nlp.n,):
        raise DimensionMismatch(f"guess has length {z0.shape}, expected {nlp.n}")
    s = nlp.scaling
    z = np.clip(z0, nlp.lb, nlp.ub)

    def eval_all(zz):
        return (
            float(nlp.objective(zz)),
            np.atleast_1d(np.asarray(nlp.eq_fun(zz), dtype=float)),
            np.atleast_1d(np.asarray(nlp.ineq_fun(zz), dtype=float)),
        )

    def eval_grad(zz):
        g = nlp.gradient(zz) if nlp.gradient else _fd_gradient(nlp.objective, zz)
        return np.asarray(g, dtype=float)

    def eval_jacs(zz):
        Je = nlp.eq_jac(zz) if nlp.eq_jac else _fd_jacobian(nlp.eq_fun, zz, nlp.m_eq)
        Ji = nlp.ineq_jac(zz) if nlp.ineq_jac else _fd_jacobian(nlp.ineq_fun, zz, nlp.m_in)
        return np.asarray(Je, dtype=float), Ji

    f, c_eq, c_in = eval_all(z)
    if c_eq.shape != (nlp.m_eq,) or c_in.shape != (nlp.m_in,):
        raise DimensionMismatch("constraint evaluator dimensions disagree with declaration")

    def fresh_hessian(zz):
        if isinstance(nlp.layout, TranscriptionLayout):
            return _initial_hessian(nlp, zz)
        return np.eye(nlp.n)

    B = fresh_hessian(z)
    mu_pen = 1.0
    lam_eq = np.zeros(nlp.m_eq)
    mu_in = np.zeros(nlp.m_in)
    mu_lo = np.zeros(nlp.n)
    mu_hi = np.zeros(nlp.n)
    status = "max_iter"
    it = 0
    kkt = math.inf
    resets_left = 2
    restorations_left = 4
    merit_window = []

    grad = eval_grad(z)
    J_eq, J_in = eval_jacs(z)

    for it in range(1, max_iter + 1):
        # scaled quantities
        g_s = grad * s
        Je_s = J_eq * s[None, :] if J_eq.size else J_eq.reshape(nlp.m_eq, nlp.n)
        if sp.issparse(J_in):
            Ji_s = (J_in @ sp.diags(s)).tocsr()
        else:
            Ji_s = J_in * s[None, :] if J_in.size else np.zeros((nlp.m_in, nlp.n))
        lo_p = (nlp.lb - z) / s
        hi_p = (nlp.ub - z) / s

        # identity-metric equality factors: step polish, SOC and restoration
        eq_fac = None
        if nlp.m_eq:
            JJt = Je_s @ Je_s.T
            JJt[np.diag_indices_from(JJt)] += 1e-10 * max(1.0, JJt.diagonal().max())
            try:
                eq_fac = sla.cho_factor(JJt, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                eq_fac = None

        qp_obj = None
        try:
            p_s, nu_eq, mu_map, qp_obj = solve_qp(
                B, g_s, Je_s if nlp.m_eq else None, -c_eq if nlp.m_eq else None,
                Ji_s if nlp.m_in else None, -c_in if nlp.m_in else None, lo_p, hi_p)
        except _QpInfeasible:
            try:
                p_s, nu_eq, mu_map = _solve_elastic(
                    B, g_s, Je_s, -c_eq, Ji_s, -c_in, lo_p, hi_p, nlp)
            except (_QpInfeasible, _QpStalled, np.linalg.LinAlgError):
                status = "infeasible"
                break
        except (_QpStalled, np.linalg.LinAlgError):
            status = "line_search_failure"
            break

        # polish: BFGS ill-conditioning can leave the linearized equalities
        # unsolved; refine the step in the identity metric (kept inside the
        # bound box, and only when it actually reduces the residual)
        if eq_fac is not None:
            resid = Je_s @ p_s + c_eq
            r0 = float(np.abs(resid).max())
            if r0 > 1e-10:
                p_fix = np.clip(
                    p_s - Je_s.T @ sla.cho_solve(eq_fac, resid, check_finite=False),
                    lo_p, hi_p)
                if float(np.abs(Je_s @ p_fix + c_eq).max()) < 0.5 * r0:
                    p_s = p_fix

        lam_eq = nu_eq if nlp.m_eq else np.zeros(0)
        mu_in = np.zeros(nlp.m_in)
        mu_lo = np.zeros(nlp.n)
        mu_hi = np.zeros(nlp.n)
        for cid, val in mu_map.items():
            kind, k = cid
            if kind == "in":
                mu_in[k] = val
            elif kind == "lo":
                mu_lo[k] = val
            else:
                mu_hi[k] = val

        # merit parameter: dominate the multipliers, recover from inflation
        lam_norm = 0.0
        if nlp.m_eq:
            lam_norm = float(np.abs(lam_eq).max())
        if nlp.m_in and mu_in.size:
            lam_norm = max(lam_norm, float(np.abs(mu_in).max()))
        mu_target = 2.0 * lam_norm + 1.0
        mu_pen = max(mu_target, min(mu_pen, 10.0 * mu_target))

        infeas0 = _l1_infeas(c_eq, c_in)
        phi0 = f + mu_pen * infeas0
        merit_window.append(phi0)
        if len(merit_window) > 5:
            merit_window.pop(0)
        phi_ref = max(merit_window)   # nonmonotone (Grippo-style) reference
        d_dir = float(g_s @ p_s) - mu_pen * infeas0

        # backtracking line search on the l1 merit, with one second-order
        # correction attempt at the full step (Maratos guard)
        step_norm = float(np.abs(p_s).max())
        alpha = min(1.0, 200.0 / max(step_norm, 1e-12))
        ls_ok = False
        soc_tried = False
        for _ in range(30):
            z_try = np.clip(z + alpha * (s * p_s), nlp.lb, nlp.ub)
            f_t, ce_t, ci_t = eval_all(z_try)
            phi_t = f_t + mu_pen * _l1_infeas(ce_t, ci_t)
            if (math.isfinite(phi_t)
                    and phi_t <= phi_ref + 1e-4 * alpha * min(d_dir, 0.0) + 1e-12 * abs(phi_ref)):
                ls_ok = True
                break
            if alpha == 1.0 and not soc_tried and eq_fac is not None:
                soc_tried = True
                dp = -Je_s.T @ sla.cho_solve(eq_fac, ce_t, check_finite=False)
                z_soc = np.clip(z_try + s * dp, nlp.lb, nlp.ub)
                f_c, ce_c, ci_c = eval_all(z_soc)
                phi_c = f_c + mu_pen * _l1_infeas(ce_c, ci_c)
                if (math.isfinite(phi_c)
                        and phi_c <= phi_ref + 1e-4 * min(d_dir, 0.0) + 1e-12 * abs(phi_ref)):
                    z_try, f_t, ce_t, ci_t = z_soc, f_c, ce_c, ci_c
                    ls_ok = True
                    break
            alpha *= 0.5
        if not ls_ok:
            # feasible plateau: confirm optimality before giving up
            if _violation(c_eq, c_in) <= feas_tol:
                kkt = _kkt_residual(nlp, z, grad, J_eq, J_in, lam_eq, mu_in,
                                    mu_lo, mu_hi, s)
                if kkt <= opt_tol:
                    status = "converged"
                    break
            # un-stick: full Newton feasibility restoration, then a fresh
            # Hessian; give up only when both are exhausted
            if restorations_left > 0 and nlp.m_eq \
                    and _violation(c_eq, c_in) > feas_tol:
                restorations_left -= 1
                z_r, improved = _restore_feasibility(nlp, z, eval_all, eval_jacs,
                                                     s, feas_tol)
                if improved:
                    z = z_r
                    f, c_eq, c_in = eval_all(z)
                    grad = eval_grad(z)
                    J_eq, J_in = eval_jacs(z)
                    B = fresh_hessian(z)
                    merit_window.clear()
                    continue
            if resets_left > 0:
                resets_left -= 1
                B = fresh_hessian(z)
                merit_window.clear()
                continue
            status = "line_search_failure"
            break

        step_s = (z_try - z) / s
        grad_new = eval_grad(z_try)
        Je_new, Ji_new = eval_jacs(z_try)

        # damped BFGS on the scaled Lagrangian gradient
        def lag_grad(gr, Je, Ji):
            r = gr * s
            if nlp.m_eq:
                r = r + (Je * s[None, :]).T @ lam_eq
            if nlp.m_in and mu_in.any():
                if sp.issparse(Ji):
                    r = r + ((Ji @ sp.diags(s)).T @ mu_in)
                else:
                    r = r + (Ji * s[None, :]).T @ mu_in
            return r

        y = lag_grad(grad_new, Je_new, Ji_new) - lag_grad(grad, J_eq, J_in)
        sBs = float(step_s @ (B @ step_s))
        sy = float(step_s @ y)
        if sBs > 1e-16:
            if sy < 0.2 * sBs:
                theta = 0.8 * sBs / (sBs - sy)
                y = theta * y + (1.0 - theta) * (B @ step_s)
                sy = float(step_s @ y)
            if sy > 1e-14:
                Bs = B @ step_s
                B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy

        z, f, c_eq, c_in = z_try, f_t, ce_t, ci_t
        grad, J_eq, J_in = grad_new, Je_new, Ji_new

        viol = _violation(c_eq, c_in)
        kkt = _kkt_residual(nlp, z, grad, J_eq, J_in, lam_eq, mu_in, mu_lo, mu_hi, s)
        if viol <= feas_tol and kkt <= opt_tol:
            status = "converged"
            break
        if float(np.abs(step_s).max()) <= 1e-12 and viol <= feas_tol:
            status = "converged"
            break

    viol = _violation(c_eq, c_in)
    if status != "converged" and nlp.m_eq and feas_tol < viol <= 1e-3:
        # final polish: the iterate may be optimal but fractionally infeasible
        z_r, _ = _restore_feasibility(nlp, z, eval_all, eval_jacs, s, feas_tol)
        f_r, ce_r, ci_r = eval_all(z_r)
        if _violation(ce_r, ci_r) < viol:
            z, f, c_eq, c_in = z_r, f_r, ce_r, ci_r
            grad = eval_grad(z)
            J_eq, J_in = eval_jacs(z)
            viol = _violation(c_eq, c_in)
    kkt = _kkt_residual(nlp, z, grad, J_eq, J_in, lam_eq, mu_in, mu_lo, mu_hi, s)
    if status != "converged" and viol <= feas_tol and kkt <= opt_tol:
        status = "converged"
    report = SolveReport(status=status, iterations=it, objective=f,
                         max_violation=viol, kkt_residual=float(kkt))
    return z, report


def _restore_feasibility(nlp, z, eval_all, eval_jacs, s, feas_tol,
                         max_steps: int = 8):
    """Minimum-norm Newton iteration on the equality residual.

    The Jacobian is re-evaluated every step (quadratic local convergence);
    bounds are honored by clipping with a backtracked step length.
    """
    _, c_eq, c_in = eval_all(z)
    best = _violation(c_eq, c_in)
    start = best
    for _ in range(max_steps):
        if best <= 0.3 * feas_tol:
            break
        J_eq, _ = eval_jacs(z)
        Je_s = np.asarray(J_eq) * s[None, :]
        # move only variables strictly inside their bounds, so the Newton
        # step is not truncated by the clip below
        free = ((z > nlp.lb + 1e-9 * s) & (z < nlp.ub - 1e-9 * s))
        Jf = Je_s[:, free]
        JJt = Jf @ Jf.T
        JJt[np.diag_indices_from(JJt)] += 1e-10 * max(1.0, JJt.diagonal().max())
        try:
            fac = sla.cho_factor(JJt, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            break
        dp = np.zeros(nlp.n)
        dp[free] = -Jf.T @ sla.cho_solve(fac, c_eq, check_finite=False)
        beta = 1.0
        accepted = False
        for _ in range(12):
            z_try = np.clip(z + beta * (s * dp), nlp.lb, nlp.ub)
            _, ce_t, ci_t = eval_all(z_try)
            val = _violation(ce_t, ci_t)
            if math.isfinite(val) and val < best * (1.0 - 1e-3):
                z, c_eq, c_in, best = z_try, ce_t, ci_t, val
                accepted = True
                break
            beta *= 0.5
        if not accepted:
            break
    return z, best < max(start * 0.7, feas_tol)


def _kkt_residual(nlp, z, grad, J_eq, J_in, lam_eq, mu_in, mu_lo, mu_hi, s):
    r = grad * s
    if nlp.m_eq:
        r = r + (J_eq * s[None, :]).T @ lam_eq
    if nlp.m_in:
        if sp.issparse(J_in):
            r = r + (J_in @ sp.diags(s)).T @ mu_in
        else:
            r = r + (J_in * s[None, :]).T @ mu_in
    finite_lo = np.isfinite(nlp.lb)
    finite_hi = np.isfinite(nlp.ub)
    at_lo = finite_lo & (z <= np.where(finite_lo, nlp.lb, 0.0)
                         + 1e-12 * np.maximum(1.0, np.abs(np.where(finite_lo, nlp.lb, 0.0))))
    at_hi = finite_hi & (z >= np.where(finite_hi, nlp.ub, 0.0)
                         - 1e-12 * np.maximum(1.0, np.abs(np.where(finite_hi, nlp.ub, 0.0))))
    res = np.abs(r)
    res[at_lo] = np.maximum(0.0, -r[at_lo])
    res[at_hi & ~at_lo] = np.maximum(0.0, r[at_hi & ~at_lo])
    return float(res.max()) if res.size else 0.0


def _solve_elastic(B, g_s, Je_s, b_eq, Ji_s, b_in, lo_p, hi_p, nlp):
    """Big-M slack relaxation on the inequality rows (elastic mode)."""
    n = len(g_s)
    m_in = nlp.m_in
    if m_in == 0:
        raise _QpInfeasible(("eq", -1))
    if m_in > 4000:
        raise _QpStalled("elastic problem too large")
    Ji_d = Ji_s.toarray() if sp.issparse(Ji_s) else np.asarray(Ji_s)
    nx = n + m_in
    B_ext = np.zeros((nx, nx))
    B_ext[:n, :n] = B
    B_ext[np.arange(n, nx), np.arange(n, nx)] = 1e-6
    g_ext = np.concatenate([g_s, np.full(m_in, ELASTIC_BIG_M)])
    A_eq_ext = np.hstack([Je_s, np.zeros((Je_s.shape[0], m_in))]) if Je_s.size else None
    A_in_ext = np.hstack([Ji_d, -np.eye(m_in)])
    lo_ext = np.concatenate([lo_p, np.zeros(m_in)])
    hi_ext = np.concatenate([hi_p, np.full(m_in, np.inf)])
    p_ext, nu_eq, mu_map, _ = solve_qp(
        B_ext, g_ext, A_eq_ext, b_eq if A_eq_ext is not None else None,
        A_in_ext, b_in, lo_ext, hi_ext)
    mu_clean = {}
    for cid, val in mu_map.items():
        kind, k = cid
        if kind in ("lo", "hi") and k >= n:
            continue
        mu_clean[cid] = val
    return p_ext[:n], nu_eq, mu_clean


# ---------------------------------------------------------------------------
# multiple-shooting transcription
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DtSpec:
    """Interval-length specification: fixed value or free within bounds."""

    fixed: float = None
    lo: float = 0.2
    hi: float = 10.0
    init: float = 2.0

    @staticmethod
    def fixed_dt(value: float) -> "DtSpec":
        return DtSpec(fixed=float(value))

    @staticmethod
    def free_dt(lo: float = 0.2, hi: float = 10.0, init: float = 2.0) -> "DtSpec":
        return DtSpec(fixed=None, lo=lo, hi=hi, init=init)


@dataclass(frozen=True)
class RunningCost:
    """Position-invariant stage cost: const + w_n n'n + w_nd ndot'ndot + w_ad adot'adot."""

    constant: float = 1.0
    w_n: float = 0.1
    w_ndot: float = 100.0
    w_alphadot: float = 100.0

    def stage(self, X, U, nt):
        n = X[:, 6 + nt:6 + 2 * nt]
        ad = U[:, :nt]
        nd = U[:, nt:]
        return (self.constant + self.w_n * (n * n).sum(axis=1)
                + self.w_ndot * (nd * nd).sum(axis=1)
                + self.w_alphadot * (ad * ad).sum(axis=1))

    def stage_grad_x(self, X, nt):
        g = np.zeros_like(X)
        g[:, 6 + nt:6 + 2 * nt] = 2.0 * self.w_n * X[:, 6 + nt:6 + 2 * nt]
        return g

    def stage_grad_u(self, U, nt):
        g = np.empty_like(U)
        g[:, :nt] = 2.0 * self.w_alphadot * U[:, :nt]
        g[:, nt:] = 2.0 * self.w_ndot * U[:, nt:]
        return g


@dataclass(frozen=True)
class SlackSpec:
    """Per-interval scalar slack with box bounds and quadratic stage cost."""

    ub: float               # upper bound (lower is 0)
    cost_weight: float      # stage cost = cost_weight * eps^2 (times dt)
    init: float = None


class TranscriptionLayout:
    """Index bookkeeping for the multiple-shooting decision vector."""

    def __init__(self, N, d, m, has_dt, has_eps):
        self.N = N
        self.d = d
        self.m = m
        self.has_dt = has_dt
        self.has_eps = has_eps
        self.n_states = (N + 1) * d
        self.n_controls = N * m
        self.n_eps = N if has_eps else 0
        self.n = self.n_states + self.n_controls + self.n_eps + (1 if has_dt else 0)

    def state(self, i):
        return slice(i * self.d, (i + 1) * self.d)

    def control(self, i):
        return slice(self.n_states + i * self.m, self.n_states + (i + 1) * self.m)

    def eps(self, i):
        return self.n_states + self.n_controls + i

    @property
    def dt_index(self):
        return self.n - 1 if self.has_dt else None

    def states(self, z):
        return z[:self.n_states].reshape(self.N + 1, self.d)

    def controls(self, z):
        return z[self.n_states:self.n_states + self.n_controls].reshape(self.N, self.m)

    def eps_values(self, z):
        if not self.has_eps:
            return np.zeros(0)
        base = self.n_states + self.n_controls
        return z[base:base + self.N]

    def dt_value(self, z, fallback):
        return float(z[self.dt_index]) if self.has_dt else fallback

    def pack(self, X, U, eps=None, dt=None):
        parts = [np.asarray(X).ravel(), np.asarray(U).ravel()]
        if self.has_eps:
            parts.append(np.asarray(eps).ravel())
        if self.has_dt:
            parts.append(np.array([dt]))
        return np.concatenate(parts)


class Transcription:
    """Multiple-shooting NLP over the ship model; exposes an NlpProblem."""

    SUBSTEPS = 4

    def __init__(self, model, N, x_start, x_end, dt_spec: DtSpec,
                 running_cost: RunningCost = RunningCost(),
                 path_constraints=None, slack_spec: SlackSpec = None):
        if N < 2:
            raise ValueError("need at least 2 shooting intervals")
        self.model = model
        self.N = N
        self.d = model.state_dim
        self.m = model.control_dim
        self.nt = model.n_thrusters
        self.x_start = np.asarray(x_start, dtype=float)
        self.x_end = None if x_end is None else np.asarray(x_end, dtype=float)
        if self.x_start.shape != (self.d,):
            raise DimensionMismatch("x_start dimension mismatch")
        if self.x_end is not None and self.x_end.shape != (self.d,):
            raise DimensionMismatch("x_end dimension mismatch")
        self.dt_spec = dt_spec
        self.cost = running_cost
        self.path_constraints = list(path_constraints or [])
        self.slack_spec = slack_spec
        self.layout = TranscriptionLayout(
            N, self.d, self.m, has_dt=dt_spec.fixed is None,
            has_eps=slack_spec is not None)

        self.m_eq = self.N * self.d + self.d + (self.d if self.x_end is not None else 0)
        self.m_path = sum(pc.count(i) for pc in self.path_constraints for i in range(self.N))
        self.m_in = (self.N + 1) + self.m_path  # velocity-norm rows + path rows

        lb = np.full(self.layout.n, -np.inf)
        ub = np.full(self.layout.n, np.inf)
        nmax = model.n_max
        for i in range(self.N + 1):
            s_ = self.layout.state(i)
            lb[s_.start + 6 + self.nt:s_.start + 6 + 2 * self.nt] = -nmax
            ub[s_.start + 6 + self.nt:s_.start + 6 + 2 * self.nt] = nmax
        admax, ndmax = model.alpha_dot_max, model.n_dot_max
        for i in range(self.N):
            c_ = self.layout.control(i)
            lb[c_.start:c_.start + self.nt] = -admax
            ub[c_.start:c_.start + self.nt] = admax
            lb[c_.start + self.nt:c_.stop] = -ndmax
            ub[c_.start + self.nt:c_.stop] = ndmax
        if self.layout.has_eps:
            for i in range(self.N):
                lb[self.layout.eps(i)] = 0.0
                ub[self.layout.eps(i)] = self.slack_spec.ub
        if self.layout.has_dt:
            lb[self.layout.dt_index] = dt_spec.lo
            ub[self.layout.dt_index] = dt_spec.hi
        self.lb, self.ub = lb, ub

        scaling = np.ones(self.layout.n)
        state_scale = np.array([10.0, 10.0, 1.0, 1.0, 1.0, 0.05]
                               + [1.0] * self.nt + [1.0] * self.nt)
        for i in range(self.N + 1):
            scaling[self.layout.state(i)] = state_scale
        ctrl_scale = np.concatenate([admax, ndmax])
        for i in range(self.N):
            scaling[self.layout.control(i)] = ctrl_scale
        if self.layout.has_eps:
            for i in range(self.N):
                scaling[self.layout.eps(i)] = max(1.0, self.slack_spec.ub / 4.0)
        if self.layout.has_dt:
            scaling[self.layout.dt_index] = 1.0
        self.scaling = scaling

        self._ineq_structure()

    # -- evaluators -----------------------------------------------------------

    def _dt(self, z):
        return self.layout.dt_value(z, self.dt_spec.fixed)

    def objective(self, z):
        lay = self.layout
        X = lay.states(z)
        U = lay.controls(z)
        dt = self._dt(z)
        stage = self.cost.stage(X[:-1], U, self.nt)
        total = float(stage.sum())
        if lay.has_eps:
            eps = lay.eps_values(z)
            total += float(self.slack_spec.cost_weight * (eps * eps).sum())
        return total * dt

    def gradient(self, z):
        lay = self.layout
        X = lay.states(z)
        U = lay.controls(z)
        dt = self._dt(z)
        g = np.zeros(lay.n)
        gx = self.cost.stage_grad_x(X[:-1], self.nt) * dt
        gu = self.cost.stage_grad_u(U, self.nt) * dt
        g[:lay.n_states - lay.d] = gx.ravel()
        g[lay.n_states:lay.n_states + lay.n_controls] = gu.ravel()
        stage = self.cost.stage(X[:-1], U, self.nt)
        total_rate = float(stage.sum())
        if lay.has_eps:
            eps = lay.eps_values(z)
            base = lay.n_states + lay.n_controls
            g[base:base + lay.N] = 2.0 * self.slack_spec.cost_weight * eps * dt
            total_rate += float(self.slack_spec.cost_weight * (eps * eps).sum())
        if lay.has_dt:
            g[lay.dt_index] = total_rate
        return g

    def eq_fun(self, z):
        lay = self.layout
        X = lay.states(z)
        U = lay.controls(z)
        dt = self._dt(z)
        X_next = vs.rk4_step_batch(self.model, X[:-1], U, dt, self.SUBSTEPS)
        defects = X[1:] - X_next
        parts = [defects.ravel(), X[0] - self.x_start]
        if self.x_end is not None:
            parts.append(X[self.N] - self.x_end)
        return np.concatenate(parts)

    def eq_jac(self, z):
        lay = self.layout
        X = lay.states(z)
        U = lay.controls(z)
        dt = self._dt(z)
        _, Phi, Psi, theta = vs.rk4_step_with_sensitivity(
            self.model, X[:-1], U, dt, self.SUBSTEPS)
        J = np.zeros((self.m_eq, lay.n))
        d, m, N = self.d, self.m, self.N
        for i in range(N):
            r = slice(i * d, (i + 1) * d)
            J[r, lay.state(i)] = -Phi[i]
            J[r, lay.state(i + 1)] = np.eye(d)
            J[r, lay.control(i)] = -Psi[i]
            if lay.has_dt:
                J[r, lay.dt_index] = -theta[i]
        row = N * d
        J[row:row + d, lay.state(0)] = np.eye(d)
        if self.x_end is not None:
            J[row + d:row + 2 * d, lay.state(N)] = np.eye(d)
        return J

    def _ineq_structure(self):
        """Static sparsity of the inequality Jacobian (CSR with updated data)."""
        lay = self.layout
        rows, cols = [], []
        # velocity-norm rows: u^2 + v^2 - v_max^2 <= 0 at every node
        for i in range(self.N + 1):
            s_ = lay.state(i)
            rows += [i, i]
            cols += [s_.start + 3, s_.start + 4]
        r = self.N + 1
        self._pc_rows = []
        for pc in self.path_constraints:
            for i in range(self.N):
                cnt = pc.count(i)
                if cnt == 0:
                    continue
                s_ = lay.state(i)
                for k in range(cnt):
                    rr = r + k
                    rows += [rr, rr, rr]
                    cols += [s_.start, s_.start + 1, s_.start + 2]
                    if lay.has_eps:
                        rows.append(rr)
                        cols.append(lay.eps(i))
                self._pc_rows.append((pc, i, r))
                r += cnt
        self._ineq_rows = np.array(rows, dtype=np.int64)
        self._ineq_cols = np.array(cols, dtype=np.int64)

    def ineq_fun(self, z):
        lay = self.layout
        X = lay.states(z)
        out = np.empty(self.m_in)
        out[:self.N + 1] = X[:, 3] ** 2 + X[:, 4] ** 2 - self.model.v_max ** 2
        eps = lay.eps_values(z) if lay.has_eps else None
        for pc, i, r in self._pc_rows:
            e = eps[i] if eps is not None else None
            out[r:r + pc.count(i)] = pc.value(i, X[i], e)
        return out

    def ineq_jac(self, z):
        lay = self.layout
        X = lay.states(z)
        data = []
        for i in range(self.N + 1):
            data += [2.0 * X[i, 3], 2.0 * X[i, 4]]
        eps = lay.eps_values(z) if lay.has_eps else None
        for pc, i, r in self._pc_rows:
            e = eps[i] if eps is not None else None
            dpos, dpsi, deps = pc.jacobian(i, X[i], e)
            for k in range(pc.count(i)):
                data += [dpos[k, 0], dpos[k, 1], dpsi[k]]
                if lay.has_eps:
                    data.append(deps[k])
        mat = sp.csr_matrix(
            (np.asarray(data), (self._ineq_rows, self._ineq_cols)),
            shape=(self.m_in, lay.n))
        return mat

    def problem(self) -> NlpProblem:
        self.layout._owner = self
        return NlpProblem(
            n=self.layout.n, objective=self.objective, gradient=self.gradient,
            eq_fun=self.eq_fun, eq_jac=self.eq_jac,
            ineq_fun=self.ineq_fun, ineq_jac=self.ineq_jac,
            lb=self.lb, ub=self.ub, scaling=self.scaling, layout=self.layout,
            m_eq=self.m_eq, m_in=self.m_in)

    def initial_guess(self, X, U, eps=None, dt=None):
        lay = self.layout
        if eps is None and lay.has_eps:
            eps = np.full(self.N, self.slack_spec.init
                          if self.slack_spec.init is not None else self.slack_spec.ub)
        if dt is None:
            dt = self.dt_spec.init if lay.has_dt else self.dt_spec.fixed
        return lay.pack(X, U, eps, dt if lay.has_dt else None)


def _initial_hessian(nlp: NlpProblem, z):
    """Diagonal BFGS seed from the exact objective curvature, in scaled space.

    The stage cost is a separable quadratic, so its second derivatives are
    known in closed form; a small floor keeps the seed positive definite on
    the curvature-free variables (positions, velocities, headings).
    """
    tr = nlp.layout._owner
    s = nlp.scaling
    lay = nlp.layout
    dt = lay.dt_value(z, tr.dt_spec.fixed) if lay.has_dt else tr.dt_spec.fixed
    dt = float(dt) if dt else 2.0
    diag = np.full(nlp.n, 1e-2)
    nt = tr.nt
    cost = tr.cost
    for i in range(lay.N):
        srow = lay.state(i)
        diag[srow.start + 6 + nt:srow.start + 6 + 2 * nt] = 2.0 * cost.w_n * dt
        c = lay.control(i)
        diag[c.start:c.start + nt] = 2.0 * cost.w_alphadot * dt
        diag[c.start + nt:c.stop] = 2.0 * cost.w_ndot * dt
    if lay.has_eps:
        for i in range(lay.N):
            diag[lay.eps(i)] = max(1e-2, 2.0 * tr.slack_spec.cost_weight * dt)
    if lay.has_dt:
        diag[lay.dt_index] = 1.0
    diag = np.maximum(diag * s * s, 1e-3)
    return np.diag(diag)


def transcribe(model, N, boundary, dt_spec: DtSpec,
               running_cost: RunningCost = RunningCost(),
               path_constraints=None, slack_spec: SlackSpec = None) -> Transcription:
    """Build the multiple-shooting transcription for the given boundary pair."""
    x_start, x_end = boundary
    return Transcription(model, N, x_start, x_end, dt_spec, running_cost,
                         path_constraints, slack_spec)
