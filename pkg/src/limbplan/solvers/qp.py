"""Convex QP solver based on operator splitting.

Solves  min 1/2 x'Px + q'x  s.t.  lo <= Ax <= hi,  lb <= x <= ub
with a scaled ADMM iteration over a quasi-definite KKT system.  The KKT
factorization depends only on (P, A), so bound updates (as done by the
branch-and-bound driver) re-use it.  Primal infeasibility is detected via a
divergence certificate on the dual iterates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = ["QpProblem", "SolveReport", "QpCore", "solve_qp"]

_MIN_SCALE = 1e-4
_MAX_SCALE = 1e4


@dataclass
class SolveReport:
    """Outcome of one solver call."""

    status: str               # optimal | infeasible | iteration-limit | time-limit
    objective: float
    x: np.ndarray | None
    iterations: int = 0
    wall_time: float = 0.0
    y: np.ndarray | None = None   # row duals (bounds rows appended last)
    message: str = ""
    gap: float | None = None      # MIQP: |incumbent - best bound|
    nodes: int | None = None      # MIQP: processed node count

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


@dataclass
class QpProblem:
    """Quadratic program with ranged rows and variable bounds."""

    P: sp.spmatrix
    q: np.ndarray
    A: sp.spmatrix
    lo: np.ndarray
    hi: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    const: float = 0.0

    @classmethod
    def from_parts(cls, P, q, A_eq=None, b_eq=None, A_in=None, b_in=None,
                   lb=None, ub=None, const=0.0) -> "QpProblem":
        n = len(q)
        blocks, lo, hi = [], [], []
        if A_eq is not None and A_eq.shape[0]:
            blocks.append(sp.csr_matrix(A_eq))
            lo.append(np.asarray(b_eq, dtype=float))
            hi.append(np.asarray(b_eq, dtype=float))
        if A_in is not None and A_in.shape[0]:
            blocks.append(sp.csr_matrix(A_in))
            lo.append(np.full(A_in.shape[0], -np.inf))
            hi.append(np.asarray(b_in, dtype=float))
        A = sp.vstack(blocks, format="csr") if blocks else sp.csr_matrix((0, n))
        lo = np.concatenate(lo) if lo else np.zeros(0)
        hi = np.concatenate(hi) if hi else np.zeros(0)
        lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
        ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
        return cls(sp.csc_matrix(P), np.asarray(q, dtype=float), A, lo, hi, lb, ub, const)

    @property
    def n(self) -> int:
        return len(self.q)

    def objective_value(self, x: np.ndarray) -> float:
        return 0.5 * float(x @ (self.P @ x)) + float(self.q @ x) + self.const

    def check_psd(self, floor: float = -1e-9) -> bool:
        """Eigenvalue floor of the symmetrized objective matrix."""
        Ps = sp.csc_matrix(0.5 * (self.P + self.P.T))
        off = Ps - sp.diags(Ps.diagonal())
        if off.nnz == 0:
            return bool(np.min(Ps.diagonal(), initial=0.0) >= floor)
        if self.n <= 400:
            w = np.linalg.eigvalsh(Ps.toarray())
            return bool(w.min() >= floor)
        try:
            w = spla.eigsh(Ps, k=1, which="SA", return_eigenvectors=False, maxiter=2000)
            return bool(w[0] >= floor)
        except Exception:
            # Gershgorin fallback: conservative but cheap
            radii = np.abs(off).sum(axis=1).A.ravel()
            return bool(np.min(Ps.diagonal() - radii) >= floor)


def _ruiz_equilibrate(P, q, A, iters=10):
    """Modified Ruiz scaling of the stacked [P; A] system plus cost scaling."""
    n, m = P.shape[0], A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    Ps, qs, As = P.copy(), q.copy(), A.copy()
    for _ in range(iters):
        cp = np.abs(Ps).max(axis=0).toarray().ravel() if Ps.nnz else np.zeros(n)
        ca = np.abs(As).max(axis=0).toarray().ravel() if As.nnz else np.zeros(n)
        col = np.maximum(cp, ca)
        col[col == 0] = 1.0
        dd = np.clip(1.0 / np.sqrt(col), _MIN_SCALE, _MAX_SCALE)
        row = np.abs(As).max(axis=1).toarray().ravel() if As.nnz else np.zeros(m)
        row[row == 0] = 1.0
        de = np.clip(1.0 / np.sqrt(row), _MIN_SCALE, _MAX_SCALE)
        Dd = sp.diags(dd)
        Ps = (Dd @ Ps @ Dd).tocsc()
        qs = dd * qs
        As = (sp.diags(de) @ As @ Dd).tocsc()
        d *= dd
        e *= de
        colnorm = np.abs(Ps).max(axis=0).toarray().ravel() if Ps.nnz else np.zeros(n)
        denom = max(np.mean(colnorm), np.max(np.abs(qs), initial=0.0), 1e-8)
        gamma = np.clip(1.0 / denom, _MIN_SCALE, _MAX_SCALE)
        Ps = Ps * gamma
        qs = qs * gamma
        c *= gamma
    return Ps.tocsc(), qs, As.tocsc(), d, e, c


class QpCore:
    """Reusable solver workspace: factor once, solve under changing bounds."""

    def __init__(self, prob: QpProblem, sigma: float = 1e-6, rho: float = 0.1,
                 alpha: float = 1.6, scaling_iters: int = 10, adaptive_rho: bool = True):
        self.prob = prob
        n = prob.n
        eye = sp.identity(n, format="csr")
        self.A_full = sp.vstack([prob.A, eye], format="csc")
        self.m = self.A_full.shape[0]
        self.m_rows = prob.A.shape[0]
        self.sigma = sigma
        self.alpha = alpha
        self.rho0 = rho
        self.adaptive_rho = adaptive_rho

        self.Ps, self.qs, self.As, self.d, self.e, self.c = _ruiz_equilibrate(
            sp.csc_matrix(prob.P), prob.q, self.A_full, scaling_iters
        )
        self.set_bounds(np.concatenate([prob.lo, prob.lb]),
                        np.concatenate([prob.hi, prob.ub]))
        self._rho_vec(rho)
        self._factor()
        self.x = np.zeros(n)
        self.z = np.zeros(self.m)
        self.y = np.zeros(self.m)

    def set_bounds(self, lo: np.ndarray, hi: np.ndarray) -> None:
        if np.any(lo > hi + 1e-12):
            raise ValueError("crossing bounds (lo > hi)")
        self.lo_u = lo
        self.hi_u = hi
        self.lo_s = np.where(np.isfinite(lo), self.e * lo, lo)
        self.hi_s = np.where(np.isfinite(hi), self.e * hi, hi)

    def update_variable_bounds(self, lb: np.ndarray, ub: np.ndarray) -> None:
        lo = np.concatenate([self.prob.lo, lb])
        hi = np.concatenate([self.prob.hi, ub])
        self.set_bounds(lo, hi)
        eq = self._eq_mask()
        if np.any(eq != self.eq_mask):
            self._rho_vec(self.rho)
            self._factor()

    def _eq_mask(self):
        return np.isfinite(self.lo_u) & np.isfinite(self.hi_u) & (
            (self.hi_u - self.lo_u) < 1e-12)

    def _rho_vec(self, rho: float) -> None:
        self.rho = rho
        self.eq_mask = self._eq_mask()
        loose = ~np.isfinite(self.lo_u) & ~np.isfinite(self.hi_u)
        rv = np.full(self.m, rho)
        rv[self.eq_mask] = rho * 1e3
        rv[loose] = rho * 1e-6
        self.rho_vec = rv

    def _factor(self) -> None:
        n = self.Ps.shape[0]
        kkt = sp.bmat(
            [
                [self.Ps + self.sigma * sp.identity(n), self.As.T],
                [self.As, -sp.diags(1.0 / self.rho_vec)],
            ],
            format="csc",
        )
        self._lu = spla.splu(kkt)

    # -- main iteration ------------------------------------------------------

    def solve(self, x0=None, y0=None, tol: float = 1e-6, max_iter: int = 20000,
              check_every: int = 25, polish: bool = True,
              time_limit: float | None = None) -> SolveReport:
        """Iterate to moderate accuracy, then recover an exact KKT point by
        polishing on the detected active set; fall back to plain iteration
        when polishing cannot be verified."""
        start = time.perf_counter()
        prob = self.prob
        n = prob.n
        if x0 is not None:
            self.x = x0 / self.d
            self.z = self.As @ self.x
            self.y = (self.c / self.e) * y0 if y0 is not None else np.zeros(self.m)
        x, z, y = self.x, self.z, self.y
        rho_updates = 0
        status, msg = "iteration-limit", ""
        warm = x0 is not None
        polish_at = 50 if warm else 250
        polish_attempts = 0
        it = 0
        for it in range(1, max_iter + 1):
            rhs = np.concatenate([self.sigma * x - self.qs, z - y / self.rho_vec])
            sol = self._lu.solve(rhs)
            x_t = sol[:n]
            nu = sol[n:]
            z_t = z + (nu - y) / self.rho_vec
            x_new = self.alpha * x_t + (1 - self.alpha) * x
            z_pre = self.alpha * z_t + (1 - self.alpha) * z
            z_new = np.clip(z_pre + y / self.rho_vec, self.lo_s, self.hi_s)
            y_new = y + self.rho_vec * (z_pre - z_new)

            if it % check_every == 0 or it == max_iter:
                xu = self.d * x_new
                zu = z_new / self.e
                yu = (self.e / self.c) * y_new
                r_prim, r_dual = self._residuals(xu, zu, yu)
                if r_prim <= tol and r_dual <= tol:
                    status = "optimal"
                    x, z, y = x_new, z_new, y_new
                    break
                if (polish and it >= polish_at and polish_attempts < 25
                        and max(r_prim, r_dual) <= 1e-2):
                    polish_attempts += 1
                    polish_at = it + 250
                    xp, yp = self._polish(xu, yu, tol)
                    if xp is not None:
                        self.x, self.z, self.y = x_new, z_new, y_new
                        return SolveReport(
                            status="optimal", objective=prob.objective_value(xp),
                            x=xp, iterations=it,
                            wall_time=time.perf_counter() - start, y=yp)
                dy = y_new - y
                if self._primal_infeasible(dy, max(tol, 1e-8)):
                    status = "infeasible"
                    msg = "primal infeasibility certificate found"
                    x, z, y = x_new, z_new, y_new
                    break
                dx = x_new - x
                if self._dual_infeasible(dx, max(tol, 1e-8)):
                    status = "infeasible"
                    msg = "dual infeasibility certificate (objective unbounded below)"
                    x, z, y = x_new, z_new, y_new
                    break
                if time_limit is not None and time.perf_counter() - start > time_limit:
                    status = "time-limit"
                    x, z, y = x_new, z_new, y_new
                    break
                # residual balancing: rescale rho when primal/dual progress diverges
                if self.adaptive_rho and rho_updates < 50 and it % 50 == 0:
                    ratio = np.sqrt(r_prim / max(r_dual, 1e-14))
                    if ratio > 2.0 or ratio < 0.5:
                        self._rho_vec(float(np.clip(self.rho * ratio, 1e-6, 1e6)))
                        self._factor()
                        rho_updates += 1
            x, z, y = x_new, z_new, y_new

        self.x, self.z, self.y = x, z, y
        xu = self.d * x
        yu = (self.e / self.c) * y
        if status == "optimal" and polish:
            xp, yp = self._polish(xu, yu, tol)
            if xp is not None:
                xu, yu = xp, yp
        return SolveReport(
            status=status,
            objective=prob.objective_value(xu) if status != "infeasible" else np.inf,
            x=xu,
            iterations=it,
            wall_time=time.perf_counter() - start,
            y=yu,
            message=msg,
        )

    def _residuals(self, xu, zu, yu):
        """Worst per-row relative primal and per-column dual residuals.

        Per-row scaling matters: with a global denominator the big-M rows
        would mask real violations elsewhere."""
        ax = self.A_full @ xu
        px = self.prob.P @ xu
        aty = self.A_full.T @ yu
        den_rows = np.maximum(np.maximum(np.abs(ax), np.abs(zu)), 1.0)
        r_prim = np.max(np.abs(ax - zu) / den_rows, initial=0.0)
        den_cols = np.maximum(np.maximum(np.abs(px), np.abs(aty)),
                              np.maximum(np.abs(self.prob.q), 1.0))
        r_dual = np.max(np.abs(px + self.prob.q + aty) / den_cols, initial=0.0)
        return r_prim, r_dual

    def _primal_infeasible(self, dy_s: np.ndarray, tol: float) -> bool:
        dy = (self.e / self.c) * dy_s
        norm = np.max(np.abs(dy), initial=0.0)
        if norm < 1e-12:
            return False
        dy = dy / norm
        if np.max(np.abs(self.A_full.T @ dy), initial=0.0) > tol:
            return False
        pos = np.maximum(dy, 0.0)
        neg = np.minimum(dy, 0.0)
        if np.any(pos[~np.isfinite(self.hi_u)] > tol) or np.any(-neg[~np.isfinite(self.lo_u)] > tol):
            return False
        support = np.where(np.isfinite(self.hi_u), self.hi_u, 0.0) @ pos + np.where(
            np.isfinite(self.lo_u), self.lo_u, 0.0) @ neg
        return support < -tol

    def _dual_infeasible(self, dx_s: np.ndarray, tol: float) -> bool:
        dx = self.d * dx_s
        norm = np.max(np.abs(dx), initial=0.0)
        if norm < 1e-12:
            return False
        dx = dx / norm
        if self.prob.q @ dx > -tol:
            return False
        if np.max(np.abs(self.prob.P @ dx), initial=0.0) > tol:
            return False
        adx = self.A_full @ dx
        up = np.isfinite(self.hi_u)
        dn = np.isfinite(self.lo_u)
        return not (np.any(adx[up] > tol) or np.any(adx[dn] < -tol))

    def _polish(self, x: np.ndarray, y: np.ndarray, tol: float):
        """Active-set refinement: solve the equality KKT system on the
        detected active set, add violated rows, drop wrong-sign
        multipliers, and return the point once it verifies as KKT."""
        prob = self.prob
        n = prob.n
        ax = self.A_full @ x
        gap = 1e-6 * np.maximum(1.0, np.abs(ax))
        eq = self.eq_mask
        act_lo = np.isfinite(self.lo_u) & ((y < -100 * tol) | (ax <= self.lo_u + gap)) & ~eq
        act_hi = np.isfinite(self.hi_u) & ((y > 100 * tol) | (ax >= self.hi_u - gap)) & ~eq
        act_lo &= ~act_hi  # a row cannot sit at both bounds unless equality
        delta = 1e-9
        for _ in range(25):
            act = act_lo | act_hi | eq
            A_act = self.A_full[act]
            k = A_act.shape[0]
            kkt = sp.bmat(
                [
                    [prob.P + delta * sp.identity(n), A_act.T],
                    [A_act, -delta * sp.identity(k) if k else None],
                ],
                format="csc",
            )
            try:
                lu = spla.splu(kkt)
            except RuntimeError:
                return None, None
            rhs_full = np.where(act_hi, self.hi_u, self.lo_u)
            rhs_full[eq] = self.hi_u[eq]
            rhs = np.concatenate([-prob.q, rhs_full[act]])
            sol = lu.solve(rhs)
            if not np.all(np.isfinite(sol)):
                return None, None
            for _r in range(3):  # refinement against the regularization bias
                resid = rhs - np.concatenate(
                    [prob.P @ sol[:n] + A_act.T @ sol[n:], A_act @ sol[:n]]
                )
                sol = sol + lu.solve(resid)
            xp = sol[:n]
            yp = np.zeros(self.m)
            yp[act] = sol[n:]
            axp = self.A_full @ xp
            den = np.maximum(1.0, np.abs(axp))
            viol_hi = np.isfinite(self.hi_u) & ~act & ((axp - self.hi_u) / den > 0.1 * tol)
            viol_lo = np.isfinite(self.lo_u) & ~act & ((self.lo_u - axp) / den > 0.1 * tol)
            if viol_hi.any() or viol_lo.any():
                act_hi |= viol_hi
                act_lo |= viol_lo & ~act_hi
                continue
            wrong_hi = act_hi & (yp < -1e-9)
            wrong_lo = act_lo & (yp > 1e-9)
            if wrong_hi.any() or wrong_lo.any():
                act_hi &= ~wrong_hi
                act_lo &= ~wrong_lo
                continue
            yp[act_lo] = np.minimum(yp[act_lo], 0.0)
            yp[act_hi] = np.maximum(yp[act_hi], 0.0)
            if self._verify_kkt(xp, yp, max(tol, 1e-6)):
                return xp, yp
            return None, None
        return None, None

    def _verify_kkt(self, x, y, tol) -> bool:
        """Relative primal feasibility, stationarity, and complementarity."""
        prob = self.prob
        ax = self.A_full @ x
        den = np.maximum(1.0, np.abs(ax))
        over = np.where(np.isfinite(self.hi_u), ax - self.hi_u, -np.inf)
        under = np.where(np.isfinite(self.lo_u), self.lo_u - ax, -np.inf)
        if np.max(over / den, initial=0.0) > tol or np.max(under / den, initial=0.0) > tol:
            return False
        px = prob.P @ x
        aty = self.A_full.T @ y
        den_c = np.maximum(np.maximum(np.abs(px), np.abs(aty)),
                           np.maximum(np.abs(prob.q), 1.0))
        if np.max(np.abs(px + prob.q + aty) / den_c, initial=0.0) > tol:
            return False
        # complementary slackness for inequality rows
        ineq = ~self.eq_mask
        pos = ineq & (y > tol)
        neg = ineq & (y < -tol)
        slack_hi = np.abs(np.where(np.isfinite(self.hi_u), ax - self.hi_u, np.inf))
        slack_lo = np.abs(np.where(np.isfinite(self.lo_u), ax - self.lo_u, np.inf))
        if np.any(slack_hi[pos] / den[pos] > 1e-6) or np.any(slack_lo[neg] / den[neg] > 1e-6):
            return False
        return True


def solve_qp(prob: QpProblem, tol: float = 1e-6, max_iter: int = 20000,
             x0=None, y0=None, polish: bool = True,
             time_limit: float | None = None) -> SolveReport:
    """One-shot convex QP solve; see QpCore for reusable workspaces."""
    core = QpCore(prob)
    return core.solve(x0=x0, y0=y0, tol=tol, max_iter=max_iter, polish=polish,
                      time_limit=time_limit)
