"""Augmented-Lagrangian solver for the nonlinear projection step.

Outer loop: classic method of multipliers with a safeguarded penalty
schedule.  Inner loop: bound-constrained L-BFGS-B on the smooth augmented
Lagrangian, with analytic sparse Jacobians supplied by the residual set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, minimize

from .qp import SolveReport

__all__ = ["solve_nlp", "check_gradients", "GradientReport"]


def _quad_value(objective, x):
    return 0.5 * float(x @ (objective.P @ x)) + float(objective.q @ x) + objective.const


def _quad_grad(objective, x):
    return objective.P @ x + objective.q


def solve_nlp(residuals, objective, x0: np.ndarray, tol: float = 1e-6,
              max_outer: int = 30, inner_maxiter: int = 400,
              rho0: float = 10.0, verbose: bool = False) -> SolveReport:
    """Minimize a convex quadratic subject to g(x)=0, h(x)<=0, lb<=x<=ub.

    ``residuals`` supplies eval_eq/jac_eq, eval_ineq/jac_ineq and bounds.
    Returns iteration-limit with the best iterate if progress stalls for
    five consecutive outer iterations.
    """
    start = time.perf_counter()
    x = np.clip(np.asarray(x0, dtype=float), residuals.lb, residuals.ub)
    if x.shape != (residuals.n,):
        raise ValueError(f"x0 has dimension {x.shape}, expected ({residuals.n},)")
    m_eq = residuals.n_eq
    m_in = residuals.n_ineq
    lam = np.zeros(m_eq)
    mu = np.zeros(m_in)
    rho = rho0
    bounds = Bounds(residuals.lb, residuals.ub)
    scale = 1.0 + np.max(np.abs(objective.q), initial=0.0)

    def al_value_grad(xv):
        g = residuals.eval_eq(xv)
        h = residuals.eval_ineq(xv)
        jg = residuals.jac_eq(xv)
        jh = residuals.jac_ineq(xv)
        shifted = np.maximum(0.0, mu + rho * h)
        val = (
            _quad_value(objective, xv)
            + lam @ g
            + 0.5 * rho * float(g @ g)
            + float(shifted @ shifted - mu @ mu) / (2.0 * rho)
        )
        grad = _quad_grad(objective, xv) + jg.T @ (lam + rho * g) + jh.T @ shifted
        return val, grad

    def violation(g, h):
        vg = np.max(np.abs(g), initial=0.0)
        vh = np.max(h, initial=0.0)
        return max(vg, vh)

    best_x = x.copy()
    best_viol = np.inf
    stall = 0
    eta = 1e-2
    gtol = 1e-3 * scale
    status = "iteration-limit"
    outer = 0
    for outer in range(1, max_outer + 1):
        res = minimize(
            al_value_grad, x, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": inner_maxiter, "gtol": gtol, "ftol": 1e-14},
        )
        x = np.clip(res.x, residuals.lb, residuals.ub)
        g = residuals.eval_eq(x)
        h = residuals.eval_ineq(x)
        viol = violation(g, h)

        # first-order stationarity of the Lagrangian, projected on the bounds
        lam_trial = lam + rho * g
        mu_trial = np.maximum(0.0, mu + rho * h)
        grad = _quad_grad(objective, x) + residuals.jac_eq(x).T @ lam_trial \
            + residuals.jac_ineq(x).T @ mu_trial
        proj = grad.copy()
        at_lb = x <= residuals.lb + 1e-12
        at_ub = x >= residuals.ub - 1e-12
        proj[at_lb] = np.minimum(proj[at_lb], 0.0)
        proj[at_ub] = np.maximum(proj[at_ub], 0.0)
        stat = np.max(np.abs(proj), initial=0.0)

        if viol <= tol and stat <= 10.0 * tol * scale:
            status = "optimal"
            best_x, best_viol = x, viol
            break

        if viol < best_viol - 1e-12:
            best_viol = viol
            best_x = x.copy()
            stall = 0
        else:
            stall += 1
            if stall >= 5:
                status = "iteration-limit"
                break

        if viol <= eta:
            lam = lam_trial
            mu = mu_trial
            eta = max(eta * 0.25, 0.1 * tol)
            gtol = max(gtol * 0.25, 1e-9)
        else:
            rho = min(rho * 10.0, 1e9)

    x = best_x if status != "optimal" else x
    report = SolveReport(
        status=status,
        objective=_quad_value(objective, x),
        x=x,
        iterations=outer,
        wall_time=time.perf_counter() - start,
        message=f"max violation {best_viol if status != 'optimal' else viol:.3e}",
    )
    return report


@dataclass
class GradientReport:
    """Per-family worst relative mismatch between analytic and FD Jacobians."""

    errors: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.errors.values())

    def failing(self):
        return sorted(name for name, v in self.errors.items() if v > self.tol)

    def __str__(self) -> str:
        lines = [f"gradient check (tol {self.tol:g})"]
        for name, v in sorted(self.errors.items()):
            flag = "ok " if v <= self.tol else "BAD"
            lines.append(f"  [{flag}] {name}: {v:.3e}")
        return "\n".join(lines)


def check_gradients(residuals, n_points: int = 100, seed: int = 0,
                    tol: float = 1e-4, eps: float = 1e-6) -> GradientReport:
    """Compare analytic Jacobians against central finite differences.

    Uses random dense directions, so a single wrong entry in any family's
    Jacobian is caught with overwhelming probability.  Raises ValueError if
    a residual evaluates to a non-finite value at a sample point.
    """
    rng = np.random.default_rng(seed)
    n = residuals.n
    lo = np.maximum(residuals.lb, -2.0)
    hi = np.minimum(residuals.ub, 2.0)
    hi = np.maximum(hi, lo)  # keep the sampling box non-empty
    errors: dict[str, float] = {}
    for fam in residuals.families:
        worst = 0.0
        for _ in range(n_points):
            x = rng.uniform(lo, hi)
            vals = fam.eval(x)
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"family {fam.name}: non-finite residual at sample point")
            jac = fam.jac(x)
            d = rng.standard_normal(n)
            d /= np.linalg.norm(d)
            fd = (fam.eval(x + eps * d) - fam.eval(x - eps * d)) / (2.0 * eps)
            jd = jac @ d if sp.issparse(jac) else np.asarray(jac) @ d
            denom = max(np.max(np.abs(jd), initial=0.0), 1e-6)
            worst = max(worst, float(np.max(np.abs(jd - fd), initial=0.0) / denom))
        errors[fam.name] = worst
    return GradientReport(errors, tol)
