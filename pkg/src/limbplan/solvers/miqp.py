"""Branch-and-bound MIQP solver over convex QP relaxations.

Branching picks the most fractional binary; node selection is best-bound
with creation-index tie-breaking, so the search is deterministic.  All
nodes share one KKT factorization (only variable bounds change between
nodes).  Logic propagation over two-variable implication rows and
selection (sum-to-one) rows prunes dead branches before any QP solve, and
fix-and-solve heuristics keep a usable incumbent from the first node on.
"""

from __future__ import annotations

import heapq
import logging
import time

import numpy as np
import scipy.sparse as sp

from .qp import QpCore, QpProblem, SolveReport

__all__ = ["solve_miqp"]

log = logging.getLogger("limbplan.miqp")

_INT_TOL = 1e-5


def _most_fractional(x: np.ndarray, bin_idx: np.ndarray):
    frac = np.clip(x[bin_idx], 0.0, 1.0)
    dist = np.minimum(frac, 1.0 - frac)
    k = int(np.argmax(dist))
    if dist[k] <= _INT_TOL:
        return None
    return int(bin_idx[k])


class _Propagator:
    """Bound tightening over binary implication and selection rows.

    Collects rows of the form z_a <= z_b (+ constant) and sum-to-one rows
    over binaries; fixing a variable propagates through both families and
    detects conflicts without touching the QP.
    """

    def __init__(self, A: sp.csr_matrix, lo: np.ndarray, hi: np.ndarray,
                 is_binary: np.ndarray):
        n = A.shape[1]
        self.implies_zero: list = [[] for _ in range(n)]  # a=1 forces b... below
        self.implied_by_one: list = [[] for _ in range(n)]
        self.sum_rows: list = []
        self.var_sum_rows: list = [[] for _ in range(n)]
        csr = A.tocsr()
        for r in range(csr.shape[0]):
            sl = slice(csr.indptr[r], csr.indptr[r + 1])
            cols = csr.indices[sl]
            vals = csr.data[sl]
            if not np.all(is_binary[cols]):
                continue
            if (np.isfinite(lo[r]) and np.isfinite(hi[r]) and hi[r] - lo[r] < 1e-12
                    and abs(hi[r] - 1.0) < 1e-9 and np.all(np.abs(vals - 1.0) < 1e-9)):
                idx = len(self.sum_rows)
                self.sum_rows.append(np.array(cols))
                for c in cols:
                    self.var_sum_rows[c].append(idx)
                continue
            # a - b <= 0 with binaries: a=1 => b=1, b=0 => a=0
            if (len(cols) == 2 and not np.isfinite(lo[r]) and abs(hi[r]) < 1e-9):
                pos = cols[vals > 0]
                neg = cols[vals < 0]
                if len(pos) == 1 and len(neg) == 1 and abs(vals).max() < 1.0 + 1e-9 \
                        and abs(abs(vals[0]) - abs(vals[1])) < 1e-9:
                    a, b = int(pos[0]), int(neg[0])
                    self.implied_by_one[a].append(b)   # a=1 -> b=1
                    self.implies_zero[b].append(a)     # b=0 -> a=0

    def propagate(self, lb: np.ndarray, ub: np.ndarray, seeds) -> bool:
        """Fixpoint propagation from the seed variables; False on conflict."""
        stack = list(seeds)
        while stack:
            v = stack.pop()
            if lb[v] > ub[v] + 1e-12:
                return False
            if lb[v] > 0.5:  # fixed to one
                for b in self.implied_by_one[v]:
                    if ub[b] < 0.5:
                        return False
                    if lb[b] < 0.5:
                        lb[b] = 1.0
                        stack.append(b)
                for ridx in self.var_sum_rows[v]:
                    for c in self.sum_rows[ridx]:
                        if c != v:
                            if lb[c] > 0.5:
                                return False
                            if ub[c] > 0.5:
                                ub[c] = 0.0
                                stack.append(c)
            elif ub[v] < 0.5:  # fixed to zero
                for a in self.implies_zero[v]:
                    if lb[a] > 0.5:
                        return False
                    if ub[a] > 0.5:
                        ub[a] = 0.0
                        stack.append(a)
                for ridx in self.var_sum_rows[v]:
                    cols = self.sum_rows[ridx]
                    free = [c for c in cols if ub[c] > 0.5]
                    ones = [c for c in cols if lb[c] > 0.5]
                    if ones:
                        continue
                    if not free:
                        return False
                    if len(free) == 1:
                        c = free[0]
                        lb[c] = 1.0
                        stack.append(c)
        return True


def solve_miqp(prob: QpProblem, integrality: np.ndarray, tol: float = 1e-4,
               node_limit: int = 5000, qp_tol: float = 1e-6,
               qp_max_iter: int = 20000, incumbent_guess: np.ndarray | None = None,
               time_limit: float | None = None, verbose: bool = False) -> SolveReport:
    """Minimize a convex QP with some variables restricted to {0, 1}.

    ``tol`` is the relative optimality gap certified on success.  Hitting
    ``node_limit`` or ``time_limit`` returns the best incumbent with its
    remaining gap.  ``incumbent_guess`` seeds the search with a known
    integer-feasible binary assignment.
    """
    start = time.perf_counter()
    integrality = np.asarray(integrality, dtype=bool)
    bin_idx = np.flatnonzero(integrality)
    core = QpCore(prob)
    propagator = _Propagator(prob.A, prob.lo, prob.hi, integrality)
    lb0, ub0 = prob.lb.copy(), prob.ub.copy()
    nodes_done = 0
    incumbent_x = None
    incumbent_obj = np.inf

    def left():
        if time_limit is None:
            return None
        return time_limit - (time.perf_counter() - start)

    def out_of_time():
        t = left()
        return t is not None and t <= 0

    def solve_node(lb, ub, warm):
        nonlocal nodes_done
        nodes_done += 1
        core.update_variable_bounds(lb, ub)
        x0, y0 = (warm if warm is not None else (None, None))
        return core.solve(x0=x0, y0=y0, tol=qp_tol, max_iter=qp_max_iter,
                          time_limit=left())

    def try_fixed(zb, warm=None):
        """Solve with the binaries pinned; update the incumbent on success."""
        nonlocal incumbent_x, incumbent_obj
        lb = lb0.copy()
        ub = ub0.copy()
        lb[bin_idx] = np.maximum(lb[bin_idx], zb)
        ub[bin_idx] = np.minimum(ub[bin_idx], zb)
        if np.any(lb[bin_idx] > ub[bin_idx]):
            return False
        if not propagator.propagate(lb, ub, bin_idx.tolist()):
            return False
        rep = solve_node(lb, ub, warm)
        if rep.ok and rep.objective < incumbent_obj - 1e-12:
            incumbent_obj = rep.objective
            incumbent_x = rep.x.copy()
            incumbent_x[bin_idx] = zb
            return True
        return False

    if incumbent_guess is not None and bin_idx.size:
        guess = np.clip(np.rint(incumbent_guess), lb0[bin_idx], ub0[bin_idx])
        try_fixed(guess)
        if verbose and incumbent_x is not None:
            log.info("seed incumbent: obj=%.6g", incumbent_obj)

    root = solve_node(lb0.copy(), ub0.copy(), None)
    if root.status == "infeasible":
        return SolveReport("infeasible", np.inf, None, iterations=root.iterations,
                           wall_time=time.perf_counter() - start, nodes=nodes_done,
                           message="root relaxation infeasible")
    if root.status == "time-limit":
        status = "time-limit"
        gap = np.inf
        return SolveReport(status, incumbent_obj, incumbent_x, nodes=nodes_done,
                           wall_time=time.perf_counter() - start, gap=gap,
                           message="timed out in root relaxation")

    frac = _most_fractional(root.x, bin_idx) if bin_idx.size else None
    if frac is None:
        zb = np.clip(np.round(root.x[bin_idx]), lb0[bin_idx], ub0[bin_idx])
        try_fixed(zb, (root.x, root.y))
        return SolveReport("optimal", incumbent_obj, incumbent_x,
                           iterations=root.iterations,
                           wall_time=time.perf_counter() - start,
                           gap=0.0, nodes=nodes_done,
                           message="relaxation was already integral")
    # fix-and-solve from the rounded root relaxation
    try_fixed(np.clip(np.round(root.x[bin_idx]), lb0[bin_idx], ub0[bin_idx]),
              (root.x, root.y))

    counter = 0
    heap = [(root.objective, counter, lb0, ub0, (root.x, root.y), frac)]
    status = "optimal"
    best_bound = root.objective

    while heap:
        if nodes_done >= node_limit:
            status = "iteration-limit"
            break
        if out_of_time():
            status = "time-limit"
            break
        bound, _, lb, ub, warm, frac = heapq.heappop(heap)
        best_bound = bound
        if incumbent_obj < np.inf and bound >= incumbent_obj - tol * max(1.0, abs(incumbent_obj)):
            best_bound = min(bound, incumbent_obj)
            heap.clear()  # best-bound order: every remaining node is pruned too
            break
        for branch_val in (0.0, 1.0):
            if (branch_val == 0.0 and lb[frac] > 0.5) or (branch_val == 1.0 and ub[frac] < 0.5):
                continue  # the branch would cross an already-fixed bound
            lb_c, ub_c = lb.copy(), ub.copy()
            if branch_val == 0.0:
                ub_c[frac] = 0.0
            else:
                lb_c[frac] = 1.0
            if not propagator.propagate(lb_c, ub_c, [frac]):
                continue
            rep = solve_node(lb_c, ub_c, warm)
            if verbose:
                log.info("node %d: var %d=%d -> %s obj=%.6g inc=%.6g", nodes_done,
                         frac, int(branch_val), rep.status, rep.objective, incumbent_obj)
            if rep.status == "infeasible":
                continue
            if rep.status == "time-limit":
                status = "time-limit"
                break
            if incumbent_obj < np.inf and rep.objective >= incumbent_obj - tol * max(
                    1.0, abs(incumbent_obj)):
                continue
            child_frac = _most_fractional(rep.x, bin_idx)
            if child_frac is None:
                zb = np.clip(np.round(rep.x[bin_idx]), lb_c[bin_idx], ub_c[bin_idx])
                try_fixed(zb, (rep.x, rep.y))
                continue
            counter += 1
            heapq.heappush(heap, (rep.objective, counter, lb_c, ub_c,
                                  (rep.x, rep.y), child_frac))
        if status == "time-limit":
            break
    else:
        best_bound = incumbent_obj  # heap exhausted: search is complete

    if incumbent_x is None:
        if status == "optimal":
            return SolveReport("infeasible", np.inf, None, nodes=nodes_done,
                               wall_time=time.perf_counter() - start,
                               message="no integer-feasible point exists")
        return SolveReport(status, np.inf, None, nodes=nodes_done,
                           wall_time=time.perf_counter() - start,
                           message="stopped before finding an incumbent")

    gap = max(0.0, incumbent_obj - min(best_bound, incumbent_obj))
    if status == "optimal" and gap > tol * max(1.0, abs(incumbent_obj)):
        status = "iteration-limit"
    return SolveReport(status, incumbent_obj, incumbent_x, nodes=nodes_done,
                       wall_time=time.perf_counter() - start, gap=gap)
