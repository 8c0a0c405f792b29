"""Consensus loop alternating the MIP step and the NLP step.

Each iteration solves the mixed-integer projection with the built-in
branch-and-bound solver, hands the discrete connection decisions to the
nonlinear projection, then updates the scaled dual and inflates both
weight vectors by rho.  The NLP copy is the returned trajectory.
"""

from __future__ import annotations

import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mip import LinearConstraintSet, QuadraticObjective, assemble_mip, build_all_constraints
from .nlp import assemble_nlp
from .scene import BoxMode, ScenarioConfig, region_weights
from .solvers import QpProblem, solve_miqp, solve_nlp
from .validator import PlanSolution
from .variables import VariableRegistry, VarVector, build_registry

__all__ = [
    "AdmmState",
    "PlanInfeasibleError",
    "init_state",
    "mip_step",
    "nlp_step",
    "dual_and_weight_update",
    "compute_residuals",
    "run",
    "history_to_csv",
    "HISTORY_HEADER",
]

log = logging.getLogger("limbplan.admm")

HISTORY_HEADER = "iter,r_pB_mean,r_pB_max,r_pL_mean,r_pL_max,r_RL_mean,r_RL_max,theta"


class PlanInfeasibleError(RuntimeError):
    """The mixed-integer step has an empty feasible set."""

    def __init__(self, message: str, families=()):
        super().__init__(message)
        self.families = tuple(families)


@dataclass
class AdmmState:
    var1: VarVector
    var2: VarVector
    w: VarVector
    w_mip: np.ndarray
    w_nlp: np.ndarray
    rho: float
    iteration: int = 0
    history: list = field(default_factory=list)
    fixed_binaries: np.ndarray | None = None
    nlp_stalls: int = 0
    mip_report: object = None
    nlp_report: object = None
    phase_times: dict = field(default_factory=dict)

    def record(self, row):
        self.history.append(row)


def _initial_binaries(reg: VariableRegistry, cfg: ScenarioConfig, var2: VarVector) -> None:
    """Consistent all-idle assignment: boxes rest or hang free, limbs free,
    every latch empty, region selectors from the initial geometry."""
    T = cfg.horizon
    zb = var2.view("box_mode")
    zl = var2.view("limb_mode")
    zs = var2.view("anchor_state")
    zw = var2.view("wall_state")
    dba = var2.view("box_region_air")
    dbg = var2.view("box_region_ground")
    dla = var2.view("limb_region_air")
    dlg = var2.view("limb_region_ground")

    def containing_region(point):
        for r, region in enumerate(cfg.regions):
            if region_weights(point, region, 1e-6) is not None:
                return r
        return None

    def grounded(point_z, region):
        return region.is_ground_adjacent and abs(point_z - region.ground_height) <= 1e-3

    for b, box in enumerate(cfg.boxes):
        bottom = box.initial_center[2] - box.edge_length / 2
        r_sel, on_ground = None, False
        for r, region in enumerate(cfg.regions):
            if all(
                region_weights(box.initial_center + off, region, 1e-6) is not None
                for off in box.corner_offsets
            ):
                if grounded(bottom, region):
                    r_sel, on_ground = r, True
                    break
                if r_sel is None:
                    r_sel = r
        if r_sel is None:
            r_sel, on_ground = 0, False
        mode = BoxMode.STABLE if on_ground else BoxMode.FREE
        if mode in cfg.forbid_box_modes:
            mode = BoxMode.FREE
        zb[b, mode, :] = 1.0
        (dbg if on_ground else dba)[b, r_sel, :] = 1.0
        for c, off in enumerate(box.corner_offsets):
            lam = _hull_weights(cfg, r_sel, box.initial_center + off)
            var2.view(f"hull_box_r{r_sel}")[b, c, :, :] = lam[:, None]
    zs[:, :, :, 0, :] = 1.0  # every box anchor empty
    zw[:, :, 0, :] = 1.0     # every wall anchor empty

    for l, limb in enumerate(cfg.limbs):
        zl[l, 0, :] = 1.0    # free mode
        base = limb.initial_base_position
        rot = limb.initial_base_rotation
        pts = [base]
        for j in range(6):
            step = rot @ limb.link_offsets[j]
            if j == 5:
                step = step + rot @ limb.link_offsets[6]
            pts.append(pts[-1] + step)
        for j, pt in enumerate(pts):
            r_sel = containing_region(pt)
            if r_sel is None:
                r_sel = 0
            region = cfg.regions[r_sel]
            if grounded(pt[2], region):
                dlg[l, j, r_sel, :] = 1.0
            else:
                dla[l, j, r_sel, :] = 1.0
            lam = _hull_weights(cfg, r_sel, pt)
            var2.view(f"hull_limb_r{r_sel}")[l, j, :, :] = lam[:, None]
    _ = T


def _hull_weights(cfg: ScenarioConfig, r: int, point: np.ndarray) -> np.ndarray:
    lam = region_weights(point, cfg.regions[r], 1e-6)
    if lam is None:
        # nearest representable point: fall back to uniform weights
        lam = np.full(cfg.regions[r].n_vertices, 1.0 / cfg.regions[r].n_vertices)
    return lam


def init_state(reg: VariableRegistry, cfg: ScenarioConfig, seed: int = 0) -> AdmmState:
    """Static initial guess: everything idle at its starting pose."""
    var2 = VarVector.zeros(reg, tag="nlp-copy")
    var2.view("box_rotation")[:] = np.eye(3)
    for b, box in enumerate(cfg.boxes):
        var2.view("box_center")[b, :, :] = box.initial_center
        for c, off in enumerate(box.corner_offsets):
            var2.view("box_corner")[b, c, :, :] = box.initial_center + off
    for l, limb in enumerate(cfg.limbs):
        rot = limb.initial_base_rotation
        var2.view("joint_rotation")[:, l, :, :, :] = rot
        pts = [limb.initial_base_position]
        for j in range(6):
            step = rot @ limb.link_offsets[j]
            if j == 5:
                step = step + rot @ limb.link_offsets[6]
            pts.append(pts[-1] + step)
        for j in range(7):
            var2.view("joint_position")[j, l, :, :] = pts[j]
    _initial_binaries(reg, cfg, var2)

    # one plane per pair, splitting the segment between the body centroids
    pn = var2.view("plane_normal")
    po = var2.view("plane_offset")
    for pidx, (kind_a, ia, kind_b, ib) in enumerate(reg.pairs):
        for t in range(cfg.horizon):
            ca = _centroid(var2, kind_a, ia, t)
            cb = _centroid(var2, kind_b, ib, t)
            d = cb - ca
            nrm = np.linalg.norm(d)
            a = d / nrm if nrm > 1e-9 else np.array([1.0, 0.0, 0.0])
            pn[pidx, t, :] = a
            po[pidx, t] = float(a @ (ca + cb) / 2.0)

    var1 = var2.copy(tag="mip-copy")
    w = VarVector.zeros(reg, tag="dual")
    sp_ = cfg.solver
    w_mip = np.full(reg.size, sp_.w_mip0)
    w_mip[: reg.n_binary] = sp_.w_mip0 * sp_.binary_weight
    w_nlp = np.full(reg.size, sp_.w_nlp0)
    state = AdmmState(var1=var1, var2=var2, w=w, w_mip=w_mip, w_nlp=w_nlp, rho=sp_.rho)
    state.fixed_binaries = var2.binary_values().copy()
    state.record(compute_residuals(state, reg))
    _ = seed  # initialization is deterministic; kept for the run manifest
    return state


def _centroid(var2: VarVector, kind: str, idx: int, t: int) -> np.ndarray:
    if kind == "box":
        return var2.view("box_center")[idx, t].copy()
    return var2.view("joint_position")[:, idx, t].mean(axis=0)


def diagnose_infeasibility(cons: LinearConstraintSet, reg: VariableRegistry,
                           top: int = 8) -> list:
    """Elastic relaxation: which constraint families need slack to hold."""
    n, m = reg.size, cons.n_rows
    A = sp.hstack([cons.A, -sp.identity(m, format="csr")], format="csr")
    diag = np.concatenate([np.full(n, 1e-6), np.ones(m)])
    prob = QpProblem(
        P=sp.diags(2.0 * diag, format="csc"),
        q=np.zeros(n + m),
        A=A,
        lo=cons.lo,
        hi=cons.hi,
        lb=np.concatenate([reg.lb, np.full(m, -np.inf)]),
        ub=np.concatenate([reg.ub, np.full(m, np.inf)]),
    )
    from .solvers import solve_qp

    rep = solve_qp(prob, tol=1e-6, max_iter=8000, polish=False)
    if rep.x is None:
        return []
    slack = np.abs(rep.x[n:])
    bad = np.argsort(-slack)
    families = []
    for r in bad:
        if slack[r] < 1e-4 or len(families) >= top:
            break
        lab = cons.labels[r]
        if lab not in families:
            families.append(lab)
    return families


def mip_step(state: AdmmState, reg: VariableRegistry, cfg: ScenarioConfig,
             constraints: LinearConstraintSet, verbose: bool = False) -> AdmmState:
    """var1 <- argmin of the consensus QP over the mixed-integer set."""
    t0 = time.perf_counter()
    cons, objective = assemble_mip(reg, cfg, state.var2, state.w, state.w_mip, constraints)
    prob = QpProblem(P=objective.P, q=objective.q, A=cons.A, lo=cons.lo, hi=cons.hi,
                     lb=reg.lb, ub=reg.ub, const=objective.const)
    sp_ = cfg.solver
    rep = solve_miqp(prob, reg.binary_mask, tol=sp_.miqp_gap,
                     node_limit=sp_.node_limit, qp_tol=sp_.qp_tol,
                     incumbent_guess=state.fixed_binaries, verbose=verbose)
    state.mip_report = rep
    state.phase_times["mip"] = state.phase_times.get("mip", 0.0) + time.perf_counter() - t0
    if rep.status == "infeasible":
        families = diagnose_infeasibility(cons, reg)
        raise PlanInfeasibleError(
            "mixed-integer step infeasible; conflicting families: "
            + (", ".join(families) if families else "(no elastic diagnosis)"),
            families,
        )
    if rep.x is None:
        raise PlanInfeasibleError(
            f"mixed-integer step stopped ({rep.status}) without any incumbent", ())
    if verbose:
        log.info("iter %d MIP: %s obj=%.6g nodes=%s gap=%s",
                 state.iteration, rep.status, rep.objective, rep.nodes, rep.gap)
    state.var1.values[:] = rep.x
    binaries = np.rint(rep.x[: reg.n_binary])
    state.var1.values[: reg.n_binary] = binaries
    state.fixed_binaries = binaries
    return state


def _project_rotations(reg: VariableRegistry, x_cont: np.ndarray) -> np.ndarray:
    """Polar-project every rotation block of a continuous-slice vector."""
    out = x_cont.copy()
    ids = reg.ids("joint_rotation") - reg.n_binary
    frames = ids.reshape(-1, 3, 3)
    for k in range(frames.shape[0]):
        M = out[frames[k]]
        try:
            u, _, vt = np.linalg.svd(M)
        except np.linalg.LinAlgError:
            continue
        Rproj = u @ vt
        if np.linalg.det(Rproj) < 0:
            u[:, -1] = -u[:, -1]
            Rproj = u @ vt
        out[frames[k]] = Rproj
    return out


def nlp_step(state: AdmmState, reg: VariableRegistry, cfg: ScenarioConfig,
             constraints: LinearConstraintSet, verbose: bool = False) -> AdmmState:
    """var2 <- projection of var1 + w onto the nonlinear feasible set with
    the discrete decisions frozen."""
    if state.fixed_binaries is None:
        raise ValueError("nlp_step before any mip_step: no fixed binaries")
    t0 = time.perf_counter()
    residuals, objective = assemble_nlp(
        reg, cfg, state.fixed_binaries, state.var1, state.w, state.w_nlp, constraints)
    x0 = _project_rotations(reg, state.var1.values[reg.continuous_slice()])
    rep = solve_nlp(residuals, objective, x0, tol=cfg.solver.nlp_tol)
    state.nlp_report = rep
    state.phase_times["nlp"] = state.phase_times.get("nlp", 0.0) + time.perf_counter() - t0
    if rep.status != "optimal":
        state.nlp_stalls += 1
        if verbose:
            log.info("iter %d NLP stalled (%s); keeping best iterate",
                     state.iteration, rep.message)
    elif verbose:
        log.info("iter %d NLP: %s (%s)", state.iteration, rep.status, rep.message)
    state.var2.values[: reg.n_binary] = state.fixed_binaries
    state.var2.values[reg.continuous_slice()] = rep.x
    return state


def dual_and_weight_update(state: AdmmState) -> AdmmState:
    """Scaled dual ascent then geometric weight inflation (Algorithm lines
    5-7; the primal residual is var1 - var2)."""
    state.w.values[:] = (state.w.values + state.var1.values - state.var2.values) / state.rho
    state.w_mip *= state.rho
    state.w_nlp *= state.rho
    return state


def compute_residuals(state: AdmmState, reg: VariableRegistry) -> dict:
    """Mean/max mismatch norms between the two consensus copies."""
    diff = state.var1.values - state.var2.values

    def group_norms(name, matrix=False):
        g = reg.groups[name]
        d = diff[g.offset:g.offset + g.size]
        if not g.size:
            return np.zeros(0)
        if matrix:
            vecs = d.reshape(-1, 9)
        else:
            vecs = d.reshape(-1, 3)
        return np.linalg.norm(vecs, axis=1)

    def mean_max(norms):
        if norms.size == 0:
            return 0.0, 0.0
        return float(norms.mean()), float(norms.max())

    r_pb = mean_max(group_norms("box_center"))
    r_pl = mean_max(group_norms("joint_position"))
    r_rl = mean_max(group_norms("joint_rotation", matrix=True))
    theta = float(np.max(np.abs(diff), initial=0.0))
    return {
        "iter": state.iteration,
        "r_pB_mean": r_pb[0], "r_pB_max": r_pb[1],
        "r_pL_mean": r_pl[0], "r_pL_max": r_pl[1],
        "r_RL_mean": r_rl[0], "r_RL_max": r_rl[1],
        "theta": theta,
    }


def _converged(state: AdmmState, reg: VariableRegistry, cfg: ScenarioConfig) -> bool:
    diff = np.abs(state.var1.values - state.var2.values)
    pos = max(
        (np.max(diff[reg.groups[n].offset:reg.groups[n].offset + reg.groups[n].size],
                initial=0.0)
         for n in ("box_center", "box_corner", "joint_position")),
        default=0.0,
    )
    rot = max(
        (np.max(diff[reg.groups[n].offset:reg.groups[n].offset + reg.groups[n].size],
                initial=0.0)
         for n in ("box_rotation", "joint_rotation")),
        default=0.0,
    )
    return pos <= cfg.solver.theta_pos and rot <= cfg.solver.theta_rot


def run(cfg: ScenarioConfig, reg: VariableRegistry | None = None,
        i_max: int | None = None, seed: int | None = None,
        scenario_hash: str = "", verbose: bool = False):
    """Full consensus loop; returns (PlanSolution, history, state).

    The plan is materialized from the NLP copy.  Raises
    PlanInfeasibleError when the mixed-integer half has no solution.
    """
    if reg is None:
        reg = build_registry(cfg)
    i_max = cfg.solver.iters if i_max is None else i_max
    if i_max < 1:
        raise ValueError("i_max must be >= 1")
    seed = cfg.solver.seed if seed is None else seed
    t0 = time.perf_counter()
    constraints = build_all_constraints(reg, cfg)
    state = init_state(reg, cfg, seed)
    converged = False
    best_theta = np.inf
    best_var2 = state.var2.copy()
    best_binaries = state.fixed_binaries.copy()
    best_iter = 0
    for i in range(1, i_max + 1):
        state.iteration = i
        mip_step(state, reg, cfg, constraints, verbose=verbose)
        nlp_step(state, reg, cfg, constraints, verbose=verbose)
        row = compute_residuals(state, reg)
        dual_and_weight_update(state)
        state.record(row)
        if verbose:
            log.info("iter %d residuals: %s", i,
                     {k: round(v, 6) for k, v in row.items() if k != "iter"})
        if row["theta"] < best_theta:
            best_theta = row["theta"]
            best_var2 = state.var2.copy()
            best_binaries = state.fixed_binaries.copy()
            best_iter = i
        if _converged(state, reg, cfg):
            converged = True
            break
    if not converged and best_iter != state.iteration:
        state.var2 = best_var2
        state.fixed_binaries = best_binaries
    state.phase_times["total"] = time.perf_counter() - t0
    sol = PlanSolution.from_vector(
        reg, state.var2.values, scenario_hash=scenario_hash,
        iterations=state.iteration, converged=converged)
    return sol, state.history, state


def history_to_csv(history: list) -> str:
    out = io.StringIO()
    out.write(HISTORY_HEADER + "\n")
    keys = HISTORY_HEADER.split(",")
    for row in history:
        out.write(",".join(repr(row[k]) if k != "iter" else str(row[k]) for k in keys))
        out.write("\n")
    return out.getvalue()
