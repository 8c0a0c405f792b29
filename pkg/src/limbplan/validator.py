"""Independent audit of plan solutions.

Re-checks every logic rule, geometric constraint, and dynamic balance
directly from definitions, sharing no code with the constraint builders.
Pairwise separation is re-derived by a fresh feasibility solve per pair
and timestep, so stored planes are never trusted.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy.optimize import linprog

from .scene import AnchorState, BoxMode, LimbMode, ScenarioConfig, WallState, point_in_region
from .variables import VariableRegistry

__all__ = [
    "PlanSolution",
    "AuditCheck",
    "AuditReport",
    "audit_logic",
    "audit_geometry",
    "audit_dynamics",
    "audit_all",
    "separating_margin",
]

TRAJECTORY_SCHEMA = "limbplan-trajectory-1"

_BINARY_GROUPS = (
    "box_mode", "limb_mode", "anchor_state", "wall_state", "arm_link", "leg_link",
    "box_region_air", "box_region_ground", "limb_region_air", "limb_region_ground",
)


@dataclass
class PlanSolution:
    """Materialized trajectory: poses, forces, and the binary assignment."""

    box_centers: np.ndarray       # (B, T, 3)
    box_rotations: np.ndarray     # (B, T, 3, 3)
    box_corners: np.ndarray       # (B, 8, T, 3)
    joint_positions: np.ndarray   # (7, L, T, 3)
    joint_rotations: np.ndarray   # (7, L, T, 3, 3)
    forces: np.ndarray            # (B, 4, L, T, 3)
    binaries: dict                # group name -> integer ndarray
    scenario_hash: str = ""
    iterations: int = 0
    converged: bool = False

    @property
    def horizon(self) -> int:
        return self.joint_positions.shape[2] if self.joint_positions.size else \
            self.box_centers.shape[1]

    @classmethod
    def from_vector(cls, reg: VariableRegistry, values: np.ndarray,
                    scenario_hash: str = "", iterations: int = 0,
                    converged: bool = False) -> "PlanSolution":
        def grab(name):
            g = reg.groups[name]
            return values[g.offset:g.offset + g.size].reshape(g.dims).copy()

        binaries = {n: np.rint(grab(n)).astype(int) for n in _BINARY_GROUPS}
        return cls(
            box_centers=grab("box_center"),
            box_rotations=grab("box_rotation"),
            box_corners=grab("box_corner"),
            joint_positions=grab("joint_position"),
            joint_rotations=grab("joint_rotation"),
            forces=grab("contact_force"),
            binaries=binaries,
            scenario_hash=scenario_hash,
            iterations=iterations,
            converged=converged,
        )

    def check_shapes(self, cfg: ScenarioConfig) -> None:
        B, L, T = cfg.n_boxes, cfg.n_limbs, cfg.horizon
        expect = {
            "box_centers": (B, T, 3),
            "box_rotations": (B, T, 3, 3),
            "box_corners": (B, 8, T, 3),
            "joint_positions": (7, L, T, 3),
            "joint_rotations": (7, L, T, 3, 3),
            "forces": (B, 4, L, T, 3),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name}: shape {got} does not match scenario {shape}")
        for name, arr in self.binaries.items():
            if np.any((arr != 0) & (arr != 1)):
                raise ValueError(f"{name}: non-binary entries in the assignment")

    # -- trajectory file -----------------------------------------------------

    def to_document(self, cfg: ScenarioConfig) -> dict:
        B, L, T = cfg.n_boxes, cfg.n_limbs, cfg.horizon

        def listify(a):
            return np.asarray(a).tolist()

        steps = []
        for t in range(T):
            binaries = {}
            for name in _BINARY_GROUPS:
                arr = self.binaries[name]
                binaries[name] = listify(arr[..., t]) if arr.size else []
            steps.append({
                "t": t,
                "boxes": [
                    {
                        "id": cfg.boxes[b].id,
                        "center": listify(self.box_centers[b, t]),
                        "rotation": listify(self.box_rotations[b, t]),
                        "corners": listify(self.box_corners[b, :, t]),
                    }
                    for b in range(B)
                ],
                "limbs": [
                    {
                        "id": cfg.limbs[l].id,
                        "joints": [
                            {
                                "p": listify(self.joint_positions[j, l, t]),
                                "R": listify(self.joint_rotations[j, l, t]),
                            }
                            for j in range(7)
                        ],
                    }
                    for l in range(L)
                ],
                "forces": [
                    {
                        "box": b, "anchor": s, "limb": l,
                        "f": listify(self.forces[b, s, l, t]),
                    }
                    for b in range(B) for s in range(4) for l in range(L)
                ],
                "binaries": binaries,
            })
        return {
            "schema": TRAJECTORY_SCHEMA,
            "scenario_hash": self.scenario_hash,
            "iterations": self.iterations,
            "converged": bool(self.converged),
            "steps": steps,
        }

    def to_yaml(self, cfg: ScenarioConfig) -> str:
        return yaml.safe_dump(self.to_document(cfg), sort_keys=False)

    @classmethod
    def from_document(cls, doc: dict, cfg: ScenarioConfig) -> "PlanSolution":
        if doc.get("schema") != TRAJECTORY_SCHEMA:
            raise ValueError(f"unknown trajectory schema {doc.get('schema')!r}")
        B, L, T = cfg.n_boxes, cfg.n_limbs, cfg.horizon
        steps = doc.get("steps", [])
        if len(steps) != T:
            raise ValueError(f"trajectory has {len(steps)} steps, scenario horizon is {T}")
        sol = cls(
            box_centers=np.zeros((B, T, 3)),
            box_rotations=np.zeros((B, T, 3, 3)),
            box_corners=np.zeros((B, 8, T, 3)),
            joint_positions=np.zeros((7, L, T, 3)),
            joint_rotations=np.zeros((7, L, T, 3, 3)),
            forces=np.zeros((B, 4, L, T, 3)),
            binaries={},
            scenario_hash=doc.get("scenario_hash", ""),
            iterations=int(doc.get("iterations", 0)),
            converged=bool(doc.get("converged", False)),
        )
        per_t = {name: [] for name in _BINARY_GROUPS}
        for t, step in enumerate(steps):
            for b, rec in enumerate(step.get("boxes", [])):
                sol.box_centers[b, t] = rec["center"]
                sol.box_rotations[b, t] = rec["rotation"]
                sol.box_corners[b, :, t] = rec["corners"]
            for l, rec in enumerate(step.get("limbs", [])):
                for j, joint in enumerate(rec["joints"]):
                    sol.joint_positions[j, l, t] = joint["p"]
                    sol.joint_rotations[j, l, t] = joint["R"]
            for rec in step.get("forces", []):
                sol.forces[rec["box"], rec["anchor"], rec["limb"], t] = rec["f"]
            for name in _BINARY_GROUPS:
                per_t[name].append(np.asarray(step["binaries"].get(name, []), dtype=int))
        for name in _BINARY_GROUPS:
            stacked = np.stack(per_t[name], axis=-1) if per_t[name] and per_t[name][0].size \
                else np.zeros((0, T), dtype=int)
            sol.binaries[name] = stacked
        return sol

    @classmethod
    def from_yaml(cls, text: str, cfg: ScenarioConfig) -> "PlanSolution":
        return cls.from_document(yaml.safe_load(text), cfg)


@dataclass
class AuditCheck:
    name: str
    passed: bool
    worst: float = 0.0
    tol: float = 0.0
    location: str = ""
    count: int = 0
    warning: str = ""


@dataclass
class AuditReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failing(self):
        return [c for c in self.checks if not c.passed]

    def add(self, name, passed, worst=0.0, tol=0.0, location="", count=0, warning=""):
        self.checks.append(AuditCheck(name, bool(passed), float(worst), float(tol),
                                      location, int(count), warning))

    def merge(self, other: "AuditReport") -> "AuditReport":
        self.checks.extend(other.checks)
        return self

    def render_text(self) -> str:
        lines = []
        for c in self.checks:
            mark = "PASS" if c.passed else "FAIL"
            loc = f" at {c.location}" if c.location else ""
            warn = f"  [warning: {c.warning}]" if c.warning else ""
            lines.append(
                f"[{mark}] {c.name}: worst {c.worst:.3e} (tol {c.tol:.1e},"
                f" {c.count} violations){loc}{warn}"
            )
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)

    def render_csv(self) -> str:
        out = io.StringIO()
        out.write("check,passed,worst,tol,violations,location,warning\n")
        for c in self.checks:
            out.write(f"{c.name},{int(c.passed)},{c.worst!r},{c.tol!r},{c.count},"
                      f"\"{c.location}\",\"{c.warning}\"\n")
        return out.getvalue()


class _Tracker:
    """Collects the worst violation and its location for one check."""

    def __init__(self, tol: float):
        self.tol = tol
        self.worst = 0.0
        self.location = ""
        self.count = 0

    def hit(self, magnitude: float, location: str):
        if magnitude > self.tol:
            self.count += 1
        if magnitude > self.worst:
            self.worst = magnitude
            self.location = location

    def ok(self, condition: bool, location: str):
        self.hit(0.0 if condition else 1.0, location)

    def into(self, report: AuditReport, name: str, warning: str = ""):
        report.add(name, self.count == 0, self.worst, self.tol, self.location,
                   self.count, warning)


# ---------------------------------------------------------------------------
# logic audit


def audit_logic(sol: PlanSolution, cfg: ScenarioConfig) -> AuditReport:
    """Procedural re-check of mode sums, exclusivity, and the logic rules."""
    sol.check_shapes(cfg)
    report = AuditReport()
    B, L, Sw, T = cfg.n_boxes, cfg.n_limbs, cfg.n_wall_anchors, cfg.horizon
    zb = sol.binaries["box_mode"]
    zl = sol.binaries["limb_mode"]
    zs = sol.binaries["anchor_state"]
    zw = sol.binaries["wall_state"]
    zac = sol.binaries["arm_link"]
    zlc = sol.binaries["leg_link"]

    tr = _Tracker(0.0)
    for b in range(B):
        for t in range(T):
            tr.ok(zb[b, :, t].sum() == 1, f"box {b} t={t}")
    tr.into(report, "mode-sum/box")
    tr = _Tracker(0.0)
    for l in range(L):
        for t in range(T):
            tr.ok(zl[l, :, t].sum() == 1, f"limb {l} t={t}")
    tr.into(report, "mode-sum/limb")
    tr = _Tracker(0.0)
    for b in range(B):
        for s in range(4):
            for l in range(L):
                for t in range(T):
                    tr.ok(zs[b, s, l, :, t].sum() == 1, f"anchor b={b} s={s} l={l} t={t}")
    tr.into(report, "mode-sum/anchor")
    tr = _Tracker(0.0)
    for sw in range(Sw):
        for l in range(L):
            for t in range(T):
                tr.ok(zw[sw, l, :, t].sum() == 1, f"wall {sw} l={l} t={t}")
    tr.into(report, "mode-sum/wall")

    tr = _Tracker(0.0)
    for t in range(T):
        for l in range(L):
            conn = zs[:, :, l, AnchorState.TO_ARM, t].sum() + \
                zs[:, :, l, AnchorState.TO_LEG, t].sum() if B else 0
            tr.ok(conn <= 1, f"limb {l} t={t}")
            if Sw:
                tr.ok(zw[:, l, WallState.TO_ARM, t].sum() <= 1, f"limb {l} wall t={t}")
            tr.ok(zac[l, :, t].sum() + zlc[l, :, t].sum() <= 1, f"host {l} t={t}")
            tr.ok(zac[:, l, t].sum() + zlc[:, l, t].sum() <= 1, f"member {l} t={t}")
            tr.ok(zac[l, l, t] == 0 and zlc[l, l, t] == 0, f"self-link {l} t={t}")
        for b in range(B):
            for s in range(4):
                tr.ok(zs[b, s, :, AnchorState.TO_ARM, t].sum()
                      + zs[b, s, :, AnchorState.TO_LEG, t].sum() <= 1,
                      f"anchor b={b} s={s} t={t}")
        for sw in range(Sw):
            tr.ok(zw[sw, :, WallState.TO_ARM, t].sum() <= 1, f"wall {sw} t={t}")
    tr.into(report, "exclusivity")

    rules = {k: _Tracker(0.0) for k in
             ("rule-1", "rule-2", "rule-3", "rule-4", "rule-5", "rule-6", "rule-7",
              "rule-8", "rule-9", "rule-10", "rule-11", "rule-12",
              "rule-13-addleg", "rule-14-addleg")}
    for t in range(T):
        for b in range(B):
            if zb[b, BoxMode.QUADRUPED, t] == 1:
                for s in range(4):
                    rules["rule-1"].ok(zs[b, s, :, AnchorState.TO_LEG, t].sum() == 1,
                                       f"b={b} s={s} t={t}")
            if zs[b, :, :, AnchorState.TO_LEG, t].sum() > 0:
                rules["rule-2"].ok(zb[b, BoxMode.QUADRUPED, t] == 1, f"b={b} t={t}")
            if zb[b, BoxMode.MANIPULATED, t] == 1:
                rules["rule-5"].ok(zs[b, :, :, AnchorState.TO_ARM, t].sum() >= 1,
                                   f"b={b} t={t}")
            if zb[b, BoxMode.STABLE, t] == 1 or zb[b, BoxMode.FREE, t] == 1:
                rules["rule-12"].ok(
                    (zs[b, :, :, AnchorState.TO_ARM, t].sum()
                     + zs[b, :, :, AnchorState.TO_LEG, t].sum()) == 0, f"b={b} t={t}")
            for s in range(4):
                for l in range(L):
                    if zs[b, s, l, AnchorState.TO_LEG, t] == 1:
                        rules["rule-3"].ok(zl[l, LimbMode.LEG, t] == 1,
                                           f"b={b} s={s} l={l} t={t}")
                    if zs[b, s, l, AnchorState.TO_ARM, t] == 1:
                        rules["rule-6"].ok(
                            zl[l, LimbMode.ARM, t] == 1 or zl[l, LimbMode.ADD_ARM, t] == 1,
                            f"b={b} s={s} l={l} t={t}")
        for l in range(L):
            if zl[l, LimbMode.LEG, t] == 1 and B:
                rules["rule-4"].ok(zs[:, :, l, AnchorState.TO_LEG, t].sum() == 1,
                                   f"l={l} t={t}")
            if zl[l, LimbMode.ARM, t] == 1:
                total = zw[:, l, WallState.TO_ARM, t].sum() if Sw else 0
                rules["rule-7"].ok(total == 1, f"l={l} t={t}")
            if zl[l, LimbMode.ADD_ARM, t] == 1:
                rules["rule-9"].ok(zac[:, l, t].sum() == 1, f"l={l} t={t}")
            if zl[l, LimbMode.ADD_LEG, t] == 1:
                rules["rule-13-addleg"].ok(zlc[:, l, t].sum() == 1, f"l={l} t={t}")
            for sw in range(Sw):
                if zw[sw, l, WallState.TO_ARM, t] == 1:
                    rules["rule-8"].ok(zl[l, LimbMode.ARM, t] == 1, f"sw={sw} l={l} t={t}")
        for lpr in range(L):
            for lpo in range(L):
                if lpr == lpo:
                    continue
                if zac[lpr, lpo, t] == 1:
                    rules["rule-10"].ok(zl[lpr, LimbMode.ARM, t] == 1
                                        and zl[lpo, LimbMode.ADD_ARM, t] == 1,
                                        f"lpr={lpr} lpo={lpo} t={t}")
                    if B:
                        rules["rule-11"].ok(
                            zs[:, :, lpr, AnchorState.TO_ARM, t].sum() == 0,
                            f"lpr={lpr} t={t}")
                if zlc[lpr, lpo, t] == 1:
                    rules["rule-14-addleg"].ok(zl[lpr, LimbMode.LEG, t] == 1
                                               and zl[lpo, LimbMode.ADD_LEG, t] == 1,
                                               f"lpr={lpr} lpo={lpo} t={t}")
    for name in sorted(rules):
        rules[name].into(report, name)

    # latch dwell-time: after a change, the state persists for the window
    n = cfg.continuity_window
    tr = _Tracker(0.0)

    def dwell(series, loc):
        for t in range(1, T):
            if series[t] != series[t - 1]:
                stop = min(t + n + 1, T)
                tr.ok(bool(np.all(series[t:stop] == series[t])), f"{loc} t={t}")

    for b in range(B):
        for s in range(4):
            for l in range(L):
                dwell(zs[b, s, l, AnchorState.TO_ARM, :], f"grasp b={b} s={s} l={l}")
                dwell(zs[b, s, l, AnchorState.TO_LEG, :], f"leg b={b} s={s} l={l}")
    for sw in range(Sw):
        for l in range(L):
            dwell(zw[sw, l, WallState.TO_ARM, :], f"wall sw={sw} l={l}")
    for lpr in range(L):
        for lpo in range(L):
            if lpr != lpo:
                dwell(zac[lpr, lpo, :], f"armlink {lpr}-{lpo}")
                dwell(zlc[lpr, lpo, :], f"leglink {lpr}-{lpo}")
    tr.into(report, "continuity-dwell")

    tr = _Tracker(0.0)
    for mode in cfg.forbid_box_modes:
        for b in range(B):
            for t in range(T):
                tr.ok(zb[b, int(mode), t] == 0, f"b={b} t={t} mode={mode.name}")
    for fm in cfg.forced_box_modes:
        b = cfg.box_index(fm.box)
        for t in range(fm.t_start, fm.t_end + 1):
            tr.ok(zb[b, int(fm.mode), t] == 1, f"b={b} t={t} mode={fm.mode.name}")
    tr.into(report, "pinned-modes")
    return report


# ---------------------------------------------------------------------------
# geometry audit


def separating_margin(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Best margin of a plane with a.p <= b - m on A and a.p >= b + m on B.

    Positive for strictly separable point sets, ~0 for touching sets,
    negative when the convex hulls overlap.  Independent feasibility solve;
    never reads stored plane variables.
    """
    na, nb = len(points_a), len(points_b)
    if na == 0 or nb == 0:
        return np.inf
    # variables [a(3), b, m], maximize m
    c = np.zeros(5)
    c[4] = -1.0
    rows = np.zeros((na + nb, 5))
    rows[:na, :3] = points_a
    rows[:na, 3] = -1.0
    rows[:na, 4] = 1.0
    rows[na:, :3] = -points_b
    rows[na:, 3] = 1.0
    rows[na:, 4] = 1.0
    scale = float(np.max(np.abs(np.vstack([points_a, points_b])))) + 1.0
    bounds = [(-1, 1)] * 3 + [(-3 * scale, 3 * scale), (-scale, scale)]
    res = linprog(c, A_ub=rows, b_ub=np.zeros(na + nb), bounds=bounds, method="highs")
    if not res.success:
        return -np.inf
    return float(res.x[4])


def _latched_exemptions_audit(sol: PlanSolution, cfg: ScenarioConfig):
    """(pair, t) -> set of (kind, body, point) released from separation."""
    zs = sol.binaries["anchor_state"]
    zac = sol.binaries["arm_link"]
    zlc = sol.binaries["leg_link"]
    from .nlp import corner_indices_of_face  # geometric helper, not formulation code

    exempt: dict = {}

    def put(key, item):
        exempt.setdefault(key, set()).add(item)

    pairs = [("limb", l1, "limb", l2) for l1 in range(cfg.n_limbs)
             for l2 in range(l1 + 1, cfg.n_limbs)]
    pairs += [("box", b, "limb", l) for b in range(cfg.n_boxes) for l in range(cfg.n_limbs)]
    index = {p: i for i, p in enumerate(pairs)}
    for t in range(cfg.horizon):
        for b in range(cfg.n_boxes):
            for s in range(4):
                corners = corner_indices_of_face(cfg.boxes[b].anchor_offsets[s])
                for l in range(cfg.n_limbs):
                    key = (index[("box", b, "limb", l)], t)
                    if zs[b, s, l, AnchorState.TO_ARM, t] == 1:
                        put(key, ("limb", l, 6))
                        for c in corners:
                            put(key, ("box", b, int(c)))
                    if zs[b, s, l, AnchorState.TO_LEG, t] == 1:
                        put(key, ("limb", l, 0))
                        for c in corners:
                            put(key, ("box", b, int(c)))
        for lpr in range(cfg.n_limbs):
            for lpo in range(cfg.n_limbs):
                if lpr == lpo:
                    continue
                if zac[lpr, lpo, t] == 1 or zlc[lpr, lpo, t] == 1:
                    key = (index[("limb", min(lpr, lpo), "limb", max(lpr, lpo))], t)
                    put(key, ("limb", lpr, 6))
                    put(key, ("limb", lpo, 0))
    return pairs, exempt


def audit_geometry(sol: PlanSolution, cfg: ScenarioConfig, tol: float = 1e-5,
                   separation_tol: float = 1e-6) -> AuditReport:
    """Latching poses, chain consistency, rotation validity, region
    membership, ground flags, speed limits, support half-spaces, and
    pairwise separation."""
    sol.check_shapes(cfg)
    report = AuditReport()
    B, L, Sw, T = cfg.n_boxes, cfg.n_limbs, cfg.n_wall_anchors, cfg.horizon
    zb = sol.binaries["box_mode"]
    zl = sol.binaries["limb_mode"]
    zs = sol.binaries["anchor_state"]
    zw = sol.binaries["wall_state"]
    zac = sol.binaries["arm_link"]
    zlc = sol.binaries["leg_link"]
    p = sol.joint_positions
    rot = sol.joint_rotations

    # latching pose equalities for active connections
    tr = _Tracker(tol)
    for t in range(T):
        for b in range(B):
            box = cfg.boxes[b]
            for s in range(4):
                target_p = sol.box_centers[b, t] + sol.box_rotations[b, t] @ box.anchor_offsets[s]
                target_r = box.anchor_rotations[s] @ sol.box_rotations[b, t]
                for l in range(L):
                    if zs[b, s, l, AnchorState.TO_ARM, t] == 1:
                        tr.hit(np.max(np.abs(p[6, l, t] - target_p)),
                               f"arm-grasp b={b} s={s} l={l} t={t}")
                        tr.hit(np.max(np.abs(rot[6, l, t] - target_r)),
                               f"arm-grasp-rot b={b} s={s} l={l} t={t}")
                    if zs[b, s, l, AnchorState.TO_LEG, t] == 1:
                        tr.hit(np.max(np.abs(p[0, l, t] - target_p)),
                               f"leg-latch b={b} s={s} l={l} t={t}")
                        tr.hit(np.max(np.abs(rot[0, l, t] - target_r)),
                               f"leg-latch-rot b={b} s={s} l={l} t={t}")
        for sw in range(Sw):
            site = cfg.anchors[sw]
            for l in range(L):
                if zw[sw, l, WallState.TO_ARM, t] == 1:
                    tr.hit(np.max(np.abs(p[0, l, t] - site.position)),
                           f"wall-latch sw={sw} l={l} t={t}")
                    tr.hit(np.max(np.abs(rot[0, l, t] - site.rotation)),
                           f"wall-latch-rot sw={sw} l={l} t={t}")
        for lpr in range(L):
            for lpo in range(L):
                if lpr == lpo:
                    continue
                if zac[lpr, lpo, t] == 1 or zlc[lpr, lpo, t] == 1:
                    tr.hit(np.max(np.abs(p[0, lpo, t] - p[6, lpr, t])),
                           f"limb-link {lpr}->{lpo} t={t}")
                    tr.hit(np.max(np.abs(rot[0, lpo, t] - rot[6, lpr, t])),
                           f"limb-link-rot {lpr}->{lpo} t={t}")
    tr.into(report, "latching")

    # chain consistency and rotation validity
    tr = _Tracker(tol)
    tro = _Tracker(max(tol, 1e-6))
    trd = _Tracker(max(tol, 1e-6))
    for l, limb in enumerate(cfg.limbs):
        off = limb.link_offsets
        for t in range(T):
            for j in range(6):
                pred = p[j, l, t] + rot[j, l, t] @ off[j]
                if j == 5:
                    pred = pred + rot[6, l, t] @ off[6]
                tr.hit(np.max(np.abs(p[j + 1, l, t] - pred)), f"chain l={l} j={j} t={t}")
            for j in range(1, 7):
                axis_prev = rot[j - 1, l, t] @ np.array([0.0, 0.0, 1.0])
                axis_own = rot[j, l, t] @ limb.joint_axes[j - 1]
                tr.hit(np.max(np.abs(axis_prev - axis_own)), f"axis l={l} j={j} t={t}")
            for j in range(7):
                R = rot[j, l, t]
                tro.hit(np.linalg.norm(R @ R.T - np.eye(3)), f"ortho l={l} j={j} t={t}")
                trd.hit(abs(np.linalg.det(R) - 1.0), f"det l={l} j={j} t={t}")
    tr.into(report, "kinematic-chain")
    tro.into(report, "rotation-orthonormality")
    trd.into(report, "rotation-determinant")

    # region membership and ground flags
    dba = sol.binaries["box_region_air"]
    dbg = sol.binaries["box_region_ground"]
    dla = sol.binaries["limb_region_air"]
    dlg = sol.binaries["limb_region_ground"]
    ground_tol = max(1e-3, tol)
    tr = _Tracker(0.0)
    trg = _Tracker(ground_tol)
    for t in range(T):
        for b in range(B):
            sel = dba[b, :, t] + dbg[b, :, t]
            tr.ok(sel.sum() == 1, f"box-select b={b} t={t}")
            for r, region in enumerate(cfg.regions):
                if sel[r] == 1:
                    inside = all(
                        point_in_region(sol.box_corners[b, c, t], region, max(tol, 1e-6))
                        for c in range(8)
                    )
                    tr.ok(inside, f"box-in-region b={b} r={r} t={t}")
                if dbg[b, r, t] == 1:
                    tr.ok(region.is_ground_adjacent, f"box-ground-region b={b} r={r} t={t}")
                    bottom = sol.box_centers[b, t, 2] - cfg.boxes[b].edge_length / 2
                    trg.hit(abs(bottom - region.ground_height),
                            f"box-ground-height b={b} r={r} t={t}")
            if zb[b, BoxMode.STABLE, t] == 1:
                tr.ok(dbg[b, :, t].sum() >= 1, f"stable-on-ground b={b} t={t}")
        for l in range(L):
            for j in range(7):
                sel = dla[l, j, :, t] + dlg[l, j, :, t]
                tr.ok(sel.sum() == 1, f"limb-select l={l} j={j} t={t}")
                for r, region in enumerate(cfg.regions):
                    if sel[r] == 1:
                        tr.ok(point_in_region(p[j, l, t], region, max(tol, 1e-6)),
                              f"joint-in-region l={l} j={j} r={r} t={t}")
                    if dlg[l, j, r, t] == 1:
                        tr.ok(region.is_ground_adjacent,
                              f"limb-ground-region l={l} j={j} r={r} t={t}")
                        trg.hit(abs(p[j, l, t, 2] - region.ground_height),
                                f"limb-ground-height l={l} j={j} r={r} t={t}")
            if zl[l, LimbMode.FREE, t] == 1:
                tr.ok(dlg[l, 0, :, t].sum() >= 1, f"free-base-on-ground l={l} t={t}")
    tr.into(report, "region-membership")
    trg.into(report, "ground-contact-height")

    # ground-speed limit, active while the base is declared on the ground
    tr = _Tracker(tol)
    for l in range(L):
        for t in range(T - 1):
            if dlg[l, 0, :, t].sum() >= 1:
                step = np.max(np.abs(p[:, l, t + 1] - p[:, l, t]))
                tr.hit(max(0.0, step - cfg.ground_speed_limit), f"speed l={l} t={t}")
    tr.into(report, "ground-speed")

    # support half-space for each latched leg
    tr = _Tracker(tol)
    for t in range(T):
        for b in range(B):
            box = cfg.boxes[b]
            for s in range(4):
                normal = box.anchor_offsets[s] / np.linalg.norm(box.anchor_offsets[s])
                for l in range(L):
                    if zs[b, s, l, AnchorState.TO_LEG, t] == 1:
                        d = normal @ (p[6, l, t] - sol.box_centers[b, t])
                        tr.hit(max(0.0, box.edge_length / 2 - d),
                               f"support b={b} s={s} l={l} t={t}")
    tr.into(report, "support-polygon")

    # pairwise separation via an independent feasibility solve
    pairs, exempt = _latched_exemptions_audit(sol, cfg)
    tr = _Tracker(separation_tol)
    for pidx, (kind_a, ia, kind_b, ib) in enumerate(pairs):
        for t in range(T):
            skip = exempt.get((pidx, t), set())

            def sample(kind, body):
                if kind == "box":
                    return [sol.box_corners[body, c, t] for c in range(8)
                            if (kind, body, c) not in skip]
                return [p[j, body, t] for j in range(7) if (kind, body, j) not in skip]

            pa = np.asarray(sample(kind_a, ia))
            pb = np.asarray(sample(kind_b, ib))
            margin = separating_margin(pa, pb)
            tr.hit(max(0.0, -margin), f"pair {kind_a}{ia}-{kind_b}{ib} t={t}")
    tr.into(report, "separation")
    return report


# ---------------------------------------------------------------------------
# dynamics audit


def audit_dynamics(sol: PlanSolution, cfg: ScenarioConfig, tol: float = 1e-4) -> AuditReport:
    """Newton balance, moment balance, force switching, friction, and the
    force magnitude caps.  Boundary steps carry no Newton rows."""
    sol.check_shapes(cfg)
    report = AuditReport()
    B, L, T = cfg.n_boxes, cfg.n_limbs, cfg.horizon
    zb = sol.binaries["box_mode"]
    zs = sol.binaries["anchor_state"]
    dlg = sol.binaries["limb_region_ground"]
    f = sol.forces
    dt2 = cfg.dt * cfg.dt

    tr = _Tracker(tol)
    for b in range(B):
        m = cfg.boxes[b].mass
        for t in range(1, T - 1):
            acc = (sol.box_centers[b, t + 1] - 2 * sol.box_centers[b, t]
                   + sol.box_centers[b, t - 1]) / dt2
            total = f[b, :, :, t].sum(axis=(0, 1))
            gravity = m * cfg.gravity * (1 - zb[b, BoxMode.STABLE, t])
            resid = m * acc - total - gravity
            tr.hit(np.max(np.abs(resid)), f"newton b={b} t={t}")
    tr.into(report, "newton-balance")

    tr = _Tracker(tol)
    for b in range(B):
        for t in range(T):
            moment = np.zeros(3)
            for l in range(L):
                d = sol.joint_positions[6, l, t] - sol.box_centers[b, t]
                for s in range(4):
                    moment += np.cross(d, f[b, s, l, t])
            tr.hit(np.max(np.abs(moment)), f"moment b={b} t={t}")
    tr.into(report, "moment-balance")

    tr = _Tracker(1e-9)
    tra = _Tracker(1e-9)
    for t in range(T):
        for b in range(B):
            for s in range(4):
                for l in range(L):
                    mag = np.max(np.abs(f[b, s, l, t]))
                    if zs[b, s, l, AnchorState.EMPTY, t] == 1:
                        tr.hit(mag, f"empty-anchor b={b} s={s} l={l} t={t}")
                    if zs[b, s, l, AnchorState.TO_LEG, t] == 1 \
                            and dlg[l, 6, :, t].sum() == 0:
                        tra.hit(mag, f"airborne-leg b={b} s={s} l={l} t={t}")
    tr.into(report, "force-off-unconnected")
    tra.into(report, "force-off-airborne-leg")

    tr = _Tracker(tol)
    for t in range(T):
        for b in range(B):
            for s in range(4):
                for l in range(L):
                    if zs[b, s, l, AnchorState.TO_LEG, t] == 1 \
                            and dlg[l, 6, :, t].sum() >= 1:
                        fx, fy, fz = f[b, s, l, t]
                        tr.hit(max(0.0, -fz), f"friction-fz b={b} s={s} l={l} t={t}")
                        tr.hit(max(0.0, abs(fx) - cfg.friction_mu * fz),
                               f"friction-x b={b} s={s} l={l} t={t}")
                        tr.hit(max(0.0, abs(fy) - cfg.friction_mu * fz),
                               f"friction-y b={b} s={s} l={l} t={t}")
    tr.into(report, "friction-pyramid")

    tr = _Tracker(1e-9)
    warn_band = 0
    worst_norm = 0.0
    for t in range(T):
        for b in range(B):
            for s in range(4):
                for l in range(L):
                    tr.hit(max(0.0, np.max(np.abs(f[b, s, l, t])) - cfg.f_max),
                           f"cap b={b} s={s} l={l} t={t}")
                    norm2 = float(np.linalg.norm(f[b, s, l, t]))
                    worst_norm = max(worst_norm, norm2)
                    if norm2 > cfg.f_max + 1e-9:
                        warn_band += 1
    tr.into(report, "force-component-cap")
    limit = np.sqrt(3.0) * cfg.f_max
    report.add(
        "force-euclidean-cap", worst_norm <= limit + 1e-9, worst_norm, limit,
        count=int(worst_norm > limit + 1e-9),
        warning=(f"{warn_band} contacts exceed f_max in 2-norm (within the"
                 " sqrt(3) component-bound band)") if warn_band else "",
    )
    return report


def audit_all(sol: PlanSolution, cfg: ScenarioConfig, tol: float = 1e-5,
              force_tol: float = 1e-4) -> AuditReport:
    report = audit_logic(sol, cfg)
    report.merge(audit_geometry(sol, cfg, tol=tol))
    report.merge(audit_dynamics(sol, cfg, tol=force_tol))
    return report
