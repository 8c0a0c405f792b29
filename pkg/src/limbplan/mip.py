"""Mixed-integer half of the planning problem.

Every builder returns a LinearConstraintSet of ranged rows over the flat
variable vector, each row carrying a provenance label.  Conditional
constraints use the big-M pattern with M = 1e5; a separate family of
logically implied "tighten/*" rows strengthens the QP relaxation without
changing the integer feasible set.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .scene import AnchorState, BoxMode, LimbMode, ScenarioConfig, WallState
from .variables import VariableRegistry, VarVector

__all__ = [
    "BIG_M",
    "LinearConstraintSet",
    "ConstraintBuilder",
    "QuadraticObjective",
    "build_mode_sums",
    "build_logic_rules",
    "build_latching",
    "build_region_membership",
    "build_box_dynamics_linear",
    "build_stability_and_continuity",
    "build_all_constraints",
    "assemble_mip",
    "fix_binaries",
]

BIG_M = 1e5


class LinearConstraintSet:
    """Ranged linear rows  lo <= A x <= hi  with per-row provenance."""

    def __init__(self, A: sp.csr_matrix, lo: np.ndarray, hi: np.ndarray, labels: list):
        self.A = A
        self.lo = lo
        self.hi = hi
        self.labels = labels

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @property
    def n_cols(self) -> int:
        return self.A.shape[1]

    @property
    def eq_mask(self) -> np.ndarray:
        return np.isfinite(self.lo) & np.isfinite(self.hi) & (self.hi - self.lo < 1e-12)

    # Equality / less-equal views of the ranged storage.
    @property
    def A_eq(self) -> sp.csr_matrix:
        return self.A[self.eq_mask]

    @property
    def b_eq(self) -> np.ndarray:
        return self.hi[self.eq_mask]

    @property
    def A_in(self) -> sp.csr_matrix:
        m = ~self.eq_mask
        upper = self.A[m & np.isfinite(self.hi)]
        lower = -self.A[m & np.isfinite(self.lo)]
        return sp.vstack([upper, lower], format="csr") if (upper.shape[0] or lower.shape[0]) \
            else sp.csr_matrix((0, self.n_cols))

    @property
    def b_in(self) -> np.ndarray:
        m = ~self.eq_mask
        return np.concatenate([self.hi[m & np.isfinite(self.hi)],
                               -self.lo[m & np.isfinite(self.lo)]])

    @staticmethod
    def concat(sets: list) -> "LinearConstraintSet":
        sets = [s for s in sets if s.n_rows]
        if not sets:
            raise ValueError("nothing to concatenate")
        A = sp.vstack([s.A for s in sets], format="csr")
        lo = np.concatenate([s.lo for s in sets])
        hi = np.concatenate([s.hi for s in sets])
        labels = [lab for s in sets for lab in s.labels]
        return LinearConstraintSet(A, lo, hi, labels)

    def residual(self, x: np.ndarray) -> np.ndarray:
        """Signed violation per row (0 where satisfied)."""
        ax = self.A @ x
        over = np.where(np.isfinite(self.hi), np.maximum(ax - self.hi, 0.0), 0.0)
        under = np.where(np.isfinite(self.lo), np.maximum(self.lo - ax, 0.0), 0.0)
        return np.maximum(over, under)

    def export_triplets(self) -> str:
        """Sparse debug dump: matrix triplets then one bounds line per row."""
        coo = self.A.tocoo()
        out = io.StringIO()
        out.write("kind,row,col,value,hi,provenance\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            out.write(f"A,{r},{c},{v!r},,{self.labels[r]}\n")
        for r in range(self.n_rows):
            out.write(f"b,{r},,{self.lo[r]!r},{self.hi[r]!r},{self.labels[r]}\n")
        return out.getvalue()


class ConstraintBuilder:
    """Row-by-row accumulator for a LinearConstraintSet."""

    def __init__(self, n_cols: int):
        self.n_cols = n_cols
        self._cols: list = []
        self._vals: list = []
        self._lo: list = []
        self._hi: list = []
        self._labels: list = []

    def add(self, cols, vals, lo, hi, label):
        self._cols.append(np.asarray(cols, dtype=np.int64))
        self._vals.append(np.asarray(vals, dtype=float))
        self._lo.append(lo)
        self._hi.append(hi)
        self._labels.append(label)

    def add_eq(self, cols, vals, rhs, label):
        self.add(cols, vals, rhs, rhs, label)

    def add_le(self, cols, vals, rhs, label):
        self.add(cols, vals, -np.inf, rhs, label)

    def add_ge(self, cols, vals, rhs, label):
        self.add(cols, vals, rhs, np.inf, label)

    # big-M conditionals: rows hold when every guard binary equals 1
    def add_cond_eq(self, cols, vals, rhs, guards, label):
        self.add_cond_le(cols, vals, rhs, guards, label)
        self.add_cond_ge(cols, vals, rhs, guards, label)

    def add_cond_le(self, cols, vals, rhs, guards, label):
        k = len(guards)
        self.add(
            np.concatenate([cols, guards]),
            np.concatenate([vals, np.full(k, BIG_M)]),
            -np.inf,
            rhs + BIG_M * k,
            label,
        )

    def add_cond_ge(self, cols, vals, rhs, guards, label):
        k = len(guards)
        self.add(
            np.concatenate([cols, guards]),
            np.concatenate([-np.asarray(vals, dtype=float), np.full(k, BIG_M)]),
            -np.inf,
            -rhs + BIG_M * k,
            label,
        )

    def build(self) -> LinearConstraintSet:
        n_rows = len(self._cols)
        if n_rows == 0:
            return LinearConstraintSet(
                sp.csr_matrix((0, self.n_cols)), np.zeros(0), np.zeros(0), []
            )
        lens = np.array([len(c) for c in self._cols])
        indptr = np.concatenate([[0], np.cumsum(lens)])
        indices = np.concatenate(self._cols)
        data = np.concatenate(self._vals)
        A = sp.csr_matrix((data, indices, indptr), shape=(n_rows, self.n_cols))
        A.sum_duplicates()
        return LinearConstraintSet(
            A, np.asarray(self._lo, dtype=float), np.asarray(self._hi, dtype=float),
            list(self._labels),
        )


@dataclass
class QuadraticObjective:
    """1/2 x'Px + q'x + const with P positive semidefinite."""

    P: sp.csc_matrix
    q: np.ndarray
    const: float = 0.0

    def value(self, x: np.ndarray) -> float:
        return 0.5 * float(x @ (self.P @ x)) + float(self.q @ x) + self.const


# ---------------------------------------------------------------------------
# builders


def build_mode_sums(reg: VariableRegistry, cfg: ScenarioConfig) -> LinearConstraintSet:
    """One-mode-per-body rows plus single-latch exclusivity rows."""
    bld = ConstraintBuilder(reg.size)
    B, L, Sw, T = cfg.n_boxes, cfg.n_limbs, cfg.n_wall_anchors, cfg.horizon
    zb = reg.ids("box_mode")
    zl = reg.ids("limb_mode")
    zs = reg.ids("anchor_state")
    zw = reg.ids("wall_state")
    zac = reg.ids("arm_link")
    zlc = reg.ids("leg_link")

    for b in range(B):
        for t in range(T):
            bld.add_eq(zb[b, :, t], np.ones(4), 1.0, "mode-sum/box")
    for l in range(L):
        for t in range(T):
            bld.add_eq(zl[l, :, t], np.ones(5), 1.0, "mode-sum/limb")
    for b in range(B):
        for s in range(4):
            for l in range(L):
                for t in range(T):
                    bld.add_eq(zs[b, s, l, :, t], np.ones(3), 1.0, "mode-sum/anchor")
    for sw in range(Sw):
        for l in range(L):
            for t in range(T):
                bld.add_eq(zw[sw, l, :, t], np.ones(2), 1.0, "mode-sum/wall")

    con = (AnchorState.TO_ARM, AnchorState.TO_LEG)
    for l in range(L):
        for t in range(T):
            cols = np.concatenate([zs[:, :, l, i, t].ravel() for i in con])
            if cols.size:
                bld.add_le(cols, np.ones(cols.size), 1.0, "exclusive/limb-box")
    for b in range(B):
        for s in range(4):
            for t in range(T):
                cols = np.concatenate([zs[b, s, :, i, t].ravel() for i in con])
                if cols.size:
                    bld.add_le(cols, np.ones(cols.size), 1.0, "exclusive/anchor-limb")
    for sw in range(Sw):
        for t in range(T):
            cols = zw[sw, :, WallState.TO_ARM, t]
            bld.add_le(cols, np.ones(cols.size), 1.0, "exclusive/wall-limb")
    for l in range(L):
        for t in range(T):
            if Sw:
                cols = zw[:, l, WallState.TO_ARM, t]
                bld.add_le(cols, np.ones(cols.size), 1.0, "exclusive/limb-wall")
            if L > 1:
                # a limb's free end hosts at most one added limb...
                cols = np.concatenate([zac[l, :, t], zlc[l, :, t]])
                bld.add_le(cols, np.ones(cols.size), 1.0, "exclusive/host-end")
                # ...and its base latches onto at most one host
                cols = np.concatenate([zac[:, l, t], zlc[:, l, t]])
                bld.add_le(cols, np.ones(cols.size), 1.0, "exclusive/member-base")
    return bld.build()


def build_logic_rules(reg: VariableRegistry, cfg: ScenarioConfig) -> LinearConstraintSet:
    """Rules 1-12 plus the symmetric added-leg closure, as big-M rows."""
    bld = ConstraintBuilder(reg.size)
    B, L, Sw, T = cfg.n_boxes, cfg.n_limbs, cfg.n_wall_anchors, cfg.horizon
    zb = reg.ids("box_mode")
    zl = reg.ids("limb_mode")
    zs = reg.ids("anchor_state")
    zw = reg.ids("wall_state")
    zac = reg.ids("arm_link")
    zlc = reg.ids("leg_link")
    ARM, ADD_ARM, LEG, ADD_LEG = (
        LimbMode.ARM, LimbMode.ADD_ARM, LimbMode.LEG, LimbMode.ADD_LEG)
    TO_ARM, TO_LEG = AnchorState.TO_ARM, AnchorState.TO_LEG

    for t in range(T):
        for b in range(B):
            guard_quad = [zb[b, BoxMode.QUADRUPED, t]]
            # 1: quadruped body => every anchor hosts exactly one leg
            for s in range(4):
                cols = zs[b, s, :, TO_LEG, t]
                bld.add_cond_eq(cols, np.ones(cols.size), 1.0, guard_quad, "rule-1")
            # 2: any leg connection => the box is a quadruped body
            cols = zs[b, :, :, TO_LEG, t].ravel()
            if cols.size:
                bld.add(
                    np.concatenate([cols, guard_quad]),
                    np.concatenate([np.ones(cols.size), [-BIG_M]]),
                    -np.inf, 0.0, "rule-2",
                )
            # 5: manipulated box => at least one arm grasp
            cols = zs[b, :, :, TO_ARM, t].ravel()
            if cols.size:
                bld.add_cond_ge(cols, np.ones(cols.size), 1.0,
                                [zb[b, BoxMode.MANIPULATED, t]], "rule-5")
            # 12: stable or free box => all anchors empty
            cols = np.concatenate([zs[b, :, :, TO_ARM, t].ravel(),
                                   zs[b, :, :, TO_LEG, t].ravel()])
            if cols.size:
                bld.add(
                    np.concatenate([cols, [zb[b, BoxMode.STABLE, t], zb[b, BoxMode.FREE, t]]]),
                    np.concatenate([np.ones(cols.size), [BIG_M, BIG_M]]),
                    -np.inf, BIG_M, "rule-12",
                )
        for l in range(L):
            for b in range(B):
                for s in range(4):
                    # 3: leg connection => limb is in leg mode
                    bld.add_cond_ge([zl[l, LEG, t]], [1.0], 1.0,
                                    [zs[b, s, l, TO_LEG, t]], "rule-3")
                    # 6: arm grasp => limb is an arm or an added arm
                    bld.add(
                        [zs[b, s, l, TO_ARM, t], zl[l, ARM, t], zl[l, ADD_ARM, t]],
                        [1.0, -1.0, -1.0], -np.inf, 0.0, "rule-6",
                    )
            # 4: leg-mode limb => exactly one leg connection
            cols = zs[:, :, l, TO_LEG, t].ravel()
            if cols.size:
                bld.add_cond_eq(cols, np.ones(cols.size), 1.0, [zl[l, LEG, t]], "rule-4")
            # 7: arm-mode limb => latched to exactly one wall anchor
            cols = zw[:, l, WallState.TO_ARM, t]
            bld.add_cond_eq(cols, np.ones(cols.size), 1.0, [zl[l, ARM, t]], "rule-7")
            for sw in range(Sw):
                # 8: wall latch => the limb is in arm mode
                bld.add_cond_ge([zl[l, ARM, t]], [1.0], 1.0,
                                [zw[sw, l, WallState.TO_ARM, t]], "rule-8")
            # 9: added arm => exactly one host (self-links are bound-pinned 0,
            # so with a single limb this makes add-arm mode infeasible)
            cols = zac[:, l, t]
            bld.add_cond_eq(cols, np.ones(cols.size), 1.0,
                            [zl[l, ADD_ARM, t]], "rule-9")
            # added-leg closure, mirroring rule 9
            cols = zlc[:, l, t]
            bld.add_cond_eq(cols, np.ones(cols.size), 1.0,
                            [zl[l, ADD_LEG, t]], "rule-13-addleg")
        for lpr in range(L):
            for lpo in range(L):
                if lpr == lpo:
                    continue
                g_ac = [zac[lpr, lpo, t]]
                # 10: arm link => host is an arm, member an added arm
                bld.add_cond_ge([zl[lpr, ARM, t]], [1.0], 1.0, g_ac, "rule-10")
                bld.add_cond_ge([zl[lpo, ADD_ARM, t]], [1.0], 1.0, g_ac, "rule-10")
                # 11: a host's free end is occupied; it cannot grasp a box
                cols = zs[:, :, lpr, TO_ARM, t].ravel()
                if cols.size:
                    bld.add(
                        np.concatenate([cols, g_ac]),
                        np.concatenate([np.ones(cols.size), [BIG_M]]),
                        -np.inf, BIG_M, "rule-11",
                    )
                g_lc = [zlc[lpr, lpo, t]]
                # leg-link closure, mirroring rule 10
                bld.add_cond_ge([zl[lpr, LEG, t]], [1.0], 1.0, g_lc, "rule-14-addleg")
                bld.add_cond_ge([zl[lpo, ADD_LEG, t]], [1.0], 1.0, g_lc, "rule-14-addleg")
    _tightenings(bld, reg, cfg)
    return bld.build()


def _tightenings(bld: ConstraintBuilder, reg: VariableRegistry, cfg: ScenarioConfig) -> None:
    """Relaxation-strengthening rows implied by the rules at integrality."""
    B, L, Sw, T = cfg.n_boxes, cfg.n_limbs, cfg.n_wall_anchors, cfg.horizon
    zb = reg.ids("box_mode")
    zl = reg.ids("limb_mode")
    zs = reg.ids("anchor_state")
    zw = reg.ids("wall_state")
    zac = reg.ids("arm_link")
    zlc = reg.ids("leg_link")
    ARM, ADD_ARM, LEG, ADD_LEG = (
        LimbMode.ARM, LimbMode.ADD_ARM, LimbMode.LEG, LimbMode.ADD_LEG)
    TO_ARM, TO_LEG = AnchorState.TO_ARM, AnchorState.TO_LEG
    for t in range(T):
        for l in range(L):
            for sw in range(Sw):
                bld.add([zw[sw, l, WallState.TO_ARM, t], zl[l, ARM, t]],
                        [1.0, -1.0], -np.inf, 0.0, "tighten/wall-implies-arm")
            if Sw:
                cols = np.concatenate([[zl[l, ARM, t]], zw[:, l, WallState.TO_ARM, t]])
                vals = np.concatenate([[1.0], -np.ones(Sw)])
                bld.add(cols, vals, -np.inf, 0.0, "tighten/arm-needs-wall")
            if B:
                cols = zs[:, :, l, TO_ARM, t].ravel()
                bld.add(np.concatenate([cols, [zl[l, ARM, t], zl[l, ADD_ARM, t]]]),
                        np.concatenate([np.ones(cols.size), [-1.0, -1.0]]),
                        -np.inf, 0.0, "tighten/grasp-needs-armmode")
                cols = zs[:, :, l, TO_LEG, t].ravel()
                bld.add(np.concatenate([cols, [zl[l, LEG, t]]]),
                        np.concatenate([np.ones(cols.size), [-1.0]]),
                        -np.inf, 0.0, "tighten/legconn-needs-legmode")
            bld.add(np.concatenate([zac[l, :, t], [zl[l, ARM, t]]]),
                    np.concatenate([np.ones(L), [-1.0]]),
                    -np.inf, 0.0, "tighten/armhost-is-arm")
            bld.add(np.concatenate([zlc[l, :, t], [zl[l, LEG, t]]]),
                    np.concatenate([np.ones(L), [-1.0]]),
                    -np.inf, 0.0, "tighten/leghost-is-leg")
            bld.add(np.concatenate([[zl[l, ADD_ARM, t]], zac[:, l, t]]),
                    np.concatenate([[1.0], -np.ones(L)]),
                    -np.inf, 0.0, "tighten/addarm-needs-host")
            bld.add(np.concatenate([[zl[l, ADD_LEG, t]], zlc[:, l, t]]),
                    np.concatenate([[1.0], -np.ones(L)]),
                    -np.inf, 0.0, "tighten/addleg-needs-host")
        for b in range(B):
            cols = zs[b, :, :, TO_LEG, t].ravel()
            bld.add(np.concatenate([cols, [zb[b, BoxMode.QUADRUPED, t]]]),
                    np.concatenate([np.ones(cols.size), [-4.0]]),
                    -np.inf, 0.0, "tighten/legs-need-quad")
            cols = np.concatenate([zs[b, :, :, TO_ARM, t].ravel(),
                                   zs[b, :, :, TO_LEG, t].ravel()])
            bld.add(
                np.concatenate([cols, [zb[b, BoxMode.MANIPULATED, t],
                                       zb[b, BoxMode.QUADRUPED, t]]]),
                np.concatenate([np.ones(cols.size), [-4.0, -4.0]]),
                -np.inf, 0.0, "tighten/connections-need-mode",
            )


def build_latching(reg: VariableRegistry, cfg: ScenarioConfig) -> LinearConstraintSet:
    """Conditional pose equalities for every latch pairing.

    Leg connections bind the limb base frame (j=0) to the box anchor; arm
    grasps bind the end-effector tip (j=6).  Wall latches bind the base to
    the fixed site pose.  Added-limb links tie the member's base frame to
    the host's tip frame.
    """
    bld = ConstraintBuilder(reg.size)
    B, L, Sw, T = cfg.n_boxes, cfg.n_limbs, cfg.n_wall_anchors, cfg.horizon
    zs = reg.ids("anchor_state")
    zw = reg.ids("wall_state")
    zac = reg.ids("arm_link")
    zlc = reg.ids("leg_link")
    pb = reg.ids("box_center")
    rb = reg.ids("box_rotation")
    pl = reg.ids("joint_position")
    rl = reg.ids("joint_rotation")

    def pose_rows(guard, frame, l, t, b, s, tag):
        box = cfg.boxes[b]
        off = box.anchor_offsets[s]
        rot_o = box.anchor_rotations[s]
        for ax in range(3):
            cols = np.concatenate([[pl[frame, l, t, ax], pb[b, t, ax]], rb[b, t, ax, :]])
            vals = np.concatenate([[1.0, -1.0], -off])
            bld.add_cond_eq(cols, vals, 0.0, [guard], f"latch/{tag}-pos")
        for i in range(3):
            for j in range(3):
                # R_L[frame] = R_o R_B, entrywise
                cols = np.concatenate([[rl[frame, l, t, i, j]], rb[b, t, :, j]])
                vals = np.concatenate([[1.0], -rot_o[i, :]])
                bld.add_cond_eq(cols, vals, 0.0, [guard], f"latch/{tag}-rot")

    for t in range(T):
        for b in range(B):
            for s in range(4):
                for l in range(L):
                    pose_rows(zs[b, s, l, AnchorState.TO_ARM, t], 6, l, t, b, s, "arm")
                    pose_rows(zs[b, s, l, AnchorState.TO_LEG, t], 0, l, t, b, s, "leg")
        for sw in range(Sw):
            site = cfg.anchors[sw]
            for l in range(L):
                guard = zw[sw, l, WallState.TO_ARM, t]
                for ax in range(3):
                    bld.add_cond_eq([pl[0, l, t, ax]], [1.0], site.position[ax],
                                    [guard], "latch/wall-pos")
                for i in range(3):
                    for j in range(3):
                        bld.add_cond_eq([rl[0, l, t, i, j]], [1.0], site.rotation[i, j],
                                        [guard], "latch/wall-rot")
        for lpr in range(L):
            for lpo in range(L):
                if lpr == lpo:
                    continue
                for guard, tag in ((zac[lpr, lpo, t], "armlink"), (zlc[lpr, lpo, t], "leglink")):
                    for ax in range(3):
                        bld.add_cond_eq([pl[0, lpo, t, ax], pl[6, lpr, t, ax]],
                                        [1.0, -1.0], 0.0, [guard], f"latch/{tag}-pos")
                    for i in range(3):
                        for j in range(3):
                            bld.add_cond_eq([rl[0, lpo, t, i, j], rl[6, lpr, t, i, j]],
                                            [1.0, -1.0], 0.0, [guard], f"latch/{tag}-rot")
    return bld.build()


def build_region_membership(reg: VariableRegistry, cfg: ScenarioConfig) -> LinearConstraintSet:
    """Convex-combination membership of every tracked point in one region.

    Box corners share the box's region selector; limb joints select per
    joint.  Ground flags additionally pin the point's height to the region
    ground plane, and stable boxes / free limbs must carry a ground flag.
    """
    for r in cfg.regions:
        if r.n_vertices < 4:
            raise ValueError(f"region {r.id}: fewer than 4 vertices")
    bld = ConstraintBuilder(reg.size)
    B, L, T, R = cfg.n_boxes, cfg.n_limbs, cfg.horizon, cfg.n_regions
    zb = reg.ids("box_mode")
    zl = reg.ids("limb_mode")
    pb = reg.ids("box_center")
    rb = reg.ids("box_rotation")
    cb = reg.ids("box_corner")
    pl = reg.ids("joint_position")
    dba = reg.ids("box_region_air")
    dbg = reg.ids("box_region_ground")
    dla = reg.ids("limb_region_air")
    dlg = reg.ids("limb_region_ground")
    hull_box = [reg.ids(f"hull_box_r{r}") for r in range(R)]
    hull_limb = [reg.ids(f"hull_limb_r{r}") for r in range(R)]

    for t in range(T):
        for b in range(B):
            box = cfg.boxes[b]
            corners = box.corner_offsets
            for c in range(8):
                # corner definition: c = p + R_B kappa_c (R_B pinned to I)
                for ax in range(3):
                    cols = np.concatenate([[cb[b, c, t, ax], pb[b, t, ax]], rb[b, t, ax, :]])
                    vals = np.concatenate([[1.0, -1.0], -corners[c]])
                    bld.add_eq(cols, vals, 0.0, "corner-tie")
                for ax in range(3):
                    cols = [cb[b, c, t, ax]]
                    vals = [1.0]
                    for r in range(R):
                        cols = np.concatenate([cols, hull_box[r][b, c, :, t]])
                        vals = np.concatenate([vals, -cfg.regions[r].vertices[:, ax]])
                    bld.add_eq(cols, vals, 0.0, "region/box-comb")
                for r in range(R):
                    cols = np.concatenate([hull_box[r][b, c, :, t],
                                           [dba[b, r, t], dbg[b, r, t]]])
                    vals = np.concatenate([np.ones(cfg.regions[r].n_vertices), [-1.0, -1.0]])
                    bld.add_eq(cols, vals, 0.0, "region/box-weight-sum")
            cols = np.concatenate([dba[b, :, t], dbg[b, :, t]])
            bld.add_eq(cols, np.ones(cols.size), 1.0, "region/box-select")
            for r, region in enumerate(cfg.regions):
                if region.is_ground_adjacent:
                    # resting box: bottom face on the region's ground plane
                    bld.add_cond_eq([pb[b, t, 2]], [1.0],
                                    region.ground_height + box.edge_length / 2.0,
                                    [dbg[b, r, t]], "region/box-ground-pin")
            bld.add(
                np.concatenate([[zb[b, BoxMode.STABLE, t]], dbg[b, :, t]]),
                np.concatenate([[1.0], -np.ones(R)]),
                -np.inf, 0.0, "region/stable-on-ground",
            )
        for l in range(L):
            for j in range(7):
                for ax in range(3):
                    cols = [pl[j, l, t, ax]]
                    vals = [1.0]
                    for r in range(R):
                        cols = np.concatenate([cols, hull_limb[r][l, j, :, t]])
                        vals = np.concatenate([vals, -cfg.regions[r].vertices[:, ax]])
                    bld.add_eq(cols, vals, 0.0, "region/limb-comb")
                for r in range(R):
                    cols = np.concatenate([hull_limb[r][l, j, :, t],
                                           [dla[l, j, r, t], dlg[l, j, r, t]]])
                    vals = np.concatenate([np.ones(cfg.regions[r].n_vertices), [-1.0, -1.0]])
                    bld.add_eq(cols, vals, 0.0, "region/limb-weight-sum")
                cols = np.concatenate([dla[l, j, :, t], dlg[l, j, :, t]])
                bld.add_eq(cols, np.ones(cols.size), 1.0, "region/limb-select")
                for r, region in enumerate(cfg.regions):
                    if region.is_ground_adjacent:
                        bld.add_cond_eq([pl[j, l, t, 2]], [1.0], region.ground_height,
                                        [dlg[l, j, r, t]], "region/limb-ground-pin")
            bld.add(
                np.concatenate([[zl[l, LimbMode.FREE, t]], dlg[l, 0, :, t]]),
                np.concatenate([[1.0], -np.ones(R)]),
                -np.inf, 0.0, "region/free-base-on-ground",
            )
    return bld.build()


def build_box_dynamics_linear(reg: VariableRegistry, cfg: ScenarioConfig) -> LinearConstraintSet:
    """Newton rows via central differences plus force switching and friction.

    Gravity is compensated only in stable mode.  A contact force exists
    only while its anchor is latched, and a leg's force additionally
    requires its foot on the ground.  Friction pyramid rows activate for
    grounded leg contacts.
    """
    bld = ConstraintBuilder(reg.size)
    B, L, T = cfg.n_boxes, cfg.n_limbs, cfg.horizon
    zb = reg.ids("box_mode")
    zs = reg.ids("anchor_state")
    pb = reg.ids("box_center")
    f = reg.ids("contact_force")
    dlg = reg.ids("limb_region_ground")
    dt2 = cfg.dt * cfg.dt
    mu = cfg.friction_mu
    R = cfg.n_regions

    for b in range(B):
        box = cfg.boxes[b]
        m = box.mass
        for ax in range(3):
            bld.add_eq([pb[b, 0, ax]], [1.0], box.initial_center[ax], "dyn/box-start")
            bld.add_eq([pb[b, 1, ax], pb[b, 0, ax]], [1.0, -1.0], 0.0, "dyn/box-rest")
        for t in range(1, T - 1):
            for ax in range(3):
                g_ax = cfg.gravity[ax]
                cols = np.concatenate([
                    [pb[b, t + 1, ax], pb[b, t, ax], pb[b, t - 1, ax]],
                    f[b, :, :, t, ax].ravel(),
                    [zb[b, BoxMode.STABLE, t]],
                ])
                vals = np.concatenate([
                    [m, -2.0 * m, m],
                    np.full(4 * L, -dt2),
                    [-dt2 * m * g_ax],
                ])
                bld.add_eq(cols, vals, -dt2 * m * g_ax, "dyn/newton")
    for t in range(T):
        for b in range(B):
            for s in range(4):
                for l in range(L):
                    guard_empty = zs[b, s, l, AnchorState.EMPTY, t]
                    guard_leg = zs[b, s, l, AnchorState.TO_LEG, t]
                    foot_ground = dlg[l, 6, :, t]
                    for ax in range(3):
                        col = f[b, s, l, t, ax]
                        # force shutdown while the anchor is empty
                        bld.add([col, guard_empty], [1.0, BIG_M], -np.inf, BIG_M,
                                "dyn/force-off-empty")
                        bld.add([col, guard_empty], [-1.0, BIG_M], -np.inf, BIG_M,
                                "dyn/force-off-empty")
                        # a leg transmits force only while its foot touches ground
                        cols = np.concatenate([[col, guard_leg], foot_ground])
                        bld.add(cols, np.concatenate([[1.0, BIG_M], np.full(R, -BIG_M)]),
                                -np.inf, BIG_M, "dyn/force-off-airborne-leg")
                        bld.add(cols, np.concatenate([[-1.0, BIG_M], np.full(R, -BIG_M)]),
                                -np.inf, BIG_M, "dyn/force-off-airborne-leg")
                        # tight cap: |f| <= f_max while latched, 0 otherwise
                        arm_leg = [zs[b, s, l, AnchorState.TO_ARM, t], guard_leg]
                        bld.add([col] + arm_leg, [1.0, -cfg.f_max, -cfg.f_max],
                                -np.inf, 0.0, "tighten/force-cap")
                        bld.add([col] + arm_leg, [-1.0, -cfg.f_max, -cfg.f_max],
                                -np.inf, 0.0, "tighten/force-cap")
                    # friction pyramid for a grounded leg contact
                    fx, fy, fz = (f[b, s, l, t, ax] for ax in range(3))
                    slack_cols = np.concatenate([[guard_leg], foot_ground])
                    slack_vals = np.concatenate([[BIG_M], np.full(R, BIG_M)])
                    for sgn in (1.0, -1.0):
                        bld.add(np.concatenate([[fx, fz], slack_cols]),
                                np.concatenate([[sgn, -mu], slack_vals]),
                                -np.inf, 2 * BIG_M, "dyn/friction-x")
                        bld.add(np.concatenate([[fy, fz], slack_cols]),
                                np.concatenate([[sgn, -mu], slack_vals]),
                                -np.inf, 2 * BIG_M, "dyn/friction-y")
                    bld.add(np.concatenate([[fz], slack_cols]),
                            np.concatenate([[-1.0], slack_vals]),
                            -np.inf, 2 * BIG_M, "dyn/friction-z")
    return bld.build()


def build_stability_and_continuity(reg: VariableRegistry, cfg: ScenarioConfig) -> LinearConstraintSet:
    """Initial limb poses, ground-speed limits, support half-spaces,
    latch dwell-time rows, and linear reach envelopes."""
    bld = ConstraintBuilder(reg.size)
    B, L, Sw, T = cfg.n_boxes, cfg.n_limbs, cfg.n_wall_anchors, cfg.horizon
    zs = reg.ids("anchor_state")
    zw = reg.ids("wall_state")
    zac = reg.ids("arm_link")
    zlc = reg.ids("leg_link")
    pb = reg.ids("box_center")
    pl = reg.ids("joint_position")
    rl = reg.ids("joint_rotation")
    dlg = reg.ids("limb_region_ground")
    R = cfg.n_regions
    dp = cfg.ground_speed_limit

    for l, limb in enumerate(cfg.limbs):
        for ax in range(3):
            bld.add_eq([pl[0, l, 0, ax]], [1.0], limb.initial_base_position[ax],
                       "boundary/limb-start")
        for i in range(3):
            for j in range(3):
                bld.add_eq([rl[0, l, 0, i, j]], [1.0], limb.initial_base_rotation[i, j],
                           "boundary/limb-start-rot")
        # reach envelope: a valid linear relaxation of the chain kinematics
        for t in range(T):
            for j in range(1, 7):
                reach = limb.cumulative_reach(j)
                for ax in range(3):
                    for sgn in (1.0, -1.0):
                        bld.add([pl[j, l, t, ax], pl[0, l, t, ax]], [sgn, -sgn],
                                -np.inf, reach, "stab/reach")
        # ground-speed rows, active while the base is on the ground
        for t in range(T - 1):
            base_ground = dlg[l, 0, :, t]
            for j in range(7):
                for ax in range(3):
                    for sgn in (1.0, -1.0):
                        cols = np.concatenate([[pl[j, l, t + 1, ax], pl[j, l, t, ax]],
                                               base_ground])
                        vals = np.concatenate([[sgn, -sgn], np.full(R, BIG_M)])
                        bld.add(cols, vals, -np.inf, dp + BIG_M, "stab/speed")

    for t in range(T):
        for b in range(B):
            box = cfg.boxes[b]
            for s in range(4):
                normal = box.anchor_offsets[s] / np.linalg.norm(box.anchor_offsets[s])
                for l in range(L):
                    # foot stays outboard of its own attachment face
                    cols = np.concatenate([pl[6, l, t, :], pb[b, t, :]])
                    vals = np.concatenate([normal, -normal])
                    bld.add_cond_ge(cols, vals, box.edge_length / 2.0,
                                    [zs[b, s, l, AnchorState.TO_LEG, t]], "stab/support")

    # latch dwell time: after any state change the new state persists for
    # the continuity window (truncated at the horizon)
    n = cfg.continuity_window

    def dwell(series, label):
        # a change at step t freezes the new state over steps t..t+n
        for t in range(1, T):
            for tau in range(t + 1, min(t + n + 1, T)):
                bld.add([series[t], series[t - 1], series[tau]], [1.0, -1.0, -1.0],
                        -np.inf, 0.0, f"cont/{label}-on")
                bld.add([series[t - 1], series[t], series[tau]], [1.0, -1.0, 1.0],
                        -np.inf, 1.0, f"cont/{label}-off")

    for b in range(B):
        for s in range(4):
            for l in range(L):
                dwell(zs[b, s, l, AnchorState.TO_ARM, :], "grasp")
                dwell(zs[b, s, l, AnchorState.TO_LEG, :], "leg")
    for sw in range(Sw):
        for l in range(L):
            dwell(zw[sw, l, WallState.TO_ARM, :], "wall")
    for lpr in range(L):
        for lpo in range(L):
            if lpr != lpo:
                dwell(zac[lpr, lpo, :], "armlink")
                dwell(zlc[lpr, lpo, :], "leglink")
    return bld.build()


_BUILDERS = (
    build_mode_sums,
    build_logic_rules,
    build_latching,
    build_region_membership,
    build_box_dynamics_linear,
    build_stability_and_continuity,
)


def build_all_constraints(reg: VariableRegistry, cfg: ScenarioConfig) -> LinearConstraintSet:
    return LinearConstraintSet.concat([b(reg, cfg) for b in _BUILDERS])


def assemble_mip(reg: VariableRegistry, cfg: ScenarioConfig, var2: VarVector,
                 w: VarVector, w_mip: np.ndarray,
                 constraints: LinearConstraintSet | None = None):
    """Full MIP-step problem: constraint set plus quadratic objective.

    Objective = goal term + force regularization + the weighted consensus
    penalty ||var1 - var2 + w||^2_W.
    """
    if var2.values.shape != (reg.size,) or w.values.shape != (reg.size,):
        raise ValueError("consensus vectors do not match the registry size")
    if w_mip.shape != (reg.size,):
        raise ValueError("weight vector does not match the registry size")
    if np.any(w_mip <= 0):
        raise ValueError("consensus weights must be strictly positive")
    if constraints is None:
        constraints = build_all_constraints(reg, cfg)

    target = var2.values - w.values
    diag = 2.0 * w_mip.copy()
    q = -2.0 * w_mip * target
    const = float(w_mip @ (target * target))

    gw = cfg.solver.goal_weight
    pb = reg.ids("box_center")
    for b in range(cfg.n_boxes):
        for ax in range(3):
            i = pb[b, cfg.horizon - 1, ax]
            diag[i] += 2.0 * gw
            q[i] += -2.0 * gw * cfg.goal_position[ax]
            const += gw * cfg.goal_position[ax] ** 2
    fr = cfg.solver.force_reg
    fid = reg.ids("contact_force").ravel()
    diag[fid] += 2.0 * fr

    objective = QuadraticObjective(sp.diags(diag, format="csc"), q, const)
    return constraints, objective


def fix_binaries(linset: LinearConstraintSet, binary_values: np.ndarray,
                 n_binary: int, n_total: int):
    """Substitute binary values, keeping rows over the continuous slice.

    Rows whose big-M slack is inactive are dropped; singleton rows are
    converted to variable-bound tightenings.  Returns (constraint set over
    continuous columns, extra lower bounds, extra upper bounds).
    """
    A = linset.A.tocsc()
    A_bin = A[:, :n_binary]
    A_cont = A[:, n_binary:].tocsr()
    shift = A_bin @ binary_values
    lo = linset.lo - shift
    hi = linset.hi - shift
    # big-M slack: treat enormous bounds as absent
    lo = np.where(lo <= -BIG_M / 2, -np.inf, lo)
    hi = np.where(hi >= BIG_M / 2, np.inf, hi)

    n_cont = n_total - n_binary
    keep = []
    lb_extra = np.full(n_cont, -np.inf)
    ub_extra = np.full(n_cont, np.inf)
    nnz = np.diff(A_cont.indptr)
    for r in range(A_cont.shape[0]):
        if nnz[r] == 0:
            if lo[r] > 1e-7 or hi[r] < -1e-7:
                raise ValueError(
                    f"binary assignment violates row {r} ({linset.labels[r]})")
            continue
        if not np.isfinite(lo[r]) and not np.isfinite(hi[r]):
            continue
        if nnz[r] == 1:
            c = A_cont.indices[A_cont.indptr[r]]
            v = A_cont.data[A_cont.indptr[r]]
            lov, hiv = (lo[r] / v, hi[r] / v) if v > 0 else (hi[r] / v, lo[r] / v)
            if np.isfinite(lov):
                lb_extra[c] = max(lb_extra[c], lov)
            if np.isfinite(hiv):
                ub_extra[c] = min(ub_extra[c], hiv)
            continue
        keep.append(r)
    keep = np.asarray(keep, dtype=int)
    reduced = LinearConstraintSet(
        A_cont[keep], lo[keep], hi[keep], [linset.labels[r] for r in keep]
    )
    return reduced, lb_extra, ub_extra
