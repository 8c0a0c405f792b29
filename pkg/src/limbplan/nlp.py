"""Nonlinear half of the planning problem.

Residuals live over the continuous slice of the flat vector; the discrete
connection decisions of the latest MIP step enter as fixed values.  Besides
the genuinely nonlinear families (rotation validity, separating planes,
moment balance), the fixed-binary reduction of every linear row is
re-imposed so an accepted iterate also satisfies latching, dynamics and
region membership exactly.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .mip import LinearConstraintSet, QuadraticObjective, build_all_constraints, fix_binaries
from .scene import AnchorState, ScenarioConfig
from .variables import VariableRegistry, VarVector

__all__ = [
    "NonlinearResidualSet",
    "build_kinematics",
    "build_separating_planes",
    "build_moment_balance",
    "assemble_nlp",
    "corner_indices_of_face",
]


def _cids(reg: VariableRegistry, name: str) -> np.ndarray:
    g = reg.groups[name]
    if g.binary:
        raise ValueError(f"{name} is a binary group")
    return reg.ids(name) - reg.n_binary


def _hat(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def corner_indices_of_face(anchor_offset: np.ndarray) -> np.ndarray:
    """Corners of the box face an anchor sits on (sign-lex corner order)."""
    axis = int(np.argmax(np.abs(anchor_offset)))
    positive = anchor_offset[axis] > 0
    idx = []
    for c, signs in enumerate(
        [(sx, sy, sz) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    ):
        if (signs[axis] > 0) == positive:
            idx.append(c)
    return np.asarray(idx, dtype=int)


class LinearResidualFamily:
    """Rows A x - b, either equalities (= 0) or inequalities (<= 0)."""

    def __init__(self, name: str, kind: str, A: sp.csr_matrix, b: np.ndarray, labels=None):
        self.name = name
        self.kind = kind
        self.A = A
        self.b = b
        self.labels = labels or [name] * A.shape[0]

    @property
    def size(self) -> int:
        return self.A.shape[0]

    def eval(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x - self.b

    def jac(self, x: np.ndarray) -> sp.csr_matrix:
        return self.A


class _IndexedFamily:
    """Residual family with a fixed sparsity pattern and varying values."""

    def __init__(self, name: str, kind: str, n: int):
        self.name = name
        self.kind = kind
        self.n = n
        self.size = 0
        self._rows = None
        self._cols = None

    def _finalize(self, rows, cols, size):
        self._rows = np.asarray(rows, dtype=np.int64)
        self._cols = np.asarray(cols, dtype=np.int64)
        self.size = size

    def _matrix(self, data) -> sp.csr_matrix:
        return sp.csr_matrix((data, (self._rows, self._cols)), shape=(self.size, self.n))


class ChainFamily(_IndexedFamily):
    """p[j+1] = p[j] + R[j] off_j, with the tip folded into the last step."""

    def __init__(self, reg: VariableRegistry, cfg: ScenarioConfig):
        super().__init__("kinematics-chain", "eq", reg.n_continuous)
        L, T = cfg.n_limbs, cfg.horizon
        self.pl = _cids(reg, "joint_position")
        self.rl = _cids(reg, "joint_rotation")
        self.offsets = np.stack([l.link_offsets for l in cfg.limbs]) if L else np.zeros((0, 7, 3))
        self.L, self.T = L, T
        rows, cols, data = [], [], []
        r = 0
        for j in range(6):
            for l in range(L):
                for t in range(T):
                    for ax in range(3):
                        rows += [r, r]
                        cols += [self.pl[j + 1, l, t, ax], self.pl[j, l, t, ax]]
                        data += [1.0, -1.0]
                        rows += [r] * 3
                        cols += list(self.rl[j, l, t, ax, :])
                        data += list(-self.offsets[l, j])
                        if j == 5:
                            rows += [r] * 3
                            cols += list(self.rl[6, l, t, ax, :])
                            data += list(-self.offsets[l, 6])
                        r += 1
        self._A = sp.csr_matrix((data, (rows, cols)), shape=(r, self.n))
        self.size = r

    def eval(self, x: np.ndarray) -> np.ndarray:
        return self._A @ x

    def jac(self, x: np.ndarray) -> sp.csr_matrix:
        return self._A


class AxisFamily(_IndexedFamily):
    """Shared joint axis between consecutive frames: R[j-1] z = R[j] z_own."""

    def __init__(self, reg: VariableRegistry, cfg: ScenarioConfig):
        super().__init__("kinematics-axis", "eq", reg.n_continuous)
        L, T = cfg.n_limbs, cfg.horizon
        rl = _cids(reg, "joint_rotation")
        z_prev = np.array([0.0, 0.0, 1.0])
        rows, cols, data = [], [], []
        r = 0
        for j in range(1, 7):
            for l in range(L):
                own = cfg.limbs[l].joint_axes[j - 1]
                for t in range(T):
                    for ax in range(3):
                        rows += [r] * 6
                        cols += list(rl[j - 1, l, t, ax, :]) + list(rl[j, l, t, ax, :])
                        data += list(z_prev) + list(-own)
                        r += 1
        self._A = sp.csr_matrix((data, (rows, cols)), shape=(r, self.n))
        self.size = r

    def eval(self, x: np.ndarray) -> np.ndarray:
        return self._A @ x

    def jac(self, x: np.ndarray) -> sp.csr_matrix:
        return self._A


_TRIU = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


class OrthonormalityFamily(_IndexedFamily):
    """Six independent entries of R R^T - I per rotation frame."""

    def __init__(self, reg: VariableRegistry, cfg: ScenarioConfig):
        super().__init__("rotation-orthonormality", "eq", reg.n_continuous)
        rl = _cids(reg, "joint_rotation")
        self.frames = rl.reshape(-1, 3, 3)  # (F, 3, 3) column ids per frame
        F = self.frames.shape[0]
        self.size = 6 * F
        rows, cols = [], []
        r = 0
        for fidx in range(F):
            ids = self.frames[fidx]
            for (a, b) in _TRIU:
                rows += [r] * (3 if a == b else 6)
                if a == b:
                    cols += list(ids[a])
                else:
                    cols += list(ids[a]) + list(ids[b])
                r += 1
        self._finalize(rows, cols, self.size)

    def _mats(self, x):
        return x[self.frames]  # (F, 3, 3) values

    def eval(self, x: np.ndarray) -> np.ndarray:
        R = self._mats(x)
        G = R @ np.swapaxes(R, 1, 2) - np.eye(3)
        return G[:, [a for a, _ in _TRIU], [b for _, b in _TRIU]].ravel()

    def jac(self, x: np.ndarray) -> sp.csr_matrix:
        R = self._mats(x)
        data = []
        for fidx in range(R.shape[0]):
            M = R[fidx]
            for (a, b) in _TRIU:
                if a == b:
                    data += list(2.0 * M[a])
                else:
                    data += list(M[b]) + list(M[a])
        return self._matrix(np.asarray(data))


class RightHandedFamily(_IndexedFamily):
    """Third column equals the cross product of the first two."""

    def __init__(self, reg: VariableRegistry, cfg: ScenarioConfig):
        super().__init__("rotation-right-handed", "eq", reg.n_continuous)
        rl = _cids(reg, "joint_rotation")
        self.frames = rl.reshape(-1, 3, 3)
        F = self.frames.shape[0]
        self.size = 3 * F
        rows, cols = [], []
        r = 0
        for fidx in range(F):
            ids = self.frames[fidx]
            for i in range(3):
                # residual_i depends on col2[i] and all of col0, col1
                rows += [r] * 7
                cols += [ids[i, 2]] + list(ids[:, 0]) + list(ids[:, 1])
                r += 1
        self._finalize(rows, cols, self.size)

    def eval(self, x: np.ndarray) -> np.ndarray:
        R = x[self.frames]
        res = R[:, :, 2] - np.cross(R[:, :, 0], R[:, :, 1])
        return res.ravel()

    def jac(self, x: np.ndarray) -> sp.csr_matrix:
        R = x[self.frames]
        data = []
        for fidx in range(R.shape[0]):
            c0 = R[fidx, :, 0]
            c1 = R[fidx, :, 1]
            d_c0 = _hat(c1)    # d(-cross(c0, c1))/d c0
            d_c1 = -_hat(c0)   # d(-cross(c0, c1))/d c1
            for i in range(3):
                data += [1.0] + list(d_c0[i]) + list(d_c1[i])
        return self._matrix(np.asarray(data))


class PlanePointFamily(_IndexedFamily):
    """Signed point-plane inequalities  s (a.p - b) <= 0 per sample point."""

    def __init__(self, reg: VariableRegistry, cfg: ScenarioConfig, exempt: set):
        super().__init__("separating-plane-points", "ineq", reg.n_continuous)
        pn = _cids(reg, "plane_normal")
        po = _cids(reg, "plane_offset")
        pl = _cids(reg, "joint_position")
        cb = _cids(reg, "box_corner")
        entries = []  # (a_ids(3), b_id, point_ids(3), sign)
        for pidx, (kind_a, ia, kind_b, ib) in enumerate(reg.pairs):
            for t in range(cfg.horizon):
                for side, (kind, body) in enumerate(((kind_a, ia), (kind_b, ib))):
                    sign = 1.0 if side == 0 else -1.0
                    if kind == "box":
                        pts = [("box", body, c, cb[body, c, t, :]) for c in range(8)]
                    else:
                        pts = [("limb", body, j, pl[j, body, t, :]) for j in range(7)]
                    for kindp, body_, pt, ids in pts:
                        if (pidx, t, kindp, body_, pt) in exempt:
                            continue
                        entries.append((pn[pidx, t, :], po[pidx, t], ids, sign))
        self.entries = entries
        self.size = len(entries)
        rows, cols = [], []
        for r, (aid, bid, pid, _) in enumerate(entries):
            rows += [r] * 7
            cols += list(aid) + [bid] + list(pid)
        self._finalize(rows, cols, self.size)
        self._aid = np.array([e[0] for e in entries], dtype=np.int64).reshape(-1, 3) \
            if entries else np.zeros((0, 3), dtype=np.int64)
        self._bid = np.array([e[1] for e in entries], dtype=np.int64)
        self._pid = np.array([e[2] for e in entries], dtype=np.int64).reshape(-1, 3) \
            if entries else np.zeros((0, 3), dtype=np.int64)
        self._sign = np.array([e[3] for e in entries])

    def eval(self, x: np.ndarray) -> np.ndarray:
        if not self.size:
            return np.zeros(0)
        a = x[self._aid]
        b = x[self._bid]
        p = x[self._pid]
        return self._sign * (np.sum(a * p, axis=1) - b)

    def jac(self, x: np.ndarray) -> sp.csr_matrix:
        if not self.size:
            return sp.csr_matrix((0, self.n))
        a = x[self._aid]
        p = x[self._pid]
        s = self._sign[:, None]
        data = np.concatenate([s * p, -self._sign[:, None], s * a], axis=1).ravel()
        return self._matrix(data)


class PlaneNormFamily(_IndexedFamily):
    """Nondegeneracy of each plane normal: a.a >= 0.5."""

    def __init__(self, reg: VariableRegistry, cfg: ScenarioConfig, active_pairs: set):
        super().__init__("separating-plane-normal", "ineq", reg.n_continuous)
        pn = _cids(reg, "plane_normal")
        ids = []
        for pidx in range(len(reg.pairs)):
            for t in range(cfg.horizon):
                if (pidx, t) in active_pairs:
                    ids.append(pn[pidx, t, :])
        self._aid = np.asarray(ids, dtype=np.int64).reshape(-1, 3)
        self.size = self._aid.shape[0]
        rows = np.repeat(np.arange(self.size), 3)
        self._finalize(rows, self._aid.ravel(), self.size)

    def eval(self, x: np.ndarray) -> np.ndarray:
        a = x[self._aid]
        return 0.5 - np.sum(a * a, axis=1)

    def jac(self, x: np.ndarray) -> sp.csr_matrix:
        a = x[self._aid]
        return self._matrix((-2.0 * a).ravel())


class MomentBalanceFamily(_IndexedFamily):
    """Sum over contacts of (tip - box center) x force = 0 per box and step."""

    def __init__(self, reg: VariableRegistry, cfg: ScenarioConfig):
        super().__init__("moment-balance", "eq", reg.n_continuous)
        self.B, self.L, self.T = cfg.n_boxes, cfg.n_limbs, cfg.horizon
        self.pb = _cids(reg, "box_center")
        self.pl = _cids(reg, "joint_position")
        self.f = _cids(reg, "contact_force")
        self.size = 3 * self.B * self.T
        rows, cols = [], []
        r = 0
        for b in range(self.B):
            for t in range(self.T):
                for i in range(3):
                    for s in range(4):
                        for l in range(self.L):
                            rows += [r] * 3
                            cols += list(self.f[b, s, l, t, :])
                    for l in range(self.L):
                        rows += [r] * 6
                        cols += list(self.pl[6, l, t, :]) + list(self.pb[b, t, :])
                    r += 1
        self._finalize(rows, cols, self.size)

    def eval(self, x: np.ndarray) -> np.ndarray:
        res = np.zeros((self.B, self.T, 3))
        for b in range(self.B):
            for t in range(self.T):
                pb = x[self.pb[b, t, :]]
                for l in range(self.L):
                    d = x[self.pl[6, l, t, :]] - pb
                    for s in range(4):
                        res[b, t] += np.cross(d, x[self.f[b, s, l, t, :]])
        return res.ravel()

    def jac(self, x: np.ndarray) -> sp.csr_matrix:
        data = []
        for b in range(self.B):
            for t in range(self.T):
                pb = x[self.pb[b, t, :]]
                dmat = [_hat(x[self.pl[6, l, t, :]] - pb) for l in range(self.L)]
                fsum = [
                    sum(x[self.f[b, s, l, t, :]] for s in range(4)) for l in range(self.L)
                ]
                for i in range(3):
                    for s in range(4):
                        for l in range(self.L):
                            data += list(dmat[l][i])
                    for l in range(self.L):
                        # d/d tip = -hat(f_total), d/d box center = +hat(f_total)
                        data += list(-_hat(fsum[l])[i]) + list(_hat(fsum[l])[i])
        return self._matrix(np.asarray(data)) if data else sp.csr_matrix((self.size, self.n))


class NonlinearResidualSet:
    """Stacked residual families over the continuous slice."""

    def __init__(self, families: list, lb: np.ndarray, ub: np.ndarray,
                 fixed_binaries: np.ndarray | None = None):
        self.families = families
        self.lb = lb
        self.ub = ub
        self.n = len(lb)
        self.fixed_binaries = fixed_binaries
        self._eq = [f for f in families if f.kind == "eq"]
        self._ineq = [f for f in families if f.kind == "ineq"]
        self.n_eq = sum(f.size for f in self._eq)
        self.n_ineq = sum(f.size for f in self._ineq)

    def eval_eq(self, x: np.ndarray) -> np.ndarray:
        if not self._eq:
            return np.zeros(0)
        return np.concatenate([f.eval(x) for f in self._eq])

    def jac_eq(self, x: np.ndarray) -> sp.csr_matrix:
        if not self._eq:
            return sp.csr_matrix((0, self.n))
        return sp.vstack([f.jac(x) for f in self._eq], format="csr")

    def eval_ineq(self, x: np.ndarray) -> np.ndarray:
        if not self._ineq:
            return np.zeros(0)
        return np.concatenate([f.eval(x) for f in self._ineq])

    def jac_ineq(self, x: np.ndarray) -> sp.csr_matrix:
        if not self._ineq:
            return sp.csr_matrix((0, self.n))
        return sp.vstack([f.jac(x) for f in self._ineq], format="csr")

    def max_violation(self, x: np.ndarray) -> float:
        vg = np.max(np.abs(self.eval_eq(x)), initial=0.0)
        vh = np.max(self.eval_ineq(x), initial=0.0)
        return max(vg, vh)


def build_kinematics(reg: VariableRegistry, cfg: ScenarioConfig) -> list:
    """Chain, axis-alignment, orthonormality and handedness families."""
    return [
        ChainFamily(reg, cfg),
        AxisFamily(reg, cfg),
        OrthonormalityFamily(reg, cfg),
        RightHandedFamily(reg, cfg),
    ]


def _latch_exemptions(reg: VariableRegistry, cfg: ScenarioConfig,
                      fixed_binaries: np.ndarray) -> set:
    """Sample points sitting exactly on a latch are released from their
    pair's separation rows (the latched frame and the touched face)."""
    exempt = set()
    zs = reg.ids("anchor_state")
    zac = reg.ids("arm_link")
    zlc = reg.ids("leg_link")
    pair_index = {key: i for i, key in enumerate(reg.pairs)}

    def limb_pair(l1, l2):
        return pair_index[("limb", min(l1, l2), "limb", max(l1, l2))]

    for t in range(cfg.horizon):
        for b in range(cfg.n_boxes):
            face = [corner_indices_of_face(cfg.boxes[b].anchor_offsets[s]) for s in range(4)]
            for s in range(4):
                for l in range(cfg.n_limbs):
                    pidx = pair_index[("box", b, "limb", l)]
                    if fixed_binaries[zs[b, s, l, AnchorState.TO_ARM, t]] > 0.5:
                        exempt.add((pidx, t, "limb", l, 6))
                        for c in face[s]:
                            exempt.add((pidx, t, "box", b, int(c)))
                    if fixed_binaries[zs[b, s, l, AnchorState.TO_LEG, t]] > 0.5:
                        exempt.add((pidx, t, "limb", l, 0))
                        for c in face[s]:
                            exempt.add((pidx, t, "box", b, int(c)))
        for lpr in range(cfg.n_limbs):
            for lpo in range(cfg.n_limbs):
                if lpr == lpo:
                    continue
                linked = (fixed_binaries[zac[lpr, lpo, t]] > 0.5
                          or fixed_binaries[zlc[lpr, lpo, t]] > 0.5)
                if linked:
                    pidx = limb_pair(lpr, lpo)
                    exempt.add((pidx, t, "limb", lpr, 6))
                    exempt.add((pidx, t, "limb", lpo, 0))
    return exempt


def build_separating_planes(reg: VariableRegistry, cfg: ScenarioConfig,
                            fixed_binaries: np.ndarray | None = None) -> list:
    """Point-side inequalities plus the nonzero-normal rows.

    Without fixed binaries every pair is fully constrained; with them, the
    latched frames and touched faces are exempted.
    """
    if fixed_binaries is None:
        exempt: set = set()
    else:
        exempt = _latch_exemptions(reg, cfg, fixed_binaries)
    pts = PlanePointFamily(reg, cfg, exempt)
    active = {(p, t) for p in range(len(reg.pairs)) for t in range(cfg.horizon)}
    return [pts, PlaneNormFamily(reg, cfg, active)]


def build_moment_balance(reg: VariableRegistry, cfg: ScenarioConfig,
                         fixed_binaries: np.ndarray | None = None) -> list:
    """Rotational equilibrium of each box; unconnected forces are pinned
    to zero by the imported linear rows, so all contacts can be summed."""
    return [MomentBalanceFamily(reg, cfg)]


def assemble_nlp(reg: VariableRegistry, cfg: ScenarioConfig,
                 fixed_binaries: np.ndarray, var1: VarVector, w: VarVector,
                 w_nlp: np.ndarray, constraints: LinearConstraintSet | None = None):
    """Projection problem of the NLP step.

    Objective: ||x - (var1 + w)||^2 weighted by the continuous slice of
    w_nlp.  Constraints: nonlinear families plus every linear row with the
    binaries substituted in.
    """
    if fixed_binaries is None or np.shape(fixed_binaries) != (reg.n_binary,):
        raise ValueError("fixed binary assignment missing or of wrong length")
    if constraints is None:
        constraints = build_all_constraints(reg, cfg)
    reduced, lb_extra, ub_extra = fix_binaries(
        constraints, fixed_binaries, reg.n_binary, reg.size)
    cont = reg.continuous_slice()
    lb = np.maximum(reg.lb[cont], lb_extra)
    ub = np.minimum(reg.ub[cont], ub_extra)
    if np.any(lb > ub + 1e-9):
        bad = int(np.argmax(lb - ub))
        raise ValueError(f"binary assignment pins continuous variable {bad} infeasibly")
    ub = np.maximum(lb, ub)

    eq_mask = reduced.eq_mask
    fams = []
    if int(eq_mask.sum()):
        fams.append(LinearResidualFamily(
            "linear-equalities", "eq", reduced.A[eq_mask], reduced.hi[eq_mask],
            [reduced.labels[i] for i in np.flatnonzero(eq_mask)]))
    in_mask = ~eq_mask
    ups = in_mask & np.isfinite(reduced.hi)
    downs = in_mask & np.isfinite(reduced.lo)
    if int(ups.sum()) or int(downs.sum()):
        A_in = sp.vstack([reduced.A[ups], -reduced.A[downs]], format="csr")
        b_in = np.concatenate([reduced.hi[ups], -reduced.lo[downs]])
        labels = [reduced.labels[i] for i in np.flatnonzero(ups)] + \
                 [reduced.labels[i] for i in np.flatnonzero(downs)]
        fams.append(LinearResidualFamily("linear-inequalities", "ineq", A_in, b_in, labels))
    fams += build_kinematics(reg, cfg)
    fams += build_separating_planes(reg, cfg, fixed_binaries)
    fams += build_moment_balance(reg, cfg, fixed_binaries)
    residuals = NonlinearResidualSet(fams, lb, ub, fixed_binaries)

    wc = w_nlp[cont]
    if np.any(wc <= 0):
        raise ValueError("consensus weights must be strictly positive")
    target = (var1.values + w.values)[cont]
    objective = QuadraticObjective(
        sp.diags(2.0 * wc, format="csc"), -2.0 * wc * target,
        float(wc @ (target * target)))
    return residuals, objective
