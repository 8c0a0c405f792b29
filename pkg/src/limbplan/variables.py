"""Canonical flat indexing of every decision variable.

Groups are laid out in a fixed order, binaries first, each group occupying
one contiguous flat range in C (lexicographic) index order.  Building the
registry twice from the same scenario yields identical layouts.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .scene import ScenarioConfig

__all__ = ["VarGroup", "VariableRegistry", "VarVector", "build_registry"]

N_BOX_MODES = 4
N_LIMB_MODES = 5
N_ANCHOR_STATES = 3
N_WALL_STATES = 2
N_BOX_ANCHORS = 4
N_BOX_CORNERS = 8
N_JOINT_FRAMES = 7  # frame 0 = base latch, frame 6 = end-effector latch tip


@dataclass(frozen=True)
class VarGroup:
    name: str
    dims: tuple
    offset: int
    binary: bool

    @property
    def size(self) -> int:
        return int(np.prod(self.dims)) if self.dims else 0


class VariableRegistry:
    """Immutable map from (group, multi-index) to flat column index."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.groups: dict[str, VarGroup] = {}
        self._order: list[str] = []
        cursor = 0

        B = cfg.n_boxes
        L = cfg.n_limbs
        Sw = cfg.n_wall_anchors
        T = cfg.horizon
        R = cfg.n_regions

        def add(name, dims, binary):
            nonlocal cursor
            g = VarGroup(name, tuple(int(d) for d in dims), cursor, binary)
            self.groups[name] = g
            self._order.append(name)
            cursor += g.size

        # binary groups
        add("box_mode", (B, N_BOX_MODES, T), True)
        add("limb_mode", (L, N_LIMB_MODES, T), True)
        add("anchor_state", (B, N_BOX_ANCHORS, L, N_ANCHOR_STATES, T), True)
        add("wall_state", (Sw, L, N_WALL_STATES, T), True)
        add("arm_link", (L, L, T), True)   # host limb, added limb
        add("leg_link", (L, L, T), True)
        add("box_region_air", (B, R, T), True)
        add("box_region_ground", (B, R, T), True)
        add("limb_region_air", (L, N_JOINT_FRAMES, R, T), True)
        add("limb_region_ground", (L, N_JOINT_FRAMES, R, T), True)
        self.n_binary = cursor

        # continuous groups
        add("box_center", (B, T, 3), False)
        add("box_rotation", (B, T, 3, 3), False)  # pinned to identity by bounds
        add("box_corner", (B, N_BOX_CORNERS, T, 3), False)
        add("joint_position", (N_JOINT_FRAMES, L, T, 3), False)
        add("joint_rotation", (N_JOINT_FRAMES, L, T, 3, 3), False)
        add("contact_force", (B, N_BOX_ANCHORS, L, T, 3), False)
        for r in range(R):
            nv = cfg.regions[r].n_vertices
            add(f"hull_box_r{r}", (B, N_BOX_CORNERS, nv, T), False)
        for r in range(R):
            nv = cfg.regions[r].n_vertices
            add(f"hull_limb_r{r}", (L, N_JOINT_FRAMES, nv, T), False)

        # separating planes: limb-limb pairs first, then box-limb pairs
        self.pairs = [("limb", l1, "limb", l2) for l1 in range(L) for l2 in range(l1 + 1, L)]
        self.pairs += [("box", b, "limb", l) for b in range(B) for l in range(L)]
        P = len(self.pairs)
        add("plane_normal", (P, T, 3), False)
        add("plane_offset", (P, T), False)

        self.size = cursor
        self.n_continuous = cursor - self.n_binary
        self._build_bounds()

    # -- indexing ----------------------------------------------------------

    def group(self, name: str) -> VarGroup:
        return self.groups[name]

    def group_names(self):
        return tuple(self._order)

    def ids(self, name: str) -> np.ndarray:
        """Flat indices of a whole group, shaped like its dims."""
        g = self.groups[name]
        return np.arange(g.offset, g.offset + g.size, dtype=np.int64).reshape(g.dims)

    def flat_index(self, name: str, multi) -> int:
        g = self.groups[name]
        multi = tuple(int(m) for m in multi)
        if len(multi) != len(g.dims):
            raise IndexError(f"{name}: expected {len(g.dims)} indices, got {len(multi)}")
        for m, d in zip(multi, g.dims):
            if not (0 <= m < d):
                raise IndexError(f"{name}: index {multi} outside dims {g.dims}")
        return g.offset + int(np.ravel_multi_index(multi, g.dims))

    def multi_index(self, name: str, flat: int):
        g = self.groups[name]
        local = flat - g.offset
        if not (0 <= local < g.size):
            raise IndexError(f"{name}: flat index {flat} outside group range")
        return tuple(int(v) for v in np.unravel_index(local, g.dims))

    @property
    def binary_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[: self.n_binary] = True
        return mask

    def binary_group_names(self):
        return tuple(n for n in self._order if self.groups[n].binary)

    def continuous_slice(self) -> slice:
        return slice(self.n_binary, self.size)

    # -- bounds ------------------------------------------------------------

    def _build_bounds(self):
        cfg = self.cfg
        lb = np.zeros(self.size)
        ub = np.zeros(self.size)
        lb[: self.n_binary] = 0.0
        ub[: self.n_binary] = 1.0

        pos_lo, pos_hi = (
            cfg.position_bounds() if (cfg.boxes or cfg.limbs or cfg.regions) else (
                np.full(3, -100.0), np.full(3, 100.0))
        )
        for name in ("box_center", "box_corner", "joint_position"):
            idx = self.ids(name)
            if idx.size:
                lb[idx] = pos_lo
                ub[idx] = pos_hi
        for name in ("box_rotation", "joint_rotation"):
            g = self.groups[name]
            lb[g.offset : g.offset + g.size] = -1.0
            ub[g.offset : g.offset + g.size] = 1.0
        # box orientation is fixed to the identity for the whole horizon
        idx = self.ids("box_rotation")
        if idx.size:
            eye = np.broadcast_to(np.eye(3), idx.shape)
            lb[idx] = eye
            ub[idx] = eye
        g = self.groups["contact_force"]
        lb[g.offset : g.offset + g.size] = -cfg.f_max
        ub[g.offset : g.offset + g.size] = cfg.f_max
        for r in range(cfg.n_regions):
            for name in (f"hull_box_r{r}", f"hull_limb_r{r}"):
                g = self.groups[name]
                lb[g.offset : g.offset + g.size] = 0.0
                ub[g.offset : g.offset + g.size] = 1.0
        g = self.groups["plane_normal"]
        lb[g.offset : g.offset + g.size] = -10.0
        ub[g.offset : g.offset + g.size] = 10.0
        extent = float(np.max(np.abs(np.concatenate([pos_lo, pos_hi])))) + 1.0
        g = self.groups["plane_offset"]
        lb[g.offset : g.offset + g.size] = -30.0 * extent
        ub[g.offset : g.offset + g.size] = 30.0 * extent

        # no self-attachment between limbs
        for name in ("arm_link", "leg_link"):
            idx = self.ids(name)
            for l in range(cfg.n_limbs):
                ub[idx[l, l, :]] = 0.0
        # region-ground flags only exist next to ground-adjacent regions
        for r, region in enumerate(cfg.regions):
            if not region.is_ground_adjacent:
                ub[self.ids("box_region_ground")[:, r, :].ravel()] = 0.0
                ub[self.ids("limb_region_ground")[:, :, r, :].ravel()] = 0.0
        # scenario-level mode pins
        bm = self.ids("box_mode")
        for mode in cfg.forbid_box_modes:
            if bm.size:
                ub[bm[:, int(mode), :].ravel()] = 0.0
        for fm in cfg.forced_box_modes:
            b = cfg.box_index(fm.box)
            lb[bm[b, int(fm.mode), fm.t_start : fm.t_end + 1]] = 1.0

        self.lb = lb
        self.ub = ub

    # -- reporting ---------------------------------------------------------

    def dump_csv(self) -> str:
        out = io.StringIO()
        out.write("group,dims,flat_start,flat_end,binary\n")
        for name in self._order:
            g = self.groups[name]
            dims = "x".join(str(d) for d in g.dims)
            out.write(f"{name},{dims},{g.offset},{g.offset + g.size},{int(g.binary)}\n")
        return out.getvalue()


def build_registry(cfg: ScenarioConfig) -> VariableRegistry:
    return VariableRegistry(cfg)


@dataclass
class VarVector:
    """Dense value array over the registry's flat indexing."""

    registry: VariableRegistry
    values: np.ndarray
    tag: str = ""

    @classmethod
    def zeros(cls, registry: VariableRegistry, tag: str = "") -> "VarVector":
        return cls(registry, np.zeros(registry.size), tag)

    def view(self, name: str) -> np.ndarray:
        """Writable view of one group, shaped like its dims."""
        g = self.registry.groups[name]
        return self.values[g.offset : g.offset + g.size].reshape(g.dims)

    def copy(self, tag: str | None = None) -> "VarVector":
        return VarVector(self.registry, self.values.copy(), self.tag if tag is None else tag)

    def binary_values(self) -> np.ndarray:
        return self.values[: self.registry.n_binary]
