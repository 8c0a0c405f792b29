"""World model: boxes, limb units, anchor sites, convex regions.

Scenario files are YAML documents with top-level keys ``boxes``, ``limbs``,
``anchors``, ``regions``, ``goal`` and ``params``.  Lengths are meters,
masses kilograms, angles radians.  Unknown keys are rejected so that typos
fail loudly instead of silently changing the problem.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import yaml
from scipy.optimize import linprog

__all__ = [
    "BoxMode",
    "LimbMode",
    "AnchorState",
    "WallState",
    "BoxSpec",
    "LimbSpec",
    "AnchorSite",
    "ConvexRegion",
    "SolverParams",
    "ForcedBoxMode",
    "ScenarioConfig",
    "ScenarioError",
    "ScenarioParseError",
    "ScenarioValidationError",
    "parse_scenario",
    "load_scenario",
    "serialize_scenario",
    "point_in_region",
    "region_weights",
    "rotation_from_rpy",
]

# Seven link lengths of one limb unit, meters, base latch to end latch.
DEFAULT_LINK_LENGTHS = (0.05, 0.074, 0.33, 0.078, 0.33, 0.074, 0.05)

ROTATION_TOL = 1e-9


class BoxMode(IntEnum):
    """Discrete role of a box at one timestep."""

    STABLE = 0      # resting on the ground, gravity carried by the floor
    FREE = 1        # airborne, subject to gravity
    MANIPULATED = 2  # held by one or more arms
    QUADRUPED = 3   # serving as the body of a four-legged walker


class LimbMode(IntEnum):
    """Discrete role of a limb unit at one timestep."""

    FREE = 0
    ARM = 1
    ADD_ARM = 2
    LEG = 3
    ADD_LEG = 4


class AnchorState(IntEnum):
    """Connection state of one box anchor point toward one limb."""

    EMPTY = 0
    TO_ARM = 1
    TO_LEG = 2


class WallState(IntEnum):
    """Connection state of one wall/ground anchor toward one limb."""

    EMPTY = 0
    TO_ARM = 1


BOX_MODE_NAMES = {m.name.lower(): m for m in BoxMode}
LIMB_MODE_NAMES = {m.name.lower(): m for m in LimbMode}


class ScenarioError(ValueError):
    """Base class for scenario file problems."""


class ScenarioParseError(ScenarioError):
    """The document does not match the schema; message names the path."""


class ScenarioValidationError(ScenarioError):
    """The document parses but violates a model invariant."""


def _as_vec3(value, path: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,):
        raise ScenarioParseError(f"{path}: expected a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ScenarioParseError(f"{path}: non-finite entry")
    return arr


def rotation_from_rpy(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Rotation matrix from roll/pitch/yaw (x, then y, then z axis)."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _check_rotation(r: np.ndarray, path: str) -> np.ndarray:
    if r.shape != (3, 3):
        raise ScenarioParseError(f"{path}: rotation must be 3x3, got {r.shape}")
    err = np.linalg.norm(r @ r.T - np.eye(3))
    if err > ROTATION_TOL:
        raise ScenarioValidationError(
            f"{path}: rotation is not orthonormal (||RR^T - I|| = {err:.2e})"
        )
    if np.linalg.det(r) < 0.0:
        raise ScenarioValidationError(f"{path}: rotation has determinant -1")
    return r


def _parse_rotation(value, path: str) -> np.ndarray:
    if value is None:
        return np.eye(3)
    if isinstance(value, dict):
        _reject_unknown(value, {"rpy"}, path)
        rpy = _as_vec3(value.get("rpy", [0, 0, 0]), f"{path}.rpy")
        return rotation_from_rpy(*rpy)
    arr = np.asarray(value, dtype=float)
    return _check_rotation(arr, path)


def _reject_unknown(mapping: dict, allowed: set, path: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ScenarioParseError(f"{path}: unknown key(s) {sorted(unknown)}")


def _arr_eq(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and np.array_equal(a, b)


def default_anchor_offsets(edge_length: float) -> np.ndarray:
    """Centers of the four side faces of an axis-aligned cube."""
    h = edge_length / 2.0
    return np.array([[h, 0, 0], [-h, 0, 0], [0, h, 0], [0, -h, 0]])


def default_anchor_rotation(normal: np.ndarray) -> np.ndarray:
    """Latch frame on a face: local z along the outward normal.

    Local x is horizontal (world z cross normal), so a limb latched here
    swings its chain in the vertical plane that contains the normal.
    """
    z = normal / np.linalg.norm(normal)
    x = np.cross([0.0, 0.0, 1.0], z)
    nx = np.linalg.norm(x)
    if nx < 1e-12:  # normal parallel to world z; pick world x
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / nx
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def box_corner_offsets(edge_length: float) -> np.ndarray:
    """Eight corner offsets of a cube, sign-lexicographic order."""
    h = edge_length / 2.0
    signs = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
        dtype=float,
    )
    return signs * h


@dataclass(frozen=True, eq=False)
class BoxSpec:
    """A cubic shipping box with four side-face anchor points."""

    id: str
    edge_length: float
    mass: float
    initial_center: np.ndarray
    anchor_offsets: np.ndarray    # (4, 3), one per side face
    anchor_rotations: np.ndarray  # (4, 3, 3), latch frame per anchor

    @property
    def corner_offsets(self) -> np.ndarray:
        return box_corner_offsets(self.edge_length)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BoxSpec)
            and self.id == other.id
            and self.edge_length == other.edge_length
            and self.mass == other.mass
            and _arr_eq(self.initial_center, other.initial_center)
            and _arr_eq(self.anchor_offsets, other.anchor_offsets)
            and _arr_eq(self.anchor_rotations, other.anchor_rotations)
        )


@dataclass(frozen=True, eq=False)
class LimbSpec:
    """One 6-joint limb unit with latches at both ends.

    Frame 0 is the base latch; frame 6 is the end-effector latch tip.  The
    seven constant link offsets are consumed as six chain steps, with the
    last two offsets folded into the final step (frame 5 -> tip).
    """

    id: str
    link_offsets: np.ndarray    # (7, 3) constant offsets, local frames
    joint_axes: np.ndarray      # (6, 3) unit axis of joint j in frame j
    initial_base_position: np.ndarray
    initial_base_rotation: np.ndarray

    @property
    def reach(self) -> float:
        return float(np.sum(np.linalg.norm(self.link_offsets, axis=1)))

    def cumulative_reach(self, j: int) -> float:
        """Upper bound on |p[j] - p[0]| along any axis."""
        k = 7 if j == 6 else j
        return float(np.sum(np.linalg.norm(self.link_offsets[:k], axis=1)))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LimbSpec)
            and self.id == other.id
            and _arr_eq(self.link_offsets, other.link_offsets)
            and _arr_eq(self.joint_axes, other.joint_axes)
            and _arr_eq(self.initial_base_position, other.initial_base_position)
            and _arr_eq(self.initial_base_rotation, other.initial_base_rotation)
        )


@dataclass(frozen=True, eq=False)
class AnchorSite:
    """A latch point on a wall or on the ground."""

    id: str
    kind: str  # "wall" | "ground"
    position: np.ndarray
    rotation: np.ndarray

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, AnchorSite)
            and self.id == other.id
            and self.kind == other.kind
            and _arr_eq(self.position, other.position)
            and _arr_eq(self.rotation, other.rotation)
        )


@dataclass(frozen=True, eq=False)
class ConvexRegion:
    """A vertex-represented convex polytope the bodies must stay inside."""

    id: str
    vertices: np.ndarray  # (V, 3), V >= 4, affinely independent
    is_ground_adjacent: bool = False
    ground_height: float = 0.0

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def is_degenerate(self) -> bool:
        rel = self.vertices[1:] - self.vertices[0]
        return np.linalg.matrix_rank(rel, tol=1e-9) < 3

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ConvexRegion)
            and self.id == other.id
            and _arr_eq(self.vertices, other.vertices)
            and self.is_ground_adjacent == other.is_ground_adjacent
            and self.ground_height == other.ground_height
        )


@dataclass(frozen=True)
class ForcedBoxMode:
    """Pin one box to a mode over an inclusive timestep range."""

    box: str
    mode: BoxMode
    t_start: int
    t_end: int


@dataclass(frozen=True)
class SolverParams:
    """Tunable knobs of the consensus loop and the subproblem solvers."""

    rho: float = 1.5
    iters: int = 15
    w_mip0: float = 1.0
    w_nlp0: float = 1.0
    binary_weight: float = 10.0
    goal_weight: float = 100.0
    force_reg: float = 1e-4
    theta_pos: float = 1e-2
    theta_rot: float = 5e-2
    qp_tol: float = 1e-6
    miqp_gap: float = 1e-4
    nlp_tol: float = 1e-6
    node_limit: int = 5000
    seed: int = 0


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """Immutable description of one planning problem."""

    boxes: tuple
    limbs: tuple
    anchors: tuple
    regions: tuple
    goal_position: np.ndarray
    horizon: int
    dt: float = 1.0
    f_max: float = 20.0
    friction_mu: float = 0.7
    ground_speed_limit: float = 0.5   # meters per step
    continuity_window: int = 3
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    forbid_box_modes: tuple = ()
    forced_box_modes: tuple = ()
    solver: SolverParams = field(default_factory=SolverParams)

    @property
    def n_boxes(self) -> int:
        return len(self.boxes)

    @property
    def n_limbs(self) -> int:
        return len(self.limbs)

    @property
    def n_wall_anchors(self) -> int:
        return len(self.anchors)

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    def box_index(self, box_id: str) -> int:
        for i, b in enumerate(self.boxes):
            if b.id == box_id:
                return i
        raise KeyError(box_id)

    def position_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded AABB of everything in the scene; bounds every point variable."""
        pts = [self.goal_position]
        for r in self.regions:
            pts.append(r.vertices.min(axis=0))
            pts.append(r.vertices.max(axis=0))
        for b in self.boxes:
            pts.append(b.initial_center)
        for l in self.limbs:
            pts.append(l.initial_base_position)
        for a in self.anchors:
            pts.append(a.position)
        pts = np.asarray(pts)
        return pts.min(axis=0) - 1.0, pts.max(axis=0) + 1.0

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ScenarioConfig)
            and self.boxes == other.boxes
            and self.limbs == other.limbs
            and self.anchors == other.anchors
            and self.regions == other.regions
            and _arr_eq(self.goal_position, other.goal_position)
            and self.horizon == other.horizon
            and self.dt == other.dt
            and self.f_max == other.f_max
            and self.friction_mu == other.friction_mu
            and self.ground_speed_limit == other.ground_speed_limit
            and self.continuity_window == other.continuity_window
            and _arr_eq(self.gravity, other.gravity)
            and self.forbid_box_modes == other.forbid_box_modes
            and self.forced_box_modes == other.forced_box_modes
            and self.solver == other.solver
        )


# ---------------------------------------------------------------------------
# parsing


def _parse_box(raw: dict, idx: int) -> BoxSpec:
    path = f"boxes[{idx}]"
    if not isinstance(raw, dict):
        raise ScenarioParseError(f"{path}: expected a mapping")
    _reject_unknown(
        raw, {"id", "edge_length", "mass", "center", "anchor_offsets", "anchor_rotations"}, path
    )
    try:
        edge = float(raw.get("edge_length", 0.30))
        mass = float(raw.get("mass", 1.0))
    except (TypeError, ValueError) as exc:
        raise ScenarioParseError(f"{path}: bad numeric field ({exc})") from None
    center = _as_vec3(raw.get("center", [0, 0, edge / 2]), f"{path}.center")
    if "anchor_offsets" in raw:
        offsets = np.asarray(raw["anchor_offsets"], dtype=float)
        if offsets.shape != (4, 3):
            raise ScenarioParseError(f"{path}.anchor_offsets: expected 4 offset vectors")
    else:
        offsets = default_anchor_offsets(edge)
    if "anchor_rotations" in raw:
        rots = np.stack(
            [
                _parse_rotation(r, f"{path}.anchor_rotations[{k}]")
                for k, r in enumerate(raw["anchor_rotations"])
            ]
        )
        if rots.shape != (4, 3, 3):
            raise ScenarioParseError(f"{path}.anchor_rotations: expected 4 rotations")
    else:
        rots = np.stack([default_anchor_rotation(o) for o in offsets])
    return BoxSpec(
        id=str(raw.get("id", f"box{idx}")),
        edge_length=edge,
        mass=mass,
        initial_center=center,
        anchor_offsets=offsets,
        anchor_rotations=rots,
    )


def _parse_limb(raw: dict, idx: int) -> LimbSpec:
    path = f"limbs[{idx}]"
    if not isinstance(raw, dict):
        raise ScenarioParseError(f"{path}: expected a mapping")
    _reject_unknown(
        raw,
        {"id", "base_position", "base_rotation", "link_lengths", "link_offsets", "joint_axes"},
        path,
    )
    if "link_offsets" in raw:
        offsets = np.asarray(raw["link_offsets"], dtype=float)
    else:
        lengths = raw.get("link_lengths", DEFAULT_LINK_LENGTHS)
        lengths = np.asarray(lengths, dtype=float)
        if lengths.shape != (7,):
            raise ScenarioParseError(f"{path}.link_lengths: expected 7 lengths")
        # Links extend along local x so rotation about the local-z joint
        # axes actually moves the chain.
        offsets = np.zeros((7, 3))
        offsets[:, 0] = lengths
    if offsets.shape != (7, 3):
        raise ScenarioParseError(f"{path}.link_offsets: expected 7 offset vectors")
    if "joint_axes" in raw:
        axes = np.asarray(raw["joint_axes"], dtype=float)
        if axes.shape != (6, 3):
            raise ScenarioParseError(f"{path}.joint_axes: expected 6 axis vectors")
    else:
        axes = np.tile([0.0, 0.0, 1.0], (6, 1))
    return LimbSpec(
        id=str(raw.get("id", f"limb{idx}")),
        link_offsets=offsets,
        joint_axes=axes,
        initial_base_position=_as_vec3(
            raw.get("base_position", [0, 0, 0]), f"{path}.base_position"
        ),
        initial_base_rotation=_parse_rotation(raw.get("base_rotation"), f"{path}.base_rotation"),
    )


def _parse_anchor(raw: dict, idx: int) -> AnchorSite:
    path = f"anchors[{idx}]"
    if not isinstance(raw, dict):
        raise ScenarioParseError(f"{path}: expected a mapping")
    _reject_unknown(raw, {"id", "kind", "position", "rotation"}, path)
    kind = str(raw.get("kind", "wall"))
    if kind not in ("wall", "ground"):
        raise ScenarioParseError(f"{path}.kind: must be 'wall' or 'ground', got {kind!r}")
    return AnchorSite(
        id=str(raw.get("id", f"anchor{idx}")),
        kind=kind,
        position=_as_vec3(raw.get("position", [0, 0, 0]), f"{path}.position"),
        rotation=_parse_rotation(raw.get("rotation"), f"{path}.rotation"),
    )


def _parse_region(raw: dict, idx: int) -> ConvexRegion:
    path = f"regions[{idx}]"
    if not isinstance(raw, dict):
        raise ScenarioParseError(f"{path}: expected a mapping")
    _reject_unknown(raw, {"id", "vertices", "ground", "ground_height", "aabb"}, path)
    if "aabb" in raw:
        if "vertices" in raw:
            raise ScenarioParseError(f"{path}: give either 'vertices' or 'aabb', not both")
        box = np.asarray(raw["aabb"], dtype=float)
        if box.shape != (2, 3):
            raise ScenarioParseError(f"{path}.aabb: expected [[xmin,ymin,zmin],[xmax,ymax,zmax]]")
        lo, hi = box
        verts = np.array(
            [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
        )
    else:
        verts = np.asarray(raw.get("vertices", []), dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ScenarioParseError(f"{path}.vertices: expected a list of 3-vectors")
    return ConvexRegion(
        id=str(raw.get("id", f"region{idx}")),
        vertices=verts,
        is_ground_adjacent=bool(raw.get("ground", False)),
        ground_height=float(raw.get("ground_height", 0.0)),
    )


_PARAM_KEYS = {
    "horizon",
    "dt",
    "f_max",
    "friction_mu",
    "ground_speed_limit",
    "continuity_window",
    "gravity",
    "forbid_box_modes",
    "forced_box_modes",
    "solver",
}

_SOLVER_KEYS = {f.name for f in dataclasses.fields(SolverParams)}


def _parse_params(raw: dict):
    _reject_unknown(raw, _PARAM_KEYS, "params")
    if "horizon" not in raw:
        raise ScenarioParseError("params.horizon: required")
    forbid = tuple(
        BOX_MODE_NAMES[str(name)]
        if str(name) in BOX_MODE_NAMES
        else _bad_mode(name, "params.forbid_box_modes")
        for name in raw.get("forbid_box_modes", [])
    )
    forced = []
    for k, item in enumerate(raw.get("forced_box_modes", [])):
        p = f"params.forced_box_modes[{k}]"
        _reject_unknown(item, {"box", "mode", "t_start", "t_end"}, p)
        name = str(item.get("mode", ""))
        if name not in BOX_MODE_NAMES:
            _bad_mode(name, p)
        forced.append(
            ForcedBoxMode(
                box=str(item["box"]),
                mode=BOX_MODE_NAMES[name],
                t_start=int(item.get("t_start", 0)),
                t_end=int(item.get("t_end", item.get("t_start", 0))),
            )
        )
    solver_raw = raw.get("solver", {})
    _reject_unknown(solver_raw, _SOLVER_KEYS, "params.solver")
    solver = SolverParams(**{k: type(getattr(SolverParams(), k))(v) for k, v in solver_raw.items()})
    return {
        "horizon": int(raw["horizon"]),
        "dt": float(raw.get("dt", 1.0)),
        "f_max": float(raw.get("f_max", 20.0)),
        "friction_mu": float(raw.get("friction_mu", 0.7)),
        "ground_speed_limit": float(raw.get("ground_speed_limit", 0.5)),
        "continuity_window": int(raw.get("continuity_window", 3)),
        "gravity": _as_vec3(raw.get("gravity", [0, 0, -9.81]), "params.gravity"),
        "forbid_box_modes": forbid,
        "forced_box_modes": tuple(forced),
        "solver": solver,
    }


def _bad_mode(name, path):
    raise ScenarioParseError(
        f"{path}: unknown box mode {name!r}; expected one of {sorted(BOX_MODE_NAMES)}"
    )


def parse_scenario(text: str) -> ScenarioConfig:
    """Parse and validate a scenario document. Raises ScenarioError."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioParseError(f"not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ScenarioParseError("top level: expected a mapping")
    _reject_unknown(raw, {"boxes", "limbs", "anchors", "regions", "goal", "params"}, "top level")
    if "params" not in raw or not isinstance(raw["params"], dict):
        raise ScenarioParseError("params: required mapping")
    params = _parse_params(raw["params"])
    cfg = ScenarioConfig(
        boxes=tuple(_parse_box(b, i) for i, b in enumerate(raw.get("boxes") or [])),
        limbs=tuple(_parse_limb(l, i) for i, l in enumerate(raw.get("limbs") or [])),
        anchors=tuple(_parse_anchor(a, i) for i, a in enumerate(raw.get("anchors") or [])),
        regions=tuple(_parse_region(r, i) for i, r in enumerate(raw.get("regions") or [])),
        goal_position=_as_vec3(raw.get("goal", [0, 0, 0]), "goal"),
        **params,
    )
    validate_scenario(cfg)
    return cfg


def load_scenario(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def validate_scenario(cfg: ScenarioConfig) -> None:
    """Check every model invariant; raises ScenarioValidationError."""
    if cfg.horizon < 2:
        raise ScenarioValidationError(
            "params.horizon: must be >= 2 (finite differences need at least two steps)"
        )
    if cfg.dt <= 0:
        raise ScenarioValidationError("params.dt: must be positive")
    if cfg.f_max <= 0:
        raise ScenarioValidationError("params.f_max: must be positive")
    if not (3 <= cfg.continuity_window <= 5):
        raise ScenarioValidationError("params.continuity_window: must be in [3, 5]")
    ids = [b.id for b in cfg.boxes]
    if len(set(ids)) != len(ids):
        raise ScenarioValidationError("boxes: duplicate id")
    ids = [l.id for l in cfg.limbs]
    if len(set(ids)) != len(ids):
        raise ScenarioValidationError("limbs: duplicate id")

    for b in cfg.boxes:
        if b.edge_length <= 0:
            raise ScenarioValidationError(f"box {b.id}: edge_length must be positive")
        if b.mass <= 0:
            raise ScenarioValidationError(f"box {b.id}: mass must be positive")
        norms = np.linalg.norm(b.anchor_offsets, axis=1)
        if not np.allclose(norms, b.edge_length / 2, atol=1e-9):
            raise ScenarioValidationError(
                f"box {b.id}: anchor offsets must sit at face centers (|o| = edge/2)"
            )
        for k, r in enumerate(b.anchor_rotations):
            _check_rotation(r, f"box {b.id} anchor_rotations[{k}]")
    for l in cfg.limbs:
        if l.link_offsets.shape != (7, 3):
            raise ScenarioValidationError(f"limb {l.id}: needs exactly 7 link offsets")
        axis_norms = np.linalg.norm(l.joint_axes, axis=1)
        if not np.allclose(axis_norms, 1.0, atol=1e-9):
            raise ScenarioValidationError(f"limb {l.id}: joint axes must be unit vectors")
        _check_rotation(l.initial_base_rotation, f"limb {l.id} base_rotation")
    for a in cfg.anchors:
        _check_rotation(a.rotation, f"anchor {a.id} rotation")
    if (cfg.boxes or cfg.limbs) and not cfg.regions:
        raise ScenarioValidationError(
            "regions: at least one convex region is required when bodies exist"
        )
    for r in cfg.regions:
        if r.n_vertices < 4:
            raise ScenarioValidationError(f"region {r.id}: needs at least 4 vertices")
        if r.is_degenerate():
            raise ScenarioValidationError(
                f"region {r.id}: vertices are affinely dependent (degenerate polytope)"
            )

    for m in cfg.forced_box_modes:
        cfg.box_index(m.box)  # raises KeyError -> surface as validation error
        if not (0 <= m.t_start <= m.t_end < cfg.horizon):
            raise ScenarioValidationError(
                f"forced mode on box {m.box}: timestep range outside horizon"
            )
        if m.mode in cfg.forbid_box_modes:
            raise ScenarioValidationError(
                f"forced mode on box {m.box}: mode {m.mode.name} is also forbidden"
            )

    if cfg.regions:
        for b in cfg.boxes:
            if not any(point_in_region(b.initial_center, r, 1e-6) for r in cfg.regions):
                raise ScenarioValidationError(
                    f"box {b.id}: initial center lies outside every region"
                )
        for l in cfg.limbs:
            if not any(
                point_in_region(l.initial_base_position, r, 1e-6) for r in cfg.regions
            ):
                raise ScenarioValidationError(
                    f"limb {l.id}: initial base position lies outside every region"
                )


# ---------------------------------------------------------------------------
# membership test


def region_weights(p: np.ndarray, region: ConvexRegion, tol: float = 1e-8):
    """Convex-combination weights placing p inside the region, or None.

    Solves a small LP minimizing the infinity-norm placement error; p is
    inside iff the optimum is <= tol.
    """
    if region.is_degenerate():
        raise ValueError(f"region {region.id} is degenerate")
    verts = region.vertices
    nv = verts.shape[0]
    # variables: [lambda_1..lambda_nv, t]; minimize t
    c = np.zeros(nv + 1)
    c[-1] = 1.0
    a_ub = np.zeros((6, nv + 1))
    a_ub[:3, :nv] = verts.T
    a_ub[3:, :nv] = -verts.T
    a_ub[:, -1] = -1.0
    b_ub = np.concatenate([p, -p])
    a_eq = np.zeros((1, nv + 1))
    a_eq[0, :nv] = 1.0
    res = linprog(
        c,
        A_ub=a_ub,
        b_ub=b_ub,
        A_eq=a_eq,
        b_eq=[1.0],
        bounds=[(0, 1)] * nv + [(0, None)],
        method="highs",
    )
    if not res.success or res.x[-1] > tol:
        return None
    return res.x[:nv]


def point_in_region(p: np.ndarray, region: ConvexRegion, tol: float = 1e-8) -> bool:
    """True iff p is a convex combination of the region vertices within tol."""
    return region_weights(np.asarray(p, dtype=float), region, tol) is not None


# ---------------------------------------------------------------------------
# serialization


def _rot_to_list(r: np.ndarray):
    return [[float(v) for v in row] for row in r]


def serialize_scenario(cfg: ScenarioConfig) -> str:
    """YAML document that parses back to an identical ScenarioConfig."""
    doc = {
        "boxes": [
            {
                "id": b.id,
                "edge_length": float(b.edge_length),
                "mass": float(b.mass),
                "center": [float(v) for v in b.initial_center],
                "anchor_offsets": _rot_to_list(b.anchor_offsets),
                "anchor_rotations": [_rot_to_list(r) for r in b.anchor_rotations],
            }
            for b in cfg.boxes
        ],
        "limbs": [
            {
                "id": l.id,
                "base_position": [float(v) for v in l.initial_base_position],
                "base_rotation": _rot_to_list(l.initial_base_rotation),
                "link_offsets": _rot_to_list(l.link_offsets),
                "joint_axes": _rot_to_list(l.joint_axes),
            }
            for l in cfg.limbs
        ],
        "anchors": [
            {
                "id": a.id,
                "kind": a.kind,
                "position": [float(v) for v in a.position],
                "rotation": _rot_to_list(a.rotation),
            }
            for a in cfg.anchors
        ],
        "regions": [
            {
                "id": r.id,
                "vertices": _rot_to_list(r.vertices),
                "ground": bool(r.is_ground_adjacent),
                "ground_height": float(r.ground_height),
            }
            for r in cfg.regions
        ],
        "goal": [float(v) for v in cfg.goal_position],
        "params": {
            "horizon": cfg.horizon,
            "dt": float(cfg.dt),
            "f_max": float(cfg.f_max),
            "friction_mu": float(cfg.friction_mu),
            "ground_speed_limit": float(cfg.ground_speed_limit),
            "continuity_window": cfg.continuity_window,
            "gravity": [float(v) for v in cfg.gravity],
            "forbid_box_modes": [m.name.lower() for m in cfg.forbid_box_modes],
            "forced_box_modes": [
                {
                    "box": m.box,
                    "mode": m.mode.name.lower(),
                    "t_start": m.t_start,
                    "t_end": m.t_end,
                }
                for m in cfg.forced_box_modes
            ],
            "solver": dataclasses.asdict(cfg.solver),
        },
    }
    return yaml.safe_dump(doc, sort_keys=False)
