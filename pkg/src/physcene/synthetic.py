"""Procedural bedroom-like layouts used as training data and metric fixtures.

Clean scenes are built by rejection sampling so that every object is inside
the room, no two objects overlap and the free floor forms one walkable
region. Optional injectors then add collisions, out-of-bounds objects or a
room-splitting blocker.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import shapely

from physcene.geometry import OrientedBox3, obb_iou_3d
from physcene.reachability import AgentSpec, connected_areas, walkable_map
from physcene.scene import DEFAULT_SLOTS, FEATURE_DIM, FloorPlan, ObjectSlot, SceneLayout, Taxonomy, pad_slots

logger = logging.getLogger(__name__)

ANCHOR_SEED = 7_301
ANCHOR_SCALE = 0.5
WALL_GAP = 0.02


@dataclass(frozen=True)
class CategorySpec:
    """Size prior ``mean +/- spread`` (uniform, meters) and placement rule."""

    size_mean: tuple[float, float, float]
    size_spread: tuple[float, float, float]
    probability: float
    max_count: int = 1
    wall_aligned: bool = True
    yaw_jitter: float = 0.0


DEFAULT_CATEGORY_SPECS: dict[str, CategorySpec] = {
    "bed": CategorySpec((1.6, 0.5, 2.0), (0.3, 0.1, 0.15), 0.95),
    "wardrobe": CategorySpec((1.2, 2.0, 0.6), (0.4, 0.2, 0.05), 0.7),
    "nightstand": CategorySpec((0.45, 0.55, 0.4), (0.05, 0.05, 0.05), 0.8, max_count=2),
    "desk": CategorySpec((1.2, 0.75, 0.6), (0.2, 0.05, 0.1), 0.5),
    "chair": CategorySpec((0.5, 0.9, 0.5), (0.05, 0.1, 0.05), 0.5, max_count=2, wall_aligned=False, yaw_jitter=0.3),
    "table": CategorySpec((0.8, 0.7, 0.8), (0.2, 0.05, 0.2), 0.2, wall_aligned=False),
    "sofa": CategorySpec((1.8, 0.8, 0.85), (0.3, 0.05, 0.05), 0.2),
    "bookshelf": CategorySpec((0.9, 1.8, 0.35), (0.2, 0.2, 0.05), 0.35),
}


@dataclass
class GeneratorConfig:
    """Room family, object priors, rejection budget and violation injectors.

    ``collision_prob`` and ``blocking_prob`` apply once per scene;
    ``out_of_bounds_prob`` applies per object. ``corrupted=True`` replaces
    the three with rates resembling a real, unclean dataset.
    """

    seed: int = 0
    room_families: tuple[str, ...] = ("rectangle", "l_shape")
    family_weights: tuple[float, ...] = (0.7, 0.3)
    side_range: tuple[float, float] = (3.0, 6.0)
    object_count: tuple[int, int] = (2, 10)
    categories: dict[str, CategorySpec] = field(default_factory=lambda: dict(DEFAULT_CATEGORY_SPECS))
    max_attempts: int = 60
    feature_noise: float = 0.05
    agent_width: float = 0.3
    resolution: float = 0.1
    n_slots: int = DEFAULT_SLOTS
    collision_prob: float = 0.0
    out_of_bounds_prob: float = 0.0
    blocking_prob: float = 0.0
    corrupted: bool = False

    def __post_init__(self):
        lo, hi = self.side_range
        if not 0 < lo < hi:
            raise ValueError("side_range must satisfy 0 < lo < hi")
        cmin, cmax = self.object_count
        if not 0 <= cmin <= cmax <= self.n_slots:
            raise ValueError("object_count must satisfy 0 <= lo <= hi <= n_slots")
        if len(self.family_weights) != len(self.room_families) or any(w < 0 for w in self.family_weights):
            raise ValueError("family_weights must be non-negative, one per room family")
        for fam in self.room_families:
            if fam not in ("rectangle", "l_shape"):
                raise ValueError(f"unknown room family {fam!r}")
        for name in ("collision_prob", "out_of_bounds_prob", "blocking_prob", "feature_noise"):
            v = getattr(self, name)
            if name != "feature_noise" and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
            if v < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be positive")
        if self.corrupted:
            self.collision_prob, self.out_of_bounds_prob, self.blocking_prob = 0.45, 0.25, 0.15

    @property
    def taxonomy(self) -> Taxonomy:
        return Taxonomy(tuple(self.categories))

    @property
    def clean(self) -> bool:
        return self.collision_prob == 0 and self.out_of_bounds_prob == 0 and self.blocking_prob == 0


@dataclass
class Sample:
    floor: FloorPlan
    scene: SceneLayout
    flagged: bool = False
    violations: tuple[str, ...] = ()


def category_anchors(taxonomy: Taxonomy) -> np.ndarray:
    """Fixed per-category feature anchors shared by scenes and the asset catalog."""
    rng = np.random.default_rng(ANCHOR_SEED)
    return rng.normal(0.0, ANCHOR_SCALE, size=(taxonomy.n_named, FEATURE_DIM))


def _round(v: float) -> float:
    return round(v * 10.0) / 10.0


def generate_floor(cfg: GeneratorConfig, rng: np.random.Generator, floor_id: str = "") -> FloorPlan:
    """Rectangle or L-shaped room centered on the origin, sides rounded to 10 cm."""
    lo, hi = cfg.side_range
    w = min(max(_round(rng.uniform(lo, hi)), lo), hi)
    h = min(max(_round(rng.uniform(lo, hi)), lo), hi)
    p = np.asarray(cfg.family_weights, dtype=float)
    family = cfg.room_families[int(rng.choice(len(p), p=p / p.sum()))]
    x0, x1, z0, z1 = -w / 2, w / 2, -h / 2, h / 2
    if family == "rectangle":
        verts = [(x0, z0), (x1, z0), (x1, z1), (x0, z1)]
    else:
        cw = _round(rng.uniform(0.3, 0.5) * w)
        ch = _round(rng.uniform(0.3, 0.5) * h)
        verts = [(x0, z0), (x1, z0), (x1, z1 - ch), (x1 - cw, z1 - ch), (x1 - cw, z1), (x0, z1)]
        sx, sz = rng.choice([-1.0, 1.0], size=2)
        verts = [(sx * x, sz * z) for x, z in verts]
        if sx * sz < 0:
            verts = verts[::-1]
    return FloorPlan(np.array(verts, dtype=float), floor_id)


def _yaw_facing(normal: np.ndarray) -> float:
    # local +z (the front) rotated by yaw is (-sin, cos)
    return math.atan2(-normal[0], normal[1])


def _propose(spec: CategorySpec, floor: FloorPlan, rng: np.random.Generator) -> Optional[OrientedBox3]:
    size = np.asarray(spec.size_mean) + rng.uniform(-1.0, 1.0, 3) * np.asarray(spec.size_spread)
    size = np.maximum(size, 0.05)
    if spec.wall_aligned:
        verts = floor.vertices
        edges = np.roll(verts, -1, axis=0) - verts
        lengths = np.hypot(edges[:, 0], edges[:, 1])
        fits = lengths >= size[0] + 2 * WALL_GAP
        if not fits.any():
            return None
        p = np.where(fits, lengths, 0.0)
        k = int(rng.choice(len(p), p=p / p.sum()))
        d = edges[k] / lengths[k]
        n = np.array([-d[1], d[0]])
        t = rng.uniform(size[0] / 2 + WALL_GAP, lengths[k] - size[0] / 2 - WALL_GAP)
        xz = verts[k] + d * t + n * (size[2] / 2 + WALL_GAP)
        yaw = _yaw_facing(n)
    else:
        xmin, zmin, xmax, zmax = floor.polygon.bounds()
        xz = np.array([rng.uniform(xmin, xmax), rng.uniform(zmin, zmax)])
        yaw = rng.integers(4) * math.pi / 2 + (rng.normal(0.0, spec.yaw_jitter) if spec.yaw_jitter else 0.0)
    return OrientedBox3((xz[0], size[1] / 2, xz[1]), size / 2, math.remainder(yaw, 2 * math.pi))


def _contained(box: OrientedBox3, shape) -> bool:
    return bool(shape.covers(shapely.Polygon(box.footprint_corners())))


def _single_region(floor: FloorPlan, boxes: Sequence[OrientedBox3], agent: AgentSpec, resolution: float) -> bool:
    return len(connected_areas(walkable_map(floor, boxes, agent, resolution))) == 1


def _slot(taxonomy: Taxonomy, anchors: np.ndarray, name: str, box: OrientedBox3, rng, noise: float) -> ObjectSlot:
    idx = taxonomy.index(name)
    feat = anchors[idx] + rng.normal(0.0, noise, FEATURE_DIM)
    return ObjectSlot.make(taxonomy, idx, 2.0 * box.half_extents, box.yaw, box.center, feat)


def _clean_objects(cfg: GeneratorConfig, floor: FloorPlan, rng: np.random.Generator):
    taxonomy = cfg.taxonomy
    anchors = category_anchors(taxonomy)
    agent = AgentSpec(width=cfg.agent_width)
    shape = shapely.Polygon(floor.vertices)
    target = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    wanted: list[str] = []
    for name, spec in cfg.categories.items():
        for _ in range(spec.max_count):
            if rng.random() < spec.probability:
                wanted.append(name)
    wanted = wanted[:target]
    placed: list[tuple[str, OrientedBox3]] = []
    flagged = False
    for name in wanted:
        spec = cfg.categories[name]
        for _ in range(cfg.max_attempts):
            box = _propose(spec, floor, rng)
            if box is None or not _contained(box, shape):
                continue
            if any(obb_iou_3d(box, other) > 0.0 for _, other in placed):
                continue
            boxes = [b for _, b in placed] + [box]
            if not _single_region(floor, boxes, agent, cfg.resolution):
                continue
            placed.append((name, box))
            break
        else:
            flagged = True
            logger.debug("gave up placing a %s after %d attempts", name, cfg.max_attempts)
    slots = [_slot(taxonomy, anchors, n, b, rng, cfg.feature_noise) for n, b in placed]
    return slots, flagged


def _inject_collision(slots: list[ObjectSlot], rng: np.random.Generator) -> None:
    i = int(rng.integers(len(slots)))
    host = slots[i]
    if len(slots) < 2:
        clone = host.copy()
        slots.append(clone)
        j = len(slots) - 1
    else:
        j = int(rng.choice([k for k in range(len(slots)) if k != i]))
    guest = slots[j]
    reach = 0.3 * min(host.size[0], host.size[2], guest.size[0], guest.size[2])
    offset = rng.uniform(-1.0, 1.0, 2) * reach
    guest.location = np.array([host.location[0] + offset[0], guest.size[1] / 2, host.location[2] + offset[1]])


def _inject_out_of_bounds(slot: ObjectSlot, floor: FloorPlan, rng: np.random.Generator) -> None:
    verts = floor.vertices
    edges = np.roll(verts, -1, axis=0) - verts
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    k = int(rng.choice(len(verts), p=lengths / lengths.sum()))
    xz = verts[k] + edges[k] * rng.uniform(0.3, 0.7)
    slot.location = np.array([xz[0], slot.location[1], xz[1]])


def _blocker(cfg: GeneratorConfig, floor: FloorPlan, anchors: np.ndarray, rng) -> ObjectSlot:
    """A long bookshelf across the room's shorter extent through its center."""
    xmin, zmin, xmax, zmax = floor.polygon.bounds()
    cx, cz = (xmin + xmax) / 2, (zmin + zmax) / 2
    taxonomy = cfg.taxonomy
    name = "bookshelf" if "bookshelf" in taxonomy.categories else taxonomy.categories[0]
    if xmax - xmin <= zmax - zmin:
        length, yaw = xmax - xmin - 2 * WALL_GAP, 0.0
    else:
        length, yaw = zmax - zmin - 2 * WALL_GAP, math.pi / 2
    box = OrientedBox3((cx, 0.9, cz), (length / 2, 0.9, 0.2), yaw)
    return _slot(taxonomy, anchors, name, box, rng, cfg.feature_noise)


def generate_sample(cfg: GeneratorConfig, floor: FloorPlan, rng: np.random.Generator) -> Sample:
    """One scene on ``floor`` with its flag and list of injected violations."""
    slots, flagged = _clean_objects(cfg, floor, rng)
    violations: list[str] = []
    anchors = category_anchors(cfg.taxonomy)
    if cfg.blocking_prob and rng.random() < cfg.blocking_prob and len(slots) < cfg.n_slots:
        slots.append(_blocker(cfg, floor, anchors, rng))
        violations.append("blocking")
    if cfg.collision_prob and slots and rng.random() < cfg.collision_prob:
        if len(slots) >= 2 or len(slots) < cfg.n_slots:
            _inject_collision(slots, rng)
            violations.append("collision")
    if cfg.out_of_bounds_prob:
        for slot in slots:
            if rng.random() < cfg.out_of_bounds_prob:
                _inject_out_of_bounds(slot, floor, rng)
                violations.append("out_of_bounds")
    scene = SceneLayout(pad_slots(slots, cfg.taxonomy, cfg.n_slots), floor.floor_id)
    return Sample(floor, scene, flagged, tuple(violations))


def generate_scene(cfg: GeneratorConfig, floor: FloorPlan, rng: np.random.Generator) -> SceneLayout:
    return generate_sample(cfg, floor, rng).scene


def index_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per scene index so any subset regenerates identically."""
    return np.random.default_rng([seed, index])


def generate_dataset(cfg: GeneratorConfig, n: int, start: int = 0) -> list[Sample]:
    out = []
    for i in range(start, start + n):
        rng = index_rng(cfg.seed, i)
        floor = generate_floor(cfg, rng, floor_id=f"room-{i:05d}")
        out.append(generate_sample(cfg, floor, rng))
    return out


def split(dataset: Sequence, ratios: Sequence[float] = (0.8, 0.1, 0.1), rng: Optional[np.random.Generator] = None):
    """Disjoint, exhaustive split into ``len(ratios)`` parts (train/val/test by default).

    Part sizes are ``floor(ratio * n)`` with the remainder given to the first part.
    """
    ratios = [float(r) for r in ratios]
    if not ratios or any(r < 0 or not math.isfinite(r) for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    n = len(dataset)
    rng = rng if rng is not None else np.random.default_rng(0)
    order = rng.permutation(n)
    counts = [int(math.floor(r * n + 1e-9)) for r in ratios]
    counts[0] += n - sum(counts)
    parts, cursor = [], 0
    for c in counts:
        parts.append([dataset[int(k)] for k in order[cursor : cursor + c]])
        cursor += c
    return tuple(parts)
