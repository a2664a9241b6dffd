"""Physical plausibility and interactivity metrics over sets of scenes."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import shapely

from physcene.geometry import OrientedBox3, distance_to_boxes, obb_iou_3d
from physcene.reachability import DEFAULT_RESOLUTION, AgentSpec, connected_areas, walkable_map
from physcene.scene import FloorPlan, SceneLayout, Taxonomy, scene_boxes

TAU_COL = 0.005
TAU_OUT = 0.05
DEFAULT_SEED = 0
CKL_SMOOTHING = 1e-6

BoxesLike = SceneLayout | Sequence[OrientedBox3]


def _boxes(scene: BoxesLike) -> list[OrientedBox3]:
    return scene_boxes(scene) if isinstance(scene, SceneLayout) else list(scene)


def colliding_objects(boxes: Sequence[OrientedBox3], tau: float = TAU_COL) -> list[bool]:
    flags = [False] * len(boxes)
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if obb_iou_3d(boxes[i], boxes[j]) > tau:
                flags[i] = flags[j] = True
    return flags


def col_metrics(scenes: Sequence[BoxesLike], tau: float = TAU_COL, pooled: bool = True) -> tuple[float, float]:
    """``(col_obj, col_scene)``.

    ``col_obj`` pools colliding objects over all objects; with
    ``pooled=False`` it is the mean of per-scene rates instead.
    """
    if not scenes:
        return 0.0, 0.0
    n_obj = n_col = 0
    scene_hits = 0
    per_scene = []
    for scene in scenes:
        flags = colliding_objects(_boxes(scene), tau)
        n_obj += len(flags)
        n_col += sum(flags)
        scene_hits += any(flags)
        if flags:
            per_scene.append(sum(flags) / len(flags))
    if pooled:
        col_obj = n_col / n_obj if n_obj else 0.0
    else:
        col_obj = float(np.mean(per_scene)) if per_scene else 0.0
    return col_obj, scene_hits / len(scenes)


class _FloorShape:
    """Shapely polygon of a floor with cached buffers."""

    def __init__(self, floor: FloorPlan):
        self.poly = shapely.Polygon(floor.vertices)
        self._buffers: dict[float, shapely.Geometry] = {}

    def grown(self, tol: float):
        if tol <= 0:
            return self.poly
        if tol not in self._buffers:
            self._buffers[tol] = self.poly.buffer(tol, quad_segs=64)
        return self._buffers[tol]


_SHAPES: dict[int, _FloorShape] = {}


def _shape(floor: FloorPlan) -> _FloorShape:
    key = id(floor)
    cached = _SHAPES.get(key)
    if cached is None or cached.poly.is_empty:
        cached = _FloorShape(floor)
        if len(_SHAPES) > 4096:
            _SHAPES.clear()
        _SHAPES[key] = cached
    return cached


def is_outside(box: OrientedBox3, floor: FloorPlan, tol: float = TAU_OUT) -> bool:
    """True when the footprint leaves the floor polygon grown by ``tol`` meters."""
    fp = shapely.Polygon(box.footprint_corners())
    return not _shape(floor).grown(tol).covers(fp)


def r_out(scenes: Sequence[BoxesLike], floors: Sequence[FloorPlan], tol: float = TAU_OUT) -> float:
    n = out = 0
    for scene, floor in zip(scenes, floors, strict=True):
        for box in _boxes(scene):
            n += 1
            out += is_outside(box, floor, tol)
    return out / n if n else 0.0


@dataclass
class ReachStats:
    walkable_ratio: float
    reach_rate: Optional[float]
    n_walkable: int
    flagged: bool = False


def scene_reach_stats(
    boxes: Sequence[OrientedBox3],
    floor: FloorPlan,
    agent: AgentSpec,
    rng: np.random.Generator,
    resolution: float = DEFAULT_RESOLUTION,
) -> ReachStats:
    """Largest-region walkable ratio and the fraction of reachable objects.

    The start cell is drawn from the largest region. An object is reachable
    when some cell of the start's region lies within ``width/2 + delta`` of
    its footprint.
    """
    W = walkable_map(floor, boxes, agent, resolution)
    regions = connected_areas(W)
    total = int(W.cells.sum())
    if total == 0:
        return ReachStats(0.0, 0.0 if boxes else None, 0, flagged=True)
    ratio = regions[0].area / total
    if not boxes:
        return ReachStats(ratio, None, total)
    start = regions[0].cells[int(rng.integers(regions[0].area))]
    labels = np.full(W.cells.shape, -1)
    for i, reg in enumerate(regions):
        labels[reg.cells[:, 0], reg.cells[:, 1]] = i
    region_cells = regions[int(labels[start[0], start[1]])].cells
    pts = W.spec.cell_centers()[region_cells[:, 0], region_cells[:, 1]]
    d = distance_to_boxes(pts, list(boxes))
    reach = agent.width / 2.0 + agent.interaction_distance + 1e-9
    reachable = np.any(d <= reach, axis=0)
    return ReachStats(ratio, float(reachable.mean()), total)


def r_walkable(
    scenes: Sequence[BoxesLike], floors: Sequence[FloorPlan], agent: AgentSpec, resolution: float = DEFAULT_RESOLUTION
) -> float:
    rng = np.random.default_rng(DEFAULT_SEED)
    vals = [
        scene_reach_stats(_boxes(s), f, agent, rng, resolution).walkable_ratio
        for s, f in zip(scenes, floors, strict=True)
    ]
    return float(np.mean(vals)) if vals else 0.0


def r_reach(
    scenes: Sequence[BoxesLike],
    floors: Sequence[FloorPlan],
    agent: AgentSpec,
    rng: Optional[np.random.Generator] = None,
    resolution: float = DEFAULT_RESOLUTION,
) -> float:
    rng = rng if rng is not None else np.random.default_rng(DEFAULT_SEED)
    vals = []
    for s, f in zip(scenes, floors, strict=True):
        st = scene_reach_stats(_boxes(s), f, agent, rng, resolution)
        if st.reach_rate is not None:
            vals.append(st.reach_rate)
    return float(np.mean(vals)) if vals else 1.0


def category_frequencies(scenes: Sequence[SceneLayout], n_categories: int) -> np.ndarray:
    counts = np.zeros(n_categories)
    for scene in scenes:
        for _, slot in scene.occupied():
            counts[slot.category_index] += 1
    return counts


def kl_divergence(p_counts: np.ndarray, q_counts: np.ndarray, smoothing: float = CKL_SMOOTHING) -> float:
    p = np.asarray(p_counts, dtype=float)
    q = np.asarray(q_counts, dtype=float)
    p = p / p.sum() if p.sum() > 0 else np.full_like(p, 1.0 / len(p))
    q = q / q.sum() if q.sum() > 0 else np.full_like(q, 1.0 / len(q))
    p = (p + smoothing) / (1.0 + smoothing * len(p))
    q = (q + smoothing) / (1.0 + smoothing * len(q))
    return float(max(0.0, np.sum(p * np.log(p / q))))


def ckl(
    generated: Sequence[SceneLayout], reference: Sequence[SceneLayout], taxonomy: Optional[Taxonomy] = None
) -> float:
    """KL(generated || reference) of category frequencies over occupied slots."""
    if not generated or not reference:
        raise ValueError("both scene sets must be non-empty")
    n = (taxonomy or Taxonomy()).n_named
    return kl_divergence(category_frequencies(generated, n), category_frequencies(reference, n))


@dataclass
class MetricsReport:
    col_obj: float
    col_scene: float
    r_out: float
    r_walkable: float
    r_reach: float
    ckl: Optional[float]
    n_scenes: int
    per_scene: list[dict] = field(default_factory=list)
    flagged_scenes: list[int] = field(default_factory=list)

    ROWS = (
        ("Col_obj", "col_obj"),
        ("Col_scene", "col_scene"),
        ("R_out", "r_out"),
        ("R_walkable", "r_walkable"),
        ("R_reach", "r_reach"),
        ("CKL", "ckl"),
    )

    def summary(self) -> dict:
        return {key: getattr(self, key) for _, key in self.ROWS} | {"n_scenes": self.n_scenes}

    def to_json(self, per_scene: bool = True) -> str:
        d = asdict(self)
        if not per_scene:
            d.pop("per_scene")
        return json.dumps(d, indent=2, sort_keys=True)

    def table(self) -> str:
        width = max(len(n) for n, _ in self.ROWS)
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  -------"]
        for name, key in self.ROWS:
            v = getattr(self, key)
            lines.append(f"{name:<{width}}  {'n/a' if v is None else f'{v:.4f}'}")
        lines.append(f"{'scenes':<{width}}  {self.n_scenes}")
        return "\n".join(lines)


def evaluate_scenes(
    scenes: Sequence[SceneLayout],
    floors: Sequence[FloorPlan],
    agent: AgentSpec = AgentSpec(),
    reference: Optional[Sequence[SceneLayout]] = None,
    taxonomy: Optional[Taxonomy] = None,
    seed: int = DEFAULT_SEED,
    resolution: float = DEFAULT_RESOLUTION,
    tau_col: float = TAU_COL,
    tau_out: float = TAU_OUT,
    pooled: bool = True,
) -> MetricsReport:
    """Every metric in one pass over the scene set."""
    if len(scenes) != len(floors):
        raise ValueError("scenes and floors differ in length")
    rng = np.random.default_rng(seed)
    n_obj = n_col = n_out = 0
    scene_hits = 0
    walk, reach, per, flagged, col_rates = [], [], [], [], []
    for k, (scene, floor) in enumerate(zip(scenes, floors)):
        boxes = _boxes(scene)
        flags = colliding_objects(boxes, tau_col)
        outs = [is_outside(b, floor, tau_out) for b in boxes]
        st = scene_reach_stats(boxes, floor, agent, rng, resolution)
        n_obj += len(boxes)
        n_col += sum(flags)
        n_out += sum(outs)
        scene_hits += any(flags)
        if flags:
            col_rates.append(sum(flags) / len(flags))
        walk.append(st.walkable_ratio)
        if st.reach_rate is not None:
            reach.append(st.reach_rate)
        if st.flagged:
            flagged.append(k)
        per.append(
            {
                "objects": len(boxes),
                "colliding": int(sum(flags)),
                "outside": int(sum(outs)),
                "walkable_ratio": st.walkable_ratio,
                "reach_rate": st.reach_rate,
            }
        )
    n = len(scenes)
    if pooled:
        col_obj = n_col / n_obj if n_obj else 0.0
    else:
        col_obj = float(np.mean(col_rates)) if col_rates else 0.0
    return MetricsReport(
        col_obj=col_obj,
        col_scene=scene_hits / n if n else 0.0,
        r_out=n_out / n_obj if n_obj else 0.0,
        r_walkable=float(np.mean(walk)) if walk else 0.0,
        r_reach=float(np.mean(reach)) if reach else 1.0,
        ckl=ckl(scenes, reference, taxonomy) if reference else None,
        n_scenes=n,
        per_scene=per,
        flagged_scenes=flagged,
    )


def finite_or_none(v: Optional[float]) -> Optional[float]:
    return v if v is not None and math.isfinite(v) else None
