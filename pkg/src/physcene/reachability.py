"""Walkable maps, Gaussian cost maps, region labelling and A* for agent reachability."""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from physcene.geometry import GridMap, OrientedBox3, RasterSpec, distance_to_boxes
from physcene.scene import FloorPlan

MAX_COST = 1e9
GAUSSIAN_AMPLITUDE = 10.0
GAUSSIAN_SIGMA_FACTOR = 0.5
DEFAULT_RESOLUTION = 0.1
SQRT2 = math.sqrt(2.0)

# (dr, dc, step length)
_MOVES = (
    (-1, 0, 1.0),
    (1, 0, 1.0),
    (0, -1, 1.0),
    (0, 1, 1.0),
    (-1, -1, SQRT2),
    (-1, 1, SQRT2),
    (1, -1, SQRT2),
    (1, 1, SQRT2),
)


class NoPathError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentSpec:
    """Embodied agent footprint ``width x width`` and height, in meters."""

    width: float = 0.3
    height: float = 1.6
    interaction_distance: float = 0.3

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("agent width must be positive")
        if not self.height > 0:
            raise ValueError("agent height must be positive")
        if self.interaction_distance < 0:
            raise ValueError("interaction distance must be non-negative")


@dataclass
class Region:
    cells: np.ndarray  # (K, 2) of (row, col)
    area: int
    center: tuple[int, int]


@dataclass
class PathResult:
    cells: list[tuple[int, int]]
    cost: float
    boxes: list[OrientedBox3] = field(default_factory=list)


def walkable_map(
    floor: FloorPlan, boxes: Sequence[OrientedBox3], agent: AgentSpec, resolution: float = DEFAULT_RESOLUTION
) -> GridMap:
    """Floor cells whose center is farther than ``width/2`` from every footprint."""
    base = floor.raster(resolution)
    walk = base.cells.copy()
    if boxes:
        d = distance_to_boxes(base.spec.cell_centers(), list(boxes))
        walk &= ~np.any(d <= agent.width / 2.0, axis=-1)
    return GridMap(base.spec, walk)


def cost_map(floor: FloorPlan, boxes: Sequence[OrientedBox3], resolution: float = DEFAULT_RESOLUTION) -> GridMap:
    """Unit cost on the floor, ``MAX_COST`` off it, plus a Gaussian bump per object."""
    base = floor.raster(resolution)
    cost = np.where(base.cells, 1.0, MAX_COST)
    if boxes:
        d = distance_to_boxes(base.spec.cell_centers(), list(boxes))
        for k, box in enumerate(boxes):
            sigma = GAUSSIAN_SIGMA_FACTOR * max(box.half_extents[0], box.half_extents[2])
            cost = cost + GAUSSIAN_AMPLITUDE * np.exp(-(d[..., k] ** 2) / (2.0 * sigma * sigma))
    return GridMap(base.spec, cost)


def connected_areas(walkable: GridMap | np.ndarray) -> list[Region]:
    """4-connected regions sorted by area (largest first).

    Each region's center is its walkable cell nearest the region centroid.
    """
    mask = walkable.cells if isinstance(walkable, GridMap) else np.asarray(walkable, dtype=bool)
    h, w = mask.shape
    flat = mask.reshape(-1).tolist()
    seen = [False] * (h * w)
    regions = []
    for start in range(h * w):
        if not flat[start] or seen[start]:
            continue
        seen[start] = True
        queue = deque([start])
        members = []
        while queue:
            u = queue.popleft()
            members.append(u)
            r, c = divmod(u, w)
            if r > 0:
                v = u - w
                if flat[v] and not seen[v]:
                    seen[v] = True
                    queue.append(v)
            if r < h - 1:
                v = u + w
                if flat[v] and not seen[v]:
                    seen[v] = True
                    queue.append(v)
            if c > 0:
                v = u - 1
                if flat[v] and not seen[v]:
                    seen[v] = True
                    queue.append(v)
            if c < w - 1:
                v = u + 1
                if flat[v] and not seen[v]:
                    seen[v] = True
                    queue.append(v)
        members.sort()
        idx = np.array(members)
        cells = np.stack([idx // w, idx % w], axis=1)
        centroid = cells.mean(axis=0)
        d2 = ((cells - centroid) ** 2).sum(axis=1)
        k = int(np.argmin(d2))
        regions.append(Region(cells, len(members), (int(cells[k, 0]), int(cells[k, 1]))))
    regions.sort(key=lambda r: (-r.area, int(r.cells[0, 0]) * w + int(r.cells[0, 1])))
    return regions


def region_labels(regions: Sequence[Region], shape: tuple[int, int]) -> np.ndarray:
    """Label raster: ``-1`` for non-walkable, else the region's index."""
    labels = np.full(shape, -1, dtype=int)
    for i, reg in enumerate(regions):
        labels[reg.cells[:, 0], reg.cells[:, 1]] = i
    return labels


def passable(cost: np.ndarray) -> np.ndarray:
    return cost < MAX_COST


def astar(cost: GridMap | np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> PathResult:
    """Cost-optimal 8-connected path.

    Moving between neighbours costs the mean of the two cell costs times the
    step length (1 or sqrt 2 cells). Diagonal moves must not cut a blocked
    corner. The heuristic is the octile distance times the smallest passable
    cell cost, which is consistent, so the first expansion of the goal is
    optimal.
    """
    grid = cost.cells if isinstance(cost, GridMap) else np.asarray(cost, dtype=float)
    h, w = grid.shape
    ok = passable(grid)
    for name, (r, c) in (("start", start), ("goal", goal)):
        if not (0 <= r < h and 0 <= c < w) or not ok[r, c]:
            raise NoPathError(f"{name} cell {(r, c)} is outside the grid or blocked")
    if tuple(start) == tuple(goal):
        return PathResult([tuple(start)], 0.0)
    cmin = float(grid[ok].min())
    costs = grid.reshape(-1).tolist()
    okf = ok.reshape(-1).tolist()
    s = start[0] * w + start[1]
    g_idx = goal[0] * w + goal[1]
    gr, gc = goal

    def heur(u):
        r, c = divmod(u, w)
        dr, dc = abs(r - gr), abs(c - gc)
        return cmin * (max(dr, dc) + (SQRT2 - 1.0) * min(dr, dc))

    g = {s: 0.0}
    parent = {s: -1}
    closed = set()
    counter = 0
    heap = [(heur(s), counter, s)]
    while heap:
        _, _, u = heapq.heappop(heap)
        if u in closed:
            continue
        if u == g_idx:
            break
        closed.add(u)
        r, c = divmod(u, w)
        gu = g[u]
        cu = costs[u]
        for dr, dc, step in _MOVES:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < h and 0 <= nc < w):
                continue
            v = nr * w + nc
            if not okf[v] or v in closed:
                continue
            if dr and dc and not (okf[r * w + nc] and okf[nr * w + c]):
                continue
            ng = gu + 0.5 * (cu + costs[v]) * step
            if ng < g.get(v, math.inf):
                g[v] = ng
                parent[v] = u
                counter += 1
                heapq.heappush(heap, (ng + heur(v), counter, v))
    if g_idx not in g:
        raise NoPathError(f"goal {goal} unreachable from {start}")
    path = []
    u = g_idx
    while u != -1:
        path.append(divmod(u, w))
        u = parent[u]
    path.reverse()
    return PathResult([(int(r), int(c)) for r, c in path], g[g_idx])


def path_cost(cost: np.ndarray, cells: Sequence[tuple[int, int]]) -> float:
    """Cost of a cell path under the A* edge model."""
    total = 0.0
    for (r0, c0), (r1, c1) in zip(cells[:-1], cells[1:]):
        step = SQRT2 if (r0 != r1 and c0 != c1) else 1.0
        total += 0.5 * (cost[r0, c0] + cost[r1, c1]) * step
    return total


def default_agent_count(path: PathResult) -> int:
    return max(2, len(path.cells) // 5)


def agent_boxes(path: PathResult, agent: AgentSpec, L: int, spec: RasterSpec) -> list[OrientedBox3]:
    """``L`` agent boxes at arc-length-uniform positions along the path polyline."""
    if not path.cells:
        raise ValueError("empty path")
    if L < 1:
        raise ValueError("need at least one agent box")
    pts = np.array([spec.cell_center(c) for c in path.cells])
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1]) if len(seg) else np.zeros(0)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    half = (agent.width / 2.0, agent.height / 2.0, agent.width / 2.0)
    boxes = []
    for k in range(L):
        s = (k + 0.5) / L * total
        if total <= 0:
            p, yaw = pts[0], 0.0
        else:
            j = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1))
            frac = (s - cum[j]) / seg_len[j] if seg_len[j] > 0 else 0.0
            p = pts[j] + frac * seg[j]
            yaw = math.atan2(seg[j, 1], seg[j, 0])
        boxes.append(OrientedBox3((p[0], agent.height / 2.0, p[1]), half, yaw))
    return boxes


@dataclass
class ReachResult:
    walkable: GridMap
    cost: GridMap
    regions: list[Region]
    path: Optional[PathResult] = None


def reach_pipeline(
    boxes: Sequence[OrientedBox3],
    floor: FloorPlan,
    agent: AgentSpec,
    resolution: float = DEFAULT_RESOLUTION,
    endpoints: str = "largest",
    rng: Optional[np.random.Generator] = None,
    L: Optional[int] = None,
) -> ReachResult:
    """Walkable map, cost map, regions and the path joining two regions.

    ``endpoints="largest"`` joins the centers of the two largest regions;
    ``"random"`` picks two distinct regions with ``rng``.
    """
    W = walkable_map(floor, boxes, agent, resolution)
    C = cost_map(floor, boxes, resolution)
    regions = connected_areas(W)
    result = ReachResult(W, C, regions)
    if len(regions) < 2:
        return result
    if endpoints == "largest":
        a, b = regions[0], regions[1]
    elif endpoints == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        i, j = rng.choice(len(regions), size=2, replace=False)
        a, b = regions[int(i)], regions[int(j)]
    else:
        raise ValueError(f"unknown endpoint convention {endpoints!r}")
    try:
        path = astar(C, a.center, b.center)
    except NoPathError:
        return result
    path.boxes = agent_boxes(path, agent, L or default_agent_count(path), W.spec)
    result.path = path
    return result


@dataclass
class InteractionResult:
    fraction: float
    interactive: list[bool]
    paths: dict[int, PathResult]

    @property
    def guidance_boxes(self) -> list[OrientedBox3]:
        return [b for p in self.paths.values() for b in p.boxes]


def interaction_reach(
    boxes: Sequence[OrientedBox3],
    floor: FloorPlan,
    agent: AgentSpec,
    targets: Sequence,
    resolution: float = DEFAULT_RESOLUTION,
) -> InteractionResult:
    """Fraction of part end positions the agent can reach.

    ``boxes`` should already be expanded to their fully open extent. A target
    ``(x, z)`` is interactive when a cell of the largest walkable region lies
    within the interaction distance of it. For failed targets the A* path from
    the largest region's center to the target cell is returned with agent
    boxes for guidance.
    """
    if not targets:
        return InteractionResult(1.0, [], {})
    W = walkable_map(floor, boxes, agent, resolution)
    C = cost_map(floor, boxes, resolution)
    regions = connected_areas(W)
    spec = W.spec
    main = regions[0] if regions else None
    main_pts = np.array([spec.cell_center(tuple(c)) for c in main.cells]) if main is not None else np.zeros((0, 2))
    ok_cells = passable(C.cells)
    centers = spec.cell_centers()
    flags: list[bool] = []
    paths: dict[int, PathResult] = {}
    for i, target in enumerate(targets):
        tp = np.asarray(target, dtype=float).reshape(-1)
        tp = tp[[0, 2]] if tp.size == 3 else tp[:2]
        hit = bool(len(main_pts)) and bool(np.any(np.hypot(*(main_pts - tp).T) <= agent.interaction_distance + 1e-12))
        flags.append(hit)
        if hit or main is None:
            continue
        d = np.hypot(centers[..., 0] - tp[0], centers[..., 1] - tp[1])
        d = np.where(ok_cells, d, np.inf)
        goal = np.unravel_index(int(np.argmin(d)), d.shape)
        try:
            path = astar(C, main.center, (int(goal[0]), int(goal[1])))
        except NoPathError:
            continue
        path.boxes = agent_boxes(path, agent, default_agent_count(path), spec)
        paths[i] = path
    return InteractionResult(sum(flags) / len(flags), flags, paths)


def write_pgm(path: str | Path, grid: GridMap | np.ndarray) -> None:
    """Binary (P5) graymap dump. Walkable cells are white; low cost is bright."""
    cells = grid.cells if isinstance(grid, GridMap) else np.asarray(grid)
    if cells.dtype == bool:
        img = np.where(cells, 255, 0).astype(np.uint8)
    else:
        vals = np.asarray(cells, dtype=float)
        ok = vals < MAX_COST
        img = np.zeros(vals.shape, dtype=np.uint8)
        if ok.any():
            lo, hi = float(vals[ok].min()), float(vals[ok].max())
            span = hi - lo if hi > lo else 1.0
            img[ok] = np.round(255.0 * (1.0 - 0.8 * (vals[ok] - lo) / span)).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        # top image row = largest z
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())
