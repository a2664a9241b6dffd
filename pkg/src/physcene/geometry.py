"""Yaw-rotated boxes, floor polygons, rotated-box IoU and rasterization.

Conventions: ``y`` is the vertical axis, the ground plane is ``(x, z)``.
2D points are ``(x, z)`` pairs. A positive yaw rotates the box's local
``(x, z)`` axes counter-clockwise in the ground plane, i.e.
``world_xz = center_xz + R(yaw) @ local_xz`` with
``R = [[cos, -sin], [sin, cos]]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
_EDGE_EPS = 1e-12


class GeometryError(ValueError):
    """Raised for invalid geometric input."""


def normalize_angle(theta: float) -> float:
    """Wrap an angle to ``[-pi, pi)``."""
    wrapped = (float(theta) + math.pi) % TWO_PI - math.pi
    # float modulo can return exactly pi for inputs just below -pi
    if wrapped >= math.pi:
        wrapped -= TWO_PI
    return wrapped


def rotate_xz(vec: np.ndarray, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    vec = np.asarray(vec, dtype=float)
    return np.stack([c * vec[..., 0] - s * vec[..., 1], s * vec[..., 0] + c * vec[..., 1]], axis=-1)


@dataclass(frozen=True, eq=False)
class OrientedBox3:
    """A 3D box rotated about the vertical axis only.

    Attributes:
        center: ``(x, y, z)`` center in meters.
        half_extents: half sizes along the local ``x``, vertical ``y`` and
            local ``z`` axes; all strictly positive.
        yaw: rotation about the vertical axis, normalized to ``[-pi, pi)``.
    """

    center: np.ndarray
    half_extents: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        center = np.array(self.center, dtype=float).reshape(3)
        half = np.array(self.half_extents, dtype=float).reshape(3)
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(half)) and math.isfinite(self.yaw)):
            raise GeometryError("box parameters must be finite")
        if np.any(half <= 0):
            raise GeometryError(f"half extents must be positive, got {half.tolist()}")
        center.flags.writeable = False
        half.flags.writeable = False
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "half_extents", half)
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def volume(self) -> float:
        return 8.0 * float(np.prod(self.half_extents))

    @property
    def bottom(self) -> float:
        return float(self.center[1] - self.half_extents[1])

    @property
    def top(self) -> float:
        return float(self.center[1] + self.half_extents[1])

    def footprint_corners(self) -> np.ndarray:
        """Ground-plane corners as a ``(4, 2)`` CCW array."""
        hx, hz = self.half_extents[0], self.half_extents[2]
        local = np.array([[-hx, -hz], [hx, -hz], [hx, hz], [-hx, hz]])
        return rotate_xz(local, self.yaw) + self.center[[0, 2]]

    def corners(self) -> np.ndarray:
        """All eight corners as an ``(8, 3)`` array."""
        fp = self.footprint_corners()
        out = []
        for y in (self.bottom, self.top):
            for x, z in fp:
                out.append((x, y, z))
        return np.array(out)

    def moved(self, center=None, yaw=None, half_extents=None) -> "OrientedBox3":
        return OrientedBox3(
            self.center if center is None else center,
            self.half_extents if half_extents is None else half_extents,
            self.yaw if yaw is None else yaw,
        )

    def __repr__(self) -> str:
        return (
            f"OrientedBox3(center={self.center.tolist()}, "
            f"half_extents={self.half_extents.tolist()}, yaw={self.yaw:.6g})"
        )


def signed_area(vertices: np.ndarray) -> float:
    """Shoelace signed area; positive for counter-clockwise order."""
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        return 0.0
    x, z = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(z, -1)) - np.dot(np.roll(x, -1), z))


def polygon_area(vertices: np.ndarray) -> float:
    return abs(signed_area(vertices))


def _segments_cross(p1, p2, q1, q2) -> bool:
    """Proper or touching intersection of two closed segments."""

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < _EDGE_EPS else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return (
            min(a[0], b[0]) - _EDGE_EPS <= c[0] <= max(a[0], b[0]) + _EDGE_EPS
            and min(a[1], b[1]) - _EDGE_EPS <= c[1] <= max(a[1], b[1]) + _EDGE_EPS
        )

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return (
        (o1 == 0 and on_seg(p1, p2, q1))
        or (o2 == 0 and on_seg(p1, p2, q2))
        or (o3 == 0 and on_seg(q1, q2, p1))
        or (o4 == 0 and on_seg(q1, q2, p2))
    )


def is_simple(vertices: np.ndarray) -> bool:
    """True when no two non-adjacent edges of the closed polygon touch."""
    v = np.asarray(vertices, dtype=float)
    n = len(v)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                return False
    return True


@dataclass(frozen=True, eq=False)
class Polygon2:
    """Simple counter-clockwise polygon in the ground plane."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise GeometryError("polygon needs at least 3 two-dimensional vertices")
        if not np.all(np.isfinite(v)):
            raise GeometryError("polygon vertices must be finite")
        if signed_area(v) <= 0:
            raise GeometryError("polygon must be counter-clockwise with positive area")
        if not is_simple(v):
            raise GeometryError("polygon must be simple")
        v.flags.writeable = False
        object.__setattr__(self, "vertices", v)

    @property
    def area(self) -> float:
        return signed_area(self.vertices)

    def bounds(self) -> tuple[float, float, float, float]:
        """``(min_x, min_z, max_x, max_z)``."""
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def edges(self) -> list[tuple[np.ndarray, np.ndarray]]:
        v = self.vertices
        return [(v[i], v[(i + 1) % len(v)]) for i in range(len(v))]

    def centroid(self) -> np.ndarray:
        v = self.vertices
        x, z = v[:, 0], v[:, 1]
        xn, zn = np.roll(x, -1), np.roll(z, -1)
        cross = x * zn - xn * z
        a = cross.sum() / 2.0
        return np.array([((x + xn) * cross).sum() / (6 * a), ((z + zn) * cross).sum() / (6 * a)])

    def translated(self, offset) -> "Polygon2":
        return Polygon2(self.vertices + np.asarray(offset, dtype=float))


def footprint_polygon(box: OrientedBox3) -> Polygon2:
    """Project a box to the ground plane as a CCW rectangle."""
    return Polygon2(box.footprint_corners())


def point_in_polygon(p, poly: Polygon2) -> bool:
    """Even-odd ray-crossing test; points on the boundary count as inside."""
    return bool(points_in_polygon(np.asarray(p, dtype=float).reshape(1, 2), poly)[0])


def points_in_polygon(points: np.ndarray, poly: Polygon2 | np.ndarray) -> np.ndarray:
    """Vectorized :func:`point_in_polygon` for an ``(M, 2)`` array of points."""
    verts = poly.vertices if isinstance(poly, Polygon2) else np.asarray(poly, dtype=float)
    pts = np.asarray(points, dtype=float)
    px, pz = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    on_edge = np.zeros(len(pts), dtype=bool)
    n = len(verts)
    for i in range(n):
        ax, az = verts[i]
        bx, bz = verts[(i + 1) % n]
        ex, ez = bx - ax, bz - az
        cross = ex * (pz - az) - ez * (px - ax)
        dot = (px - ax) * ex + (pz - az) * ez
        length2 = ex * ex + ez * ez
        on_edge |= (np.abs(cross) <= _EDGE_EPS * max(1.0, math.sqrt(length2))) & (dot >= 0) & (dot <= length2)
        straddles = (az > pz) != (bz > pz)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = ax + (pz - az) * ex / ez
        inside ^= straddles & (px < x_cross)
    return inside | on_edge


def _edge_side(p, a: np.ndarray, e: np.ndarray) -> float:
    """Positive when ``p`` lies left of the directed edge from ``a`` along ``e``."""
    return e[0] * (p[1] - a[1]) - e[1] * (p[0] - a[0])


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip ``subject`` by the convex CCW polygon ``clip``."""
    output = [tuple(p) for p in np.asarray(subject, dtype=float)]
    clip = np.asarray(clip, dtype=float)
    m = len(clip)
    for i in range(m):
        if not output:
            break
        a = clip[i]
        e = clip[(i + 1) % m] - a
        inp = output
        output = []
        prev = inp[-1]
        prev_side = _edge_side(prev, a, e)
        for cur in inp:
            cur_side = _edge_side(cur, a, e)
            if cur_side >= 0:
                if prev_side < 0:
                    output.append(_intersect(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0:
                output.append(_intersect(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return np.array(output, dtype=float).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def footprint_intersection_area(a: OrientedBox3, b: OrientedBox3) -> float:
    return polygon_area(clip_convex(a.footprint_corners(), b.footprint_corners()))


def obb_iou_3d(a: OrientedBox3, b: OrientedBox3) -> float:
    """Exact 3D IoU of two yaw-only boxes.

    Footprints are intersected by convex clipping, then multiplied by the
    overlap of the vertical intervals.
    """
    height = min(a.top, b.top) - max(a.bottom, b.bottom)
    if height <= 0:
        return 0.0
    # cheap reject on circumscribed circles
    ra = math.hypot(a.half_extents[0], a.half_extents[2])
    rb = math.hypot(b.half_extents[0], b.half_extents[2])
    if math.hypot(a.center[0] - b.center[0], a.center[2] - b.center[2]) >= ra + rb:
        return 0.0
    inter = footprint_intersection_area(a, b) * height
    union = a.volume + b.volume - inter
    return min(1.0, max(0.0, inter / union))


# ---------------------------------------------------------------------------
# Batched IoU used by the guidance inner loops.


def box_arrays(boxes: Sequence[OrientedBox3]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack boxes into ``(centers (M,3), half_extents (M,3), yaws (M,))``."""
    if not boxes:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
    return (
        np.array([b.center for b in boxes]),
        np.array([b.half_extents for b in boxes]),
        np.array([b.yaw for b in boxes]),
    )


def _corners_batch(centers, halfs, yaws):
    c, s = np.cos(yaws), np.sin(yaws)
    sx = np.array([-1.0, 1.0, 1.0, -1.0])
    sz = np.array([-1.0, -1.0, 1.0, 1.0])
    lx = sx[None, :] * halfs[:, 0:1]
    lz = sz[None, :] * halfs[:, 2:3]
    wx = c[:, None] * lx - s[:, None] * lz + centers[:, 0:1]
    wz = s[:, None] * lx + c[:, None] * lz + centers[:, 2:3]
    return np.stack([wx, wz], axis=-1)


def _inside_convex(points, poly, tol):
    # points (P, K, 2), poly (P, 4, 2) CCW
    e = np.roll(poly, -1, axis=1) - poly
    d = points[:, :, None, :] - poly[:, None, :, :]
    cross = e[:, None, :, 0] * d[..., 1] - e[:, None, :, 1] * d[..., 0]
    return np.all(cross >= -tol, axis=2)


def quad_intersection_area_batch(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Intersection areas of paired convex CCW quads, ``(P, 4, 2)`` each.

    Builds the candidate vertex set (corners of one inside the other plus
    edge/edge crossings), orders it by angle about its mean and applies the
    shoelace formula.
    """
    p = len(qa)
    if p == 0:
        return np.zeros(0)
    tol = 1e-12
    in_a = _inside_convex(qb, qa, tol)  # corners of b inside a
    in_b = _inside_convex(qa, qb, tol)

    a0 = qa[:, :, None, :]
    a1 = np.roll(qa, -1, axis=1)[:, :, None, :]
    b0 = qb[:, None, :, :]
    b1 = np.roll(qb, -1, axis=1)[:, None, :, :]
    r = a1 - a0
    s = b1 - b0
    denom = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    qp = b0 - a0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]) / denom
        u = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / denom
    ok = (np.abs(denom) > 1e-15) & (t >= -tol) & (t <= 1 + tol) & (u >= -tol) & (u <= 1 + tol)
    cross_pts = a0 + np.where(ok, t, 0.0)[..., None] * r
    cross_pts = np.broadcast_to(cross_pts, (p, 4, 4, 2)).reshape(p, 16, 2)

    pts = np.concatenate([qa, qb, cross_pts], axis=1)
    mask = np.concatenate([in_b, in_a, ok.reshape(p, 16)], axis=1)
    count = mask.sum(axis=1)
    safe = np.maximum(count, 1)
    mean = (pts * mask[..., None]).sum(axis=1) / safe[:, None]
    rel = pts - mean[:, None, :]
    ang = np.arctan2(rel[..., 1], rel[..., 0])
    ang = np.where(mask, ang, np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    sorted_pts = np.take_along_axis(pts, order[..., None], axis=1)
    # pad invalid tail with the last valid vertex (zero-area duplicates)
    last = np.take_along_axis(sorted_pts, (safe - 1)[:, None, None].repeat(2, axis=2), axis=1)
    idx = np.arange(pts.shape[1])[None, :]
    sorted_pts = np.where((idx < count[:, None])[..., None], sorted_pts, last)
    x, z = sorted_pts[..., 0], sorted_pts[..., 1]
    area = 0.5 * np.abs((x * np.roll(z, -1, axis=1) - np.roll(x, -1, axis=1) * z).sum(axis=1))
    return np.where(count >= 3, area, 0.0)


def obb_iou_3d_batch(
    ca: np.ndarray, ha: np.ndarray, ya: np.ndarray, cb: np.ndarray, hb: np.ndarray, yb: np.ndarray
) -> np.ndarray:
    """Elementwise IoU for paired box arrays (see :func:`box_arrays`)."""
    ca, ha, cb, hb = (np.asarray(v, dtype=float).reshape(-1, 3) for v in (ca, ha, cb, hb))
    ya, yb = np.asarray(ya, dtype=float).reshape(-1), np.asarray(yb, dtype=float).reshape(-1)
    out = np.zeros(len(ca))
    height = np.minimum(ca[:, 1] + ha[:, 1], cb[:, 1] + hb[:, 1]) - np.maximum(ca[:, 1] - ha[:, 1], cb[:, 1] - hb[:, 1])
    ra = np.hypot(ha[:, 0], ha[:, 2])
    rb = np.hypot(hb[:, 0], hb[:, 2])
    near = np.hypot(ca[:, 0] - cb[:, 0], ca[:, 2] - cb[:, 2]) < ra + rb
    live = (height > 0) & near
    if not np.any(live):
        return out
    qa = _corners_batch(ca[live], ha[live], ya[live])
    qb = _corners_batch(cb[live], hb[live], yb[live])
    inter = quad_intersection_area_batch(qa, qb) * height[live]
    va = 8.0 * np.prod(ha[live], axis=1)
    vb = 8.0 * np.prod(hb[live], axis=1)
    out[live] = np.clip(inter / (va + vb - inter), 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# Walls and rasters

DEFAULT_WALL_THICKNESS = 5.0
DEFAULT_WALL_HEIGHT = 4.0


def wall_barriers(
    poly: Polygon2, thickness: float = DEFAULT_WALL_THICKNESS, height: float = DEFAULT_WALL_HEIGHT
) -> list[OrientedBox3]:
    """One barrier box per polygon edge, flush with the edge on its exterior side."""
    if thickness <= 0 or height <= 0:
        raise GeometryError("wall thickness and height must be positive")
    boxes = []
    for a, b in poly.edges():
        d = b - a
        length = float(np.hypot(*d))
        if length <= 0:
            continue
        # exterior normal of a CCW polygon edge points to its right
        n = np.array([d[1], -d[0]]) / length
        mid = 0.5 * (a + b) + n * (thickness / 2.0)
        boxes.append(
            OrientedBox3(
                center=(mid[0], height / 2.0, mid[1]),
                half_extents=(length / 2.0, height / 2.0, thickness / 2.0),
                yaw=math.atan2(d[1], d[0]),
            )
        )
    return boxes


@dataclass(frozen=True)
class RasterSpec:
    """Cell grid over the ground plane. Row index follows ``z``, column ``x``."""

    origin: tuple[float, float]
    resolution: float
    width: int
    height: int

    def __post_init__(self):
        if not self.resolution > 0:
            raise GeometryError("raster resolution must be positive")
        if self.width < 1 or self.height < 1:
            raise GeometryError("raster must have at least one cell")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def covering(cls, poly: Polygon2, resolution: float = 0.1, margin_cells: int = 1) -> "RasterSpec":
        """Smallest grid covering ``poly`` plus a margin of outside cells."""
        x0, z0, x1, z1 = poly.bounds()
        ox = x0 - margin_cells * resolution
        oz = z0 - margin_cells * resolution
        w = int(math.ceil((x1 - ox) / resolution - 1e-9)) + margin_cells
        h = int(math.ceil((z1 - oz) / resolution - 1e-9)) + margin_cells
        return cls((ox, oz), resolution, max(w, 1), max(h, 1))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def cell_centers(self) -> np.ndarray:
        """``(height, width, 2)`` array of cell-center ``(x, z)`` coordinates."""
        xs = self.origin[0] + (np.arange(self.width) + 0.5) * self.resolution
        zs = self.origin[1] + (np.arange(self.height) + 0.5) * self.resolution
        gx, gz = np.meshgrid(xs, zs)
        return np.stack([gx, gz], axis=-1)

    def cell_center(self, cell: tuple[int, int]) -> np.ndarray:
        r, c = cell
        return np.array([self.origin[0] + (c + 0.5) * self.resolution, self.origin[1] + (r + 0.5) * self.resolution])

    def cell_of(self, point) -> tuple[int, int]:
        """Cell containing a world point (clamped to the grid)."""
        c = int(math.floor((point[0] - self.origin[0]) / self.resolution))
        r = int(math.floor((point[1] - self.origin[1]) / self.resolution))
        return (min(max(r, 0), self.height - 1), min(max(c, 0), self.width - 1))

    def contains_bounds(self, poly: Polygon2) -> bool:
        x0, z0, x1, z1 = poly.bounds()
        eps = 1e-9
        return (
            x0 >= self.origin[0] - eps
            and z0 >= self.origin[1] - eps
            and x1 <= self.origin[0] + self.width * self.resolution + eps
            and z1 <= self.origin[1] + self.height * self.resolution + eps
        )


@dataclass
class GridMap:
    """A raster of walkable flags or traversal costs."""

    spec: RasterSpec
    cells: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.cells.shape != self.spec.shape:
            raise GeometryError(f"cells shape {self.cells.shape} does not match raster {self.spec.shape}")


def rasterize_polygon(poly: Polygon2, spec: RasterSpec) -> GridMap:
    """Binary mask with a cell set iff its center lies inside ``poly``."""
    if not spec.contains_bounds(poly):
        raise GeometryError("raster spec does not cover the polygon bounds")
    centers = spec.cell_centers().reshape(-1, 2)
    mask = points_in_polygon(centers, poly).reshape(spec.shape)
    return GridMap(spec, mask)


def distance_to_boxes(points: np.ndarray, boxes: Sequence[OrientedBox3]) -> np.ndarray:
    """Ground-plane distance from each point to each box footprint.

    Returns an array of shape ``points.shape[:-1] + (len(boxes),)``; points
    inside a footprint have distance zero.
    """
    pts = np.asarray(points, dtype=float)
    out = np.empty(pts.shape[:-1] + (len(boxes),))
    for k, box in enumerate(boxes):
        rel = pts - box.center[[0, 2]]
        local = rotate_xz(rel, -box.yaw)
        q = np.abs(local) - box.half_extents[[0, 2]]
        out[..., k] = np.hypot(np.maximum(q[..., 0], 0.0), np.maximum(q[..., 1], 0.0))
    return out
