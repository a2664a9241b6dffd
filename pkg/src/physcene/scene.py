"""Scene state: object slots, category taxonomy and the diffusion encoding."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from physcene.geometry import (
    GridMap,
    OrientedBox3,
    Polygon2,
    RasterSpec,
    rasterize_polygon,
    wall_barriers,
)

logger = logging.getLogger(__name__)

FEATURE_DIM = 32
DEFAULT_CATEGORIES = (
    "bed",
    "wardrobe",
    "nightstand",
    "desk",
    "chair",
    "table",
    "sofa",
    "bookshelf",
)
DEFAULT_SLOTS = 12


@dataclass(frozen=True)
class Taxonomy:
    """Named categories plus one reserved "empty" channel at the end."""

    categories: tuple[str, ...] = DEFAULT_CATEGORIES

    def __post_init__(self):
        cats = tuple(self.categories)
        if not cats or any(not c for c in cats):
            raise ValueError("category names must be non-empty")
        if len(set(cats)) != len(cats):
            raise ValueError("category names must be unique")
        object.__setattr__(self, "categories", cats)

    @property
    def n_named(self) -> int:
        return len(self.categories)

    @property
    def n_channels(self) -> int:
        return len(self.categories) + 1

    @property
    def empty_index(self) -> int:
        return len(self.categories)

    def index(self, name: str) -> int:
        try:
            return self.categories.index(name)
        except ValueError:
            raise KeyError(f"unknown category {name!r}") from None

    def one_hot(self, index: int) -> np.ndarray:
        v = np.zeros(self.n_channels)
        v[index] = 1.0
        return v

    @property
    def slot_dim(self) -> int:
        return self.n_channels + 3 + 2 + 3 + FEATURE_DIM


@dataclass(eq=False)
class ObjectSlot:
    """One object: category logits, full size, (cos, sin) orientation, location, shape feature."""

    category_logits: np.ndarray
    size: np.ndarray
    orientation: np.ndarray
    location: np.ndarray
    shape_feature: np.ndarray

    def __post_init__(self):
        self.category_logits = np.asarray(self.category_logits, dtype=float).reshape(-1)
        self.size = np.asarray(self.size, dtype=float).reshape(3)
        self.orientation = np.asarray(self.orientation, dtype=float).reshape(2)
        self.location = np.asarray(self.location, dtype=float).reshape(3)
        self.shape_feature = np.asarray(self.shape_feature, dtype=float).reshape(FEATURE_DIM)

    @classmethod
    def make(cls, taxonomy: Taxonomy, category: str | int, size, yaw: float, location, feature=None):
        idx = taxonomy.index(category) if isinstance(category, str) else int(category)
        return cls(
            taxonomy.one_hot(idx),
            size,
            (math.cos(yaw), math.sin(yaw)),
            location,
            np.zeros(FEATURE_DIM) if feature is None else feature,
        )

    @classmethod
    def empty(cls, taxonomy: Taxonomy) -> "ObjectSlot":
        return cls(
            taxonomy.one_hot(taxonomy.empty_index),
            np.zeros(3),
            np.zeros(2),
            np.zeros(3),
            np.zeros(FEATURE_DIM),
        )

    @property
    def category_index(self) -> int:
        return int(np.argmax(self.category_logits))

    @property
    def is_empty(self) -> bool:
        return self.category_index == len(self.category_logits) - 1

    @property
    def yaw(self) -> float:
        return math.atan2(self.orientation[1], self.orientation[0])

    def box(self) -> OrientedBox3:
        return OrientedBox3(self.location, self.size / 2.0, self.yaw)

    def copy(self) -> "ObjectSlot":
        return ObjectSlot(
            self.category_logits.copy(),
            self.size.copy(),
            self.orientation.copy(),
            self.location.copy(),
            self.shape_feature.copy(),
        )


@dataclass(eq=False)
class SceneLayout:
    """Fixed-length list of object slots conditioned on one floor plan."""

    slots: list[ObjectSlot]
    floor_id: str = ""

    def occupied(self) -> list[tuple[int, ObjectSlot]]:
        return [(i, s) for i, s in enumerate(self.slots) if not s.is_empty]

    def __len__(self) -> int:
        return len(self.slots)

    def copy(self) -> "SceneLayout":
        return SceneLayout([s.copy() for s in self.slots], self.floor_id)


class FloorPlan:
    """Room boundary polygon with cached wall barriers and rasters."""

    def __init__(self, vertices, floor_id: str = ""):
        self.polygon = vertices if isinstance(vertices, Polygon2) else Polygon2(vertices)
        self.floor_id = floor_id
        self._rasters: dict[float, GridMap] = {}

    @property
    def vertices(self) -> np.ndarray:
        return self.polygon.vertices

    @cached_property
    def walls(self) -> list[OrientedBox3]:
        return wall_barriers(self.polygon)

    def raster(self, resolution: float = 0.1) -> GridMap:
        """Cached floor mask on a grid covering the polygon with a one-cell margin."""
        key = float(resolution)
        if key not in self._rasters:
            spec = RasterSpec.covering(self.polygon, key)
            self._rasters[key] = rasterize_polygon(self.polygon, spec)
        return self._rasters[key]

    def __repr__(self) -> str:
        return f"FloorPlan({self.floor_id!r}, {len(self.vertices)} vertices)"


@dataclass
class NormStats:
    """Per-channel min/max of size and location over a training set."""

    size_min: np.ndarray
    size_max: np.ndarray
    loc_min: np.ndarray
    loc_max: np.ndarray

    def __post_init__(self):
        for name in ("size_min", "size_max", "loc_min", "loc_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        if np.any(self.size_max <= self.size_min) or np.any(self.loc_max <= self.loc_min):
            raise ValueError("normalization ranges must satisfy max > min on every channel")

    @classmethod
    def from_scenes(cls, scenes: Iterable[SceneLayout], pad: float = 0.0) -> "NormStats":
        sizes, locs = [], []
        for scene in scenes:
            for _, slot in scene.occupied():
                sizes.append(slot.size)
                locs.append(slot.location)
        if not sizes:
            raise ValueError("no objects to compute normalization statistics from")
        sizes, locs = np.array(sizes), np.array(locs)
        s_lo, s_hi = sizes.min(0) - pad, sizes.max(0) + pad
        l_lo, l_hi = locs.min(0) - pad, locs.max(0) + pad
        # widen degenerate channels
        for lo, hi in ((s_lo, s_hi), (l_lo, l_hi)):
            flat = hi - lo < 1e-6
            lo[flat] -= 0.5
            hi[flat] += 0.5
        return cls(s_lo, s_hi, l_lo, l_hi)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("size_min", "size_max", "loc_min", "loc_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["size_min"], d["size_max"], d["loc_min"], d["loc_max"])

    @property
    def loc_half_range(self) -> np.ndarray:
        return (self.loc_max - self.loc_min) / 2.0


def _to_unit(v, lo, hi):
    return 2.0 * (v - lo) / (hi - lo) - 1.0


def _from_unit(u, lo, hi):
    return (u + 1.0) / 2.0 * (hi - lo) + lo


class SceneCodec:
    """Maps scenes to flat vectors in ``[-1, 1]^(N*D)`` and back.

    Slot layout along ``D``: category channels (``C``), size (3),
    orientation (2), location (3), shape feature (32). Sizes and locations
    are min-max scaled; categories map ``{0, 1} -> {-1, 1}``; orientation
    and feature pass through. Empty slots carry zeros in every geometry
    channel.
    """

    def __init__(self, taxonomy: Taxonomy, stats: NormStats, n_slots: int = DEFAULT_SLOTS):
        self.taxonomy = taxonomy
        self.stats = stats
        self.n_slots = n_slots
        self.clamp_count = 0
        c = taxonomy.n_channels
        self.cat = slice(0, c)
        self.size = slice(c, c + 3)
        self.orient = slice(c + 3, c + 5)
        self.loc = slice(c + 5, c + 8)
        self.feat = slice(c + 8, c + 8 + FEATURE_DIM)
        self.slot_dim = c + 8 + FEATURE_DIM

    @property
    def dim(self) -> int:
        return self.n_slots * self.slot_dim

    def _clamped(self, v, lo, hi):
        out = np.clip(v, lo, hi)
        # rounding from a decode/encode round trip is not worth a warning
        if np.any(np.abs(out - v) > 1e-9 * (hi - lo)):
            self.clamp_count += 1
            logger.warning("clamped out-of-range value(s) %s into [%s, %s]", v, lo, hi)
        return out

    def encode(self, scene: SceneLayout) -> np.ndarray:
        if len(scene.slots) != self.n_slots:
            raise ValueError(f"scene has {len(scene.slots)} slots, codec expects {self.n_slots}")
        st = self.stats
        out = np.zeros((self.n_slots, self.slot_dim))
        for i, slot in enumerate(scene.slots):
            row = out[i]
            row[self.cat] = 2.0 * slot.category_logits - 1.0
            if slot.is_empty:
                continue
            row[self.size] = _to_unit(self._clamped(slot.size, st.size_min, st.size_max), st.size_min, st.size_max)
            row[self.orient] = slot.orientation
            row[self.loc] = _to_unit(self._clamped(slot.location, st.loc_min, st.loc_max), st.loc_min, st.loc_max)
            row[self.feat] = slot.shape_feature
        return out.reshape(-1)

    def decode(self, x: np.ndarray, floor_id: str = "") -> SceneLayout:
        x = np.asarray(x, dtype=float)
        if x.size != self.dim:
            raise ValueError(f"expected a vector of length {self.dim}, got {x.size}")
        rows = x.reshape(self.n_slots, self.slot_dim)
        st = self.stats
        slots = []
        for row in rows:
            logits = row[self.cat]
            idx = int(np.argmax(logits)) if np.all(np.isfinite(logits)) else self.taxonomy.empty_index
            if idx == self.taxonomy.empty_index:
                slots.append(ObjectSlot.empty(self.taxonomy))
                continue
            o = row[self.orient]
            norm = math.hypot(o[0], o[1])
            if not (norm > 0 and math.isfinite(norm)):
                o = np.array([1.0, 0.0])
            else:
                o = o / norm
            slots.append(
                ObjectSlot(
                    self.taxonomy.one_hot(idx),
                    # sizes stay inside the training range so they are always positive
                    _from_unit(np.clip(row[self.size], -1.0, 1.0), st.size_min, st.size_max),
                    o,
                    _from_unit(row[self.loc], st.loc_min, st.loc_max),
                    row[self.feat].copy(),
                )
            )
        return SceneLayout(slots, floor_id)

    def slot_rows(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x).reshape(self.n_slots, self.slot_dim)


def encode(scene: SceneLayout, stats: NormStats, taxonomy: Taxonomy | None = None) -> np.ndarray:
    tax = taxonomy or Taxonomy()
    return SceneCodec(tax, stats, len(scene.slots)).encode(scene)


def decode(x: np.ndarray, stats: NormStats, taxonomy: Taxonomy, n_slots: int = DEFAULT_SLOTS) -> SceneLayout:
    return SceneCodec(taxonomy, stats, n_slots).decode(x)


def slots_to_boxes(scene: SceneLayout) -> list[tuple[int, OrientedBox3]]:
    """Boxes for the occupied slots; slots with a non-positive size are skipped."""
    out = []
    skipped = 0
    for i, slot in scene.occupied():
        if not (np.all(slot.size > 0) and np.all(np.isfinite(slot.size)) and np.all(np.isfinite(slot.location))):
            skipped += 1
            continue
        out.append((i, slot.box()))
    if skipped:
        logger.debug("skipped %d slot(s) with non-positive or non-finite geometry", skipped)
    return out


def scene_boxes(scene: SceneLayout) -> list[OrientedBox3]:
    return [b for _, b in slots_to_boxes(scene)]


def pad_slots(slots: Sequence[ObjectSlot], taxonomy: Taxonomy, n_slots: int) -> list[ObjectSlot]:
    if len(slots) > n_slots:
        raise ValueError(f"{len(slots)} objects exceed the {n_slots} available slots")
    return list(slots) + [ObjectSlot.empty(taxonomy) for _ in range(n_slots - len(slots))]
