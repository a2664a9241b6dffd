"""Asset catalog, feature-based retrieval and open-state box expansion.

A catalog entry may be articulated: one opening axis in the object frame
plus how far its moving parts sweep when fully open. Guidance and
interaction checks use the swept ("expanded") box.

Catalog file format (JSON array)::

    [{"id": "wardrobe-003", "category": "wardrobe", "size": [1.2, 2.0, 0.6],
      "feature": [32 numbers], "articulation": {"axis": [0, 0, 1], "open_extent": 0.5}}]

``articulation`` may be omitted or ``null`` for rigid assets.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from physcene.geometry import OrientedBox3, rotate_xz
from physcene.scene import FEATURE_DIM, ObjectSlot, SceneLayout, Taxonomy

logger = logging.getLogger(__name__)

ARTICULATED_CATEGORIES = {"wardrobe": 0.5, "bookshelf": 0.35, "desk": 0.4}


@dataclass(frozen=True)
class Articulation:
    axis: tuple[float, float, float]
    open_extent: float

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=float).reshape(3)
        n = float(np.linalg.norm(a))
        if not (n > 0 and math.isfinite(n)):
            raise ValueError("articulation axis must be a finite non-zero vector")
        if not (self.open_extent >= 0 and math.isfinite(self.open_extent)):
            raise ValueError("open_extent must be finite and non-negative")
        object.__setattr__(self, "axis", tuple(float(v) for v in a / n))


@dataclass(frozen=True)
class AssetEntry:
    id: str
    category: str
    size: tuple[float, float, float]
    feature: tuple[float, ...]
    articulation: Optional[Articulation] = None

    def __post_init__(self):
        size = tuple(float(v) for v in np.asarray(self.size, dtype=float).reshape(3))
        feat = tuple(float(v) for v in np.asarray(self.feature, dtype=float).reshape(-1))
        if len(feat) != FEATURE_DIM or not all(math.isfinite(v) for v in feat):
            raise ValueError(f"asset {self.id!r}: feature must be {FEATURE_DIM} finite numbers")
        if not all(v > 0 and math.isfinite(v) for v in size):
            raise ValueError(f"asset {self.id!r}: size must be positive")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "feature", feat)

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def to_dict(self) -> dict:
        art = None
        if self.articulation is not None:
            art = {"axis": list(self.articulation.axis), "open_extent": self.articulation.open_extent}
        return {
            "id": self.id,
            "category": self.category,
            "size": list(self.size),
            "feature": list(self.feature),
            "articulation": art,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AssetEntry":
        art = d.get("articulation")
        return cls(
            str(d["id"]),
            str(d["category"]),
            tuple(d["size"]),
            tuple(d["feature"]),
            Articulation(tuple(art["axis"]), float(art["open_extent"])) if art else None,
        )


class AssetCatalog:
    """Immutable collection of entries bucketed by category."""

    def __init__(self, entries: Sequence[AssetEntry]):
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("asset ids must be unique")
        self.entries = tuple(entries)
        self._buckets: dict[str, list[int]] = {}
        for i, e in enumerate(self.entries):
            self._buckets.setdefault(e.category, []).append(i)
        self._features = np.array([e.feature for e in self.entries]) if entries else np.zeros((0, FEATURE_DIM))
        self._log_volumes = np.log([e.volume for e in self.entries]) if entries else np.zeros(0)

    def __len__(self) -> int:
        return len(self.entries)

    def by_id(self, asset_id: str) -> AssetEntry:
        for e in self.entries:
            if e.id == asset_id:
                return e
        raise KeyError(asset_id)

    def bucket(self, category: str) -> list[int]:
        return list(self._buckets.get(category, []))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps([e.to_dict() for e in self.entries], indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "AssetCatalog":
        data = json.loads(Path(path).read_text())
        if not isinstance(data, list):
            raise ValueError(f"{path}: catalog must be a JSON array")
        return cls([AssetEntry.from_dict(d) for d in data])


def retrieve(slot: ObjectSlot, catalog: AssetCatalog, taxonomy: Optional[Taxonomy] = None) -> str:
    """Id of the best-matching asset for ``slot``.

    Among entries of the slot's category the Euclidean feature distance is
    minimized; ties go to the smaller ``|log(volume ratio)|``, then to the
    lexicographically smaller id. An empty category bucket falls back to the
    whole catalog with a warning.
    """
    if slot.is_empty:
        raise ValueError("cannot retrieve an asset for an empty slot")
    if len(catalog) == 0:
        raise ValueError("catalog is empty")
    taxonomy = taxonomy or Taxonomy()
    category = taxonomy.categories[slot.category_index]
    idx = catalog.bucket(category)
    if not idx:
        warnings.warn(f"no catalog entries for category {category!r}; searching all categories", stacklevel=2)
        idx = list(range(len(catalog)))
    idx_arr = np.asarray(idx)
    dist = np.linalg.norm(catalog._features[idx_arr] - slot.shape_feature, axis=1)
    vol = float(np.prod(slot.size))
    log_ratio = np.abs(catalog._log_volumes[idx_arr] - math.log(vol)) if vol > 0 else np.zeros(len(idx_arr))
    best = min(range(len(idx_arr)), key=lambda k: (dist[k], log_ratio[k], catalog.entries[idx_arr[k]].id))
    return catalog.entries[int(idx_arr[best])].id


def expanded_box(box: OrientedBox3, asset: Optional[AssetEntry]) -> OrientedBox3:
    """Box swept by the asset's moving parts when fully open.

    The object-frame axis ``a`` is scaled by ``open_extent`` ``e``: the half
    extents grow by ``e * |a| / 2`` and the center moves by ``e * a / 2``
    rotated into the world by the box yaw.
    """
    if asset is None or asset.articulation is None or asset.articulation.open_extent == 0:
        return box
    a = np.asarray(asset.articulation.axis)
    e = asset.articulation.open_extent
    shift_local = e * a / 2.0
    shift_xz = rotate_xz(shift_local[[0, 2]], box.yaw)
    center = box.center + np.array([shift_xz[0], shift_local[1], shift_xz[1]])
    return OrientedBox3(center, box.half_extents + e * np.abs(a) / 2.0, box.yaw)


@dataclass
class ArticulatedBoxes:
    slot_index: int
    asset_id: str
    closed: OrientedBox3
    expanded: OrientedBox3

    @property
    def articulated(self) -> bool:
        return self.expanded is not self.closed

    def part_end(self) -> np.ndarray:
        """``(x, z)`` of the swept face center, i.e. where a handle ends up when fully open."""
        center = self.expanded.center[[0, 2]]
        d = center - self.closed.center[[0, 2]]
        n = float(np.linalg.norm(d))
        if not self.articulated or n == 0:
            return self.closed.center[[0, 2]]
        u = d / n
        u_local = rotate_xz(u, -self.expanded.yaw)
        half = abs(u_local[0]) * self.expanded.half_extents[0] + abs(u_local[1]) * self.expanded.half_extents[2]
        return center + u * half


def articulated_scene_boxes(
    scene: SceneLayout, catalog: AssetCatalog, taxonomy: Optional[Taxonomy] = None
) -> list[ArticulatedBoxes]:
    out = []
    for i, slot in scene.occupied():
        if not (np.all(slot.size > 0) and np.all(np.isfinite(slot.size))):
            continue
        asset_id = retrieve(slot, catalog, taxonomy)
        closed = slot.box()
        out.append(ArticulatedBoxes(i, asset_id, closed, expanded_box(closed, catalog.by_id(asset_id))))
    return out


def synthetic_catalog(taxonomy: Optional[Taxonomy] = None, per_category: int = 8, seed: int = 11) -> AssetCatalog:
    """Anchor-plus-noise catalog; wardrobes, bookshelves and desks open along local +z."""
    from physcene.synthetic import DEFAULT_CATEGORY_SPECS, category_anchors

    taxonomy = taxonomy or Taxonomy()
    anchors = category_anchors(taxonomy)
    rng = np.random.default_rng(seed)
    entries = []
    for ci, name in enumerate(taxonomy.categories):
        spec = DEFAULT_CATEGORY_SPECS.get(name)
        mean = np.asarray(spec.size_mean if spec else (1.0, 1.0, 1.0))
        spread = np.asarray(spec.size_spread if spec else (0.2, 0.2, 0.2))
        for k in range(per_category):
            art = None
            if name in ARTICULATED_CATEGORIES:
                art = Articulation((0.0, 0.0, 1.0), round(ARTICULATED_CATEGORIES[name] * rng.uniform(0.8, 1.2), 3))
            entries.append(
                AssetEntry(
                    f"{name}-{k:03d}",
                    name,
                    tuple(np.round(mean + rng.uniform(-1, 1, 3) * spread, 3)),
                    tuple(anchors[ci] + rng.normal(0.0, 0.1, FEATURE_DIM)),
                    art,
                )
            )
    return AssetCatalog(entries)
