"""Scene JSON schema: validation, loading and canonical writing.

A scene file looks like::

    {
      "schema_version": 1,
      "floor": {"vertices": [[x, z], ...]},
      "objects": [
        {"category": "bed", "size": [sx, sy, sz], "yaw": 0.0,
         "location": [x, y, z], "feature": [32 numbers], "asset_id": "bed-002"}
      ]
    }

``asset_id`` is optional. Fields the loader does not know are kept and
written back unchanged. Canonical output sorts keys and rounds every float
to 9 significant digits, so writing a loaded file twice gives identical
bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from physcene.geometry import GeometryError
from physcene.scene import FEATURE_DIM, FloorPlan, ObjectSlot, SceneLayout, Taxonomy, pad_slots

SCHEMA_VERSION = 1
SIGNIFICANT_DIGITS = 9

_OBJECT_KEYS = {"category", "size", "yaw", "location", "feature", "asset_id"}
_TOP_KEYS = {"schema_version", "floor", "objects"}


class SchemaError(ValueError):
    """Invalid scene document; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message

    def to_dict(self) -> dict:
        return {"error": "schema", "field": self.path, "message": self.message}


@dataclass
class SceneDocument:
    floor: FloorPlan
    scene: SceneLayout
    asset_ids: dict[int, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    floor_extra: dict = field(default_factory=dict)
    object_extra: dict[int, dict] = field(default_factory=dict)


def _number(v: Any, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(path, f"expected a number, got {type(v).__name__}")
    if not math.isfinite(v):
        raise SchemaError(path, "number must be finite")
    return float(v)


def _vector(v: Any, n: int, path: str) -> np.ndarray:
    if not isinstance(v, list):
        raise SchemaError(path, f"expected a list of {n} numbers")
    if len(v) != n:
        raise SchemaError(path, f"expected {n} numbers, got {len(v)}")
    return np.array([_number(x, f"{path}[{i}]") for i, x in enumerate(v)])


def _require(d: dict, key: str, path: str):
    if key not in d:
        raise SchemaError(f"{path}.{key}" if path else key, "missing required field")
    return d[key]


def parse_floor(d: Any, path: str = "floor", floor_id: str = "") -> tuple[FloorPlan, dict]:
    if not isinstance(d, dict):
        raise SchemaError(path, "expected an object")
    verts = _require(d, "vertices", path)
    if not isinstance(verts, list) or len(verts) < 3:
        raise SchemaError(f"{path}.vertices", "expected at least 3 [x, z] pairs")
    arr = np.array([_vector(v, 2, f"{path}.vertices[{i}]") for i, v in enumerate(verts)])
    try:
        floor = FloorPlan(arr, floor_id)
    except GeometryError as exc:
        raise SchemaError(f"{path}.vertices", str(exc)) from None
    return floor, {k: v for k, v in d.items() if k != "vertices"}


def parse_scene(
    doc: Any, taxonomy: Optional[Taxonomy] = None, n_slots: Optional[int] = None, floor_id: str = ""
) -> SceneDocument:
    """Validate a decoded JSON document and build the scene objects."""
    taxonomy = taxonomy or Taxonomy()
    if not isinstance(doc, dict):
        raise SchemaError("$", "expected a JSON object")
    version = _require(doc, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise SchemaError("schema_version", f"unsupported version {version!r}")
    floor, floor_extra = parse_floor(_require(doc, "floor", ""), "floor", floor_id)
    objects = _require(doc, "objects", "")
    if not isinstance(objects, list):
        raise SchemaError("objects", "expected a list")
    slots, asset_ids, object_extra = [], {}, {}
    for i, obj in enumerate(objects):
        p = f"objects[{i}]"
        if not isinstance(obj, dict):
            raise SchemaError(p, "expected an object")
        cat = _require(obj, "category", p)
        if not isinstance(cat, str) or cat not in taxonomy.categories:
            raise SchemaError(f"{p}.category", f"unknown category {cat!r}")
        size = _vector(_require(obj, "size", p), 3, f"{p}.size")
        if np.any(size <= 0):
            raise SchemaError(f"{p}.size", "sizes must be positive")
        yaw = _number(_require(obj, "yaw", p), f"{p}.yaw")
        loc = _vector(_require(obj, "location", p), 3, f"{p}.location")
        feat = _vector(_require(obj, "feature", p), FEATURE_DIM, f"{p}.feature")
        if "asset_id" in obj:
            if not isinstance(obj["asset_id"], str):
                raise SchemaError(f"{p}.asset_id", "expected a string")
            asset_ids[i] = obj["asset_id"]
        extra = {k: v for k, v in obj.items() if k not in _OBJECT_KEYS}
        if extra:
            object_extra[i] = extra
        slots.append(ObjectSlot.make(taxonomy, cat, size, yaw, loc, feat))
    if n_slots is not None:
        try:
            slots = pad_slots(slots, taxonomy, n_slots)
        except ValueError as exc:
            raise SchemaError("objects", str(exc)) from None
    return SceneDocument(
        floor,
        SceneLayout(slots, floor_id),
        asset_ids,
        {k: v for k, v in doc.items() if k not in _TOP_KEYS},
        floor_extra,
        object_extra,
    )


def load_scene(path: str | Path, taxonomy: Optional[Taxonomy] = None, n_slots: Optional[int] = None) -> SceneDocument:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc.msg} at line {exc.lineno}") from None
    return parse_scene(doc, taxonomy, n_slots, floor_id=path.stem)


def _round_floats(v: Any) -> Any:
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError("cannot write a non-finite number")
        r = float(f"{v:.{SIGNIFICANT_DIGITS}g}")
        return 0.0 if r == 0 else r
    if isinstance(v, np.floating):
        return _round_floats(float(v))
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_round_floats(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {k: _round_floats(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_round_floats(x) for x in v]
    return v


def canonical_json(doc: Any) -> str:
    return json.dumps(_round_floats(doc), sort_keys=True, indent=1, allow_nan=False) + "\n"


def scene_to_dict(
    scene: SceneLayout,
    floor: FloorPlan,
    taxonomy: Optional[Taxonomy] = None,
    asset_ids: Optional[dict[int, str]] = None,
    extra: Optional[dict] = None,
    floor_extra: Optional[dict] = None,
    object_extra: Optional[dict[int, dict]] = None,
) -> dict:
    """Document for the occupied slots of ``scene``; object order follows slot order."""
    taxonomy = taxonomy or Taxonomy()
    asset_ids = asset_ids or {}
    object_extra = object_extra or {}
    objects = []
    for i, slot in scene.occupied():
        obj = dict(object_extra.get(i, {}))
        obj.update(
            category=taxonomy.categories[slot.category_index],
            size=slot.size.tolist(),
            yaw=slot.yaw,
            location=slot.location.tolist(),
            feature=slot.shape_feature.tolist(),
        )
        if i in asset_ids:
            obj["asset_id"] = asset_ids[i]
        objects.append(obj)
    doc = dict(extra or {})
    doc.update(
        schema_version=SCHEMA_VERSION,
        floor=dict(floor_extra or {}) | {"vertices": floor.vertices.tolist()},
        objects=objects,
    )
    return doc


def document_to_dict(d: SceneDocument, taxonomy: Optional[Taxonomy] = None) -> dict:
    # extras are keyed by original object position; occupied() preserves that order
    return scene_to_dict(d.scene, d.floor, taxonomy, d.asset_ids, d.extra, d.floor_extra, d.object_extra)


def write_scene(
    path: str | Path,
    scene: SceneLayout,
    floor: FloorPlan,
    taxonomy: Optional[Taxonomy] = None,
    asset_ids: Optional[dict[int, str]] = None,
    extra: Optional[dict] = None,
) -> None:
    Path(path).write_text(canonical_json(scene_to_dict(scene, floor, taxonomy, asset_ids, extra)))


def write_document(path: str | Path, d: SceneDocument, taxonomy: Optional[Taxonomy] = None) -> None:
    Path(path).write_text(canonical_json(document_to_dict(d, taxonomy)))
