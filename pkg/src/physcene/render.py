"""Top-down SVG drawing of a scene."""

from __future__ import annotations

from pathlib import Path
from typing import Optional
from xml.sax.saxutils import escape

import numpy as np

from physcene.geometry import GridMap, obb_iou_3d
from physcene.metrics import TAU_COL
from physcene.scene import FloorPlan, SceneLayout, Taxonomy, slots_to_boxes

PALETTE = (
    "#4e79a7",
    "#f28e2b",
    "#e15759",
    "#76b7b2",
    "#59a14f",
    "#edc948",
    "#b07aa1",
    "#ff9da7",
    "#9c755f",
    "#bab0ac",
)
PIXELS_PER_METER = 80.0
MARGIN = 0.3


def _pts(xz: np.ndarray, ox: float, oz: float) -> str:
    # svg y grows downward, so +z is drawn up
    return " ".join(f"{(x - ox) * PIXELS_PER_METER:.2f},{(oz - z) * PIXELS_PER_METER:.2f}" for x, z in xz)


def render_svg(
    scene: SceneLayout,
    floor: FloorPlan,
    taxonomy: Optional[Taxonomy] = None,
    walkable: Optional[GridMap] = None,
    tau_col: float = TAU_COL,
    title: str = "",
) -> str:
    """SVG text: floor outline, category-colored footprints with a front tick,
    colliding pairs outlined in red, walkable cells optionally underlaid."""
    taxonomy = taxonomy or Taxonomy()
    xmin, zmin, xmax, zmax = floor.polygon.bounds()
    indexed = slots_to_boxes(scene)
    for _, b in indexed:
        fp = b.footprint_corners()
        xmin, zmin = min(xmin, fp[:, 0].min()), min(zmin, fp[:, 1].min())
        xmax, zmax = max(xmax, fp[:, 0].max()), max(zmax, fp[:, 1].max())
    ox, oz = xmin - MARGIN, zmax + MARGIN
    w = (xmax - xmin + 2 * MARGIN) * PIXELS_PER_METER
    h = (zmax - zmin + 2 * MARGIN) * PIXELS_PER_METER
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}" viewBox="0 0 {w:.2f} {h:.2f}">',
    ]
    if title:
        out.append(f"<title>{escape(title)}</title>")
    out.append(f'<polygon points="{_pts(floor.vertices, ox, oz)}" fill="#f4f1ea" stroke="#333" stroke-width="3"/>')
    if walkable is not None:
        s = walkable.spec.resolution * PIXELS_PER_METER
        centers = walkable.spec.cell_centers()
        for r, c in zip(*np.nonzero(walkable.cells)):
            x, z = centers[r, c]
            px, pz = (x - ox) * PIXELS_PER_METER - s / 2, (oz - z) * PIXELS_PER_METER - s / 2
            out.append(f'<rect x="{px:.2f}" y="{pz:.2f}" width="{s:.2f}" height="{s:.2f}" fill="#cde8c6"/>')
    colliding = set()
    for a in range(len(indexed)):
        for b in range(a + 1, len(indexed)):
            if obb_iou_3d(indexed[a][1], indexed[b][1]) > tau_col:
                colliding.update((a, b))
    for k, (slot_idx, box) in enumerate(indexed):
        cat = scene.slots[slot_idx].category_index
        name = taxonomy.categories[cat] if cat < taxonomy.n_named else "?"
        color = PALETTE[cat % len(PALETTE)]
        stroke = ' stroke="#d00" stroke-width="3"' if k in colliding else ' stroke="#222" stroke-width="1"'
        fp = box.footprint_corners()
        out.append(
            f'<polygon points="{_pts(fp, ox, oz)}" fill="{color}" fill-opacity="0.75"{stroke}>'
            f"<title>{escape(name)} (slot {slot_idx})</title></polygon>"
        )
        front = (fp[2] + fp[3]) / 2.0
        center = box.center[[0, 2]]
        out.append(f'<polyline points="{_pts(np.array([center, front]), ox, oz)}" stroke="#111" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: str | Path, *args, **kwargs) -> None:
    Path(path).write_text(render_svg(*args, **kwargs))
