import math

import numpy as np
import pytest
import shapely
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import monte_carlo_iou, random_box

from physcene.geometry import (
    GeometryError,
    OrientedBox3,
    Polygon2,
    RasterSpec,
    footprint_polygon,
    is_simple,
    normalize_angle,
    obb_iou_3d,
    obb_iou_3d_batch,
    point_in_polygon,
    polygon_area,
    rasterize_polygon,
    signed_area,
    wall_barriers,
)

UNIT = OrientedBox3((0, 0, 0), (0.5, 0.5, 0.5), 0.0)
L_SHAPE = Polygon2([(0, 0), (4, 0), (4, 2), (2, 2), (2, 4), (0, 4)])

finite = st.floats(-3, 3, allow_nan=False)
half = st.floats(0.05, 1.5, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)
boxes = st.builds(
    lambda c, h, y: OrientedBox3(c, h, y),
    st.tuples(finite, finite, finite),
    st.tuples(half, half, half),
    angle,
)


class TestOrientedBox:
    def test_rejects_non_positive_extent(self):
        with pytest.raises(GeometryError):
            OrientedBox3((0, 0, 0), (1, 0, 1), 0.0)

    def test_yaw_is_normalized(self):
        assert OrientedBox3((0, 0, 0), (1, 1, 1), math.pi).yaw == pytest.approx(-math.pi)
        assert OrientedBox3((0, 0, 0), (1, 1, 1), 3 * math.pi / 2).yaw == pytest.approx(-math.pi / 2)

    @given(angle)
    def test_normalize_range(self, theta):
        assert -math.pi <= normalize_angle(theta * 7) < math.pi


class TestIoU:
    def test_identical(self):
        assert obb_iou_3d(UNIT, UNIT) == pytest.approx(1.0)

    def test_disjoint(self):
        assert obb_iou_3d(UNIT, UNIT.moved(center=(3, 0, 0))) == 0.0

    def test_half_offset(self):
        assert obb_iou_3d(UNIT, UNIT.moved(center=(0.5, 0, 0))) == pytest.approx(1 / 3, abs=1e-12)

    def test_vertical_offset(self):
        assert obb_iou_3d(UNIT, UNIT.moved(center=(0, 0.5, 0))) == pytest.approx(1 / 3, abs=1e-12)

    def test_random_pairs_match_monte_carlo(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b = random_box(rng, 0.5), random_box(rng, 0.5)
            assert obb_iou_3d(a, b) == pytest.approx(monte_carlo_iou(a, b, 200_000, rng), abs=0.01)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(5)
        pairs = [(random_box(rng, 0.7), random_box(rng, 0.7)) for _ in range(300)]
        ca = np.array([a.center for a, _ in pairs])
        ha = np.array([a.half_extents for a, _ in pairs])
        ya = np.array([a.yaw for a, _ in pairs])
        cb = np.array([b.center for _, b in pairs])
        hb = np.array([b.half_extents for _, b in pairs])
        yb = np.array([b.yaw for _, b in pairs])
        batch = obb_iou_3d_batch(ca, ha, ya, cb, hb, yb)
        scalar = np.array([obb_iou_3d(a, b) for a, b in pairs])
        np.testing.assert_allclose(batch, scalar, atol=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(boxes, boxes)
    def test_symmetric_and_bounded(self, a, b):
        v = obb_iou_3d(a, b)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(obb_iou_3d(b, a), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(boxes, boxes, st.tuples(finite, finite, finite), angle)
    def test_rigid_invariance(self, a, b, shift, theta):
        def move(box):
            c, s = math.cos(theta), math.sin(theta)
            x, z = box.center[0], box.center[2]
            center = (c * x - s * z + shift[0], box.center[1] + shift[1], s * x + c * z + shift[2])
            return OrientedBox3(center, box.half_extents, box.yaw + theta)

        assert obb_iou_3d(move(a), move(b)) == pytest.approx(obb_iou_3d(a, b), abs=1e-9)

    @given(boxes)
    def test_one_iff_identical_up_to_period(self, a):
        assert obb_iou_3d(a, a.moved(yaw=a.yaw + 2 * math.pi)) == pytest.approx(1.0)
        assert obb_iou_3d(a, a.moved(center=a.center + np.array([0.01, 0, 0]))) < 1.0


class TestFootprint:
    def test_axis_aligned(self):
        fp = footprint_polygon(OrientedBox3((0, 0, 0), (1, 1, 2), 0.0))
        np.testing.assert_allclose(fp.vertices.min(axis=0), [-1, -2])
        np.testing.assert_allclose(fp.vertices.max(axis=0), [1, 2])
        assert fp.area == pytest.approx(8.0)

    def test_quarter_turn_swaps_extents(self):
        fp = footprint_polygon(OrientedBox3((0, 0, 0), (1, 1, 2), math.pi / 2))
        np.testing.assert_allclose(fp.vertices.max(axis=0), [2, 1], atol=1e-12)

    def test_eighth_turn_distance(self):
        fp = footprint_polygon(OrientedBox3((0, 0, 0), (0.5, 0.5, 0.5), math.pi / 4))
        np.testing.assert_allclose(np.hypot(*fp.vertices.T), math.sqrt(2) * 0.5)
        # a corner now lies on an axis
        assert np.isclose(np.abs(fp.vertices).max(), math.sqrt(2) * 0.5)


class TestPolygon:
    def test_rejects_clockwise(self):
        with pytest.raises(GeometryError):
            Polygon2([(0, 0), (0, 1), (1, 1), (1, 0)])

    def test_rejects_self_intersecting(self):
        assert not is_simple(np.array([(0, 0), (1, 1), (1, 0), (0, 1)]))

    def test_l_shape_area_and_orientation(self):
        assert signed_area(L_SHAPE.vertices) == pytest.approx(12.0)
        assert polygon_area(L_SHAPE.vertices[::-1]) == pytest.approx(12.0)

    def test_point_queries(self):
        assert point_in_polygon(Polygon2([(0, 0), (2, 0), (2, 2), (0, 2)]).centroid(), L_SHAPE)
        assert not point_in_polygon((5, 5), L_SHAPE)
        assert point_in_polygon((1, 0), L_SHAPE)
        assert point_in_polygon((3, 2), L_SHAPE)
        assert not point_in_polygon((3, 3), L_SHAPE)


class TestWalls:
    def test_unit_square(self):
        sq = Polygon2([(0, 0), (1, 0), (1, 1), (0, 1)])
        walls = wall_barriers(sq, thickness=5.0)
        assert len(walls) == 4
        for w in walls:
            assert 2 * w.half_extents[0] == pytest.approx(1.0)
            assert 2 * w.half_extents[2] == pytest.approx(5.0)
            assert np.hypot(w.center[0] - 0.5, w.center[2] - 0.5) == pytest.approx(3.0)

    def test_rectangle_lengths(self):
        rect = Polygon2([(0, 0), (4, 0), (4, 2), (0, 2)])
        lengths = [2 * w.half_extents[0] for w in wall_barriers(rect)]
        assert lengths == pytest.approx([4, 2, 4, 2])

    def test_interior_boxes_never_touch_walls(self):
        rng = np.random.default_rng(0)
        walls = wall_barriers(L_SHAPE)
        room = shapely.Polygon(L_SHAPE.vertices)
        checked = 0
        while checked < 200:
            c = rng.uniform(0, 4, 2)
            box = OrientedBox3((c[0], 0.5, c[1]), rng.uniform(0.05, 0.4, 3), rng.uniform(-math.pi, math.pi))
            if not room.contains(shapely.Polygon(box.footprint_corners())):
                continue
            checked += 1
            assert all(obb_iou_3d(box, w) == 0.0 for w in walls)


class TestRaster:
    def test_square_unit_resolution(self):
        sq = Polygon2([(0, 0), (2, 0), (2, 2), (0, 2)])
        grid = rasterize_polygon(sq, RasterSpec((0, 0), 1.0, 2, 2))
        assert grid.cells.sum() == 4

    def test_sliver_hits_no_center(self):
        sliver = Polygon2([(0.1, 0), (0.2, 0), (0.2, 2), (0.1, 2)])
        grid = rasterize_polygon(sliver, RasterSpec((0, 0), 1.0, 1, 2))
        assert grid.cells.sum() == 0

    def test_spec_too_small(self):
        with pytest.raises(GeometryError):
            rasterize_polygon(L_SHAPE, RasterSpec((0, 0), 1.0, 2, 2))

    def test_matches_point_queries(self):
        spec = RasterSpec.covering(L_SHAPE, 0.1)
        grid = rasterize_polygon(L_SHAPE, spec)
        centers = spec.cell_centers()
        expected = np.array(
            [[point_in_polygon(centers[r, c], L_SHAPE) for c in range(spec.width)] for r in range(spec.height)]
        )
        np.testing.assert_array_equal(grid.cells, expected)
