import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physcene.scene import (
    NormStats,
    ObjectSlot,
    SceneCodec,
    SceneLayout,
    Taxonomy,
    pad_slots,
    slots_to_boxes,
)
from physcene.synthetic import GeneratorConfig, generate_dataset

TAX = Taxonomy()
STATS = NormStats((0.1, 0.1, 0.1), (3.0, 2.5, 3.0), (-3.0, 0.0, -3.0), (3.0, 2.0, 3.0))


def _scene(*slots):
    return SceneLayout(pad_slots(list(slots), TAX, 12))


def _slot(cat="bed", size=(1.6, 0.5, 2.0), yaw=0.3, loc=(0.5, 0.25, -1.0), seed=0):
    feat = np.random.default_rng(seed).normal(size=32)
    return ObjectSlot.make(TAX, cat, size, yaw, loc, feat)


class TestTaxonomy:
    def test_channels(self):
        assert TAX.n_named == 8
        assert TAX.n_channels == 9
        assert TAX.empty_index == 8
        assert TAX.slot_dim == 49

    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            Taxonomy(("a", "a"))

    def test_unknown_category(self):
        with pytest.raises(KeyError):
            TAX.index("piano")


class TestCodec:
    codec = SceneCodec(TAX, STATS)

    def test_dim(self):
        assert self.codec.dim == 12 * 49

    def test_location_at_min_and_midpoint(self):
        x = self.codec.encode(_scene(_slot(loc=(-3.0, 1.0, 0.0))))
        row = self.codec.slot_rows(x)[0]
        assert row[self.codec.loc][0] == -1.0
        assert row[self.codec.loc][1] == 0.0
        assert row[self.codec.loc][2] == 0.0

    def test_category_mapping_and_empty_geometry(self):
        rows = self.codec.slot_rows(self.codec.encode(_scene(_slot())))
        assert rows[0, 0] == 1.0 and np.all(rows[0, 1:9] == -1.0)
        assert rows[1, TAX.empty_index] == 1.0
        assert np.all(rows[1, 9:] == 0.0)

    def test_round_trip(self):
        scene = _scene(_slot(), _slot("chair", (0.5, 0.9, 0.5), -2.0, (-1.0, 0.45, 2.0), 1))
        back = self.codec.decode(self.codec.encode(scene))
        for a, b in zip(scene.slots, back.slots):
            assert a.category_index == b.category_index
            for name in ("size", "orientation", "location", "shape_feature"):
                np.testing.assert_allclose(getattr(a, name), getattr(b, name), atol=1e-9)

    def test_out_of_range_clamps_and_counts(self):
        codec = SceneCodec(TAX, STATS)
        x = codec.encode(_scene(_slot(loc=(10.0, 0.2, 0.0))))
        assert codec.clamp_count == 1
        assert codec.slot_rows(x)[0, codec.loc][0] == 1.0

    def test_orientation_renormalized(self):
        for raw, expected in (((0.6, 0.8), (0.6, 0.8)), ((3.0, 4.0), (0.6, 0.8)), ((0.0, 0.0), (1.0, 0.0))):
            x = self.codec.encode(_scene(_slot()))
            rows = self.codec.slot_rows(x)
            rows[0, self.codec.orient] = raw
            np.testing.assert_allclose(self.codec.decode(x).slots[0].orientation, expected, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_decode_is_total(self, seed):
        x = np.random.default_rng(seed).normal(0, 3, self.codec.dim)
        scene = self.codec.decode(x)
        assert len(scene.slots) == 12
        for _, slot in scene.occupied():
            assert math.isclose(np.linalg.norm(slot.orientation), 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_decode_encode_idempotent(self, seed):
        x = np.random.default_rng(seed).uniform(-1, 1, self.codec.dim)
        once = self.codec.decode(x)
        twice = self.codec.decode(self.codec.encode(once))
        np.testing.assert_allclose(self.codec.encode(once), self.codec.encode(twice), atol=1e-12)

    @given(st.floats(-5, 5, allow_nan=False))
    def test_argmax_shift_invariant(self, shift):
        x = np.random.default_rng(0).normal(size=self.codec.dim)
        y = x.copy()
        self.codec.slot_rows(y)[:, self.codec.cat] += shift
        a, b = self.codec.decode(x), self.codec.decode(y)
        assert [s.category_index for s in a.slots] == [s.category_index for s in b.slots]

    def test_round_trip_on_generated_scenes(self):
        samples = generate_dataset(GeneratorConfig(seed=4), 30)
        stats = NormStats.from_scenes([s.scene for s in samples])
        codec = SceneCodec(TAX, stats)
        for s in samples:
            np.testing.assert_allclose(
                codec.encode(codec.decode(codec.encode(s.scene))), codec.encode(s.scene), atol=1e-9
            )
        assert codec.clamp_count == 0


class TestBoxes:
    def test_empty_scene(self):
        assert slots_to_boxes(_scene()) == []

    def test_axis_aligned(self):
        [(i, box)] = slots_to_boxes(_scene(_slot(size=(2, 1, 2), yaw=0.0)))
        assert i == 0
        np.testing.assert_allclose(box.half_extents, (1, 0.5, 1))
        assert box.yaw == 0.0

    def test_periodic_yaw(self):
        a = slots_to_boxes(_scene(_slot(yaw=0.7)))[0][1]
        b = slots_to_boxes(_scene(_slot(yaw=0.7 + 2 * math.pi)))[0][1]
        np.testing.assert_allclose(a.footprint_corners(), b.footprint_corners(), atol=1e-12)

    def test_non_positive_size_skipped(self):
        bad = _slot()
        bad.size = np.array([1.0, -0.2, 1.0])
        assert slots_to_boxes(_scene(bad, _slot())) != [] and len(slots_to_boxes(_scene(bad, _slot()))) == 1


class TestNormStats:
    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            NormStats((1, 1, 1), (1, 2, 2), (0, 0, 0), (1, 1, 1))

    def test_dict_round_trip(self):
        assert NormStats.from_dict(STATS.to_dict()).to_dict() == STATS.to_dict()
