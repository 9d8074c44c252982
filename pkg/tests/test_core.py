"""Exact pixel geometry: boxes, regions, region sets, and IoU."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from som_annotate.core import (
    BBox,
    BothEmpty,
    EmptyRegion,
    GridMismatch,
    PixelRegion,
    RasterImage,
    RegionSet,
    bbox_of_region,
    iou,
    region_area,
    union_pixels,
)


class TestBBox:
    def test_fields_and_derived(self):
        b = BBox(x=2, y=3, w=4, h=5)
        assert (b.x2, b.y2) == (6, 8)
        assert b.area == 20
        assert b.as_list() == [2, 3, 4, 5]
        assert BBox.from_list([2, 3, 4, 5]) == b

    @pytest.mark.parametrize("kwargs", [
        dict(x=0, y=0, w=0, h=1),
        dict(x=0, y=0, w=1, h=0),
        dict(x=-1, y=0, w=1, h=1),
        dict(x=0, y=-2, w=1, h=1),
    ])
    def test_rejects_degenerate(self, kwargs):
        with pytest.raises(ValueError):
            BBox(**kwargs)

    def test_rejects_non_int(self):
        with pytest.raises(ValueError):
            BBox(x=0.5, y=0, w=1, h=1)
        with pytest.raises(ValueError):
            BBox(x=True, y=0, w=1, h=1)

    def test_unit_box_covers_one_pixel(self):
        b = BBox(x=7, y=9, w=1, h=1)
        assert b.area == 1
        assert (b.x2, b.y2) == (8, 10)


class TestPixelRegion:
    def test_from_pixels_and_membership(self):
        r = PixelRegion.from_pixels(3, 2, [(0, 2), (1, 2)])
        assert r.membership() == {(0, 2), (1, 2)}
        assert r.area == 2
        assert (r.width, r.height) == (3, 2)

    def test_empty_and_full(self):
        assert PixelRegion.empty(4, 3).area == 0
        assert PixelRegion.full(4, 3).area == 12

    def test_out_of_range_pixel(self):
        with pytest.raises(ValueError):
            PixelRegion.from_pixels(3, 2, [(2, 0)])
        with pytest.raises(ValueError):
            PixelRegion.from_pixels(3, 2, [(0, 3)])

    def test_mask_is_read_only(self):
        r = PixelRegion.full(2, 2)
        with pytest.raises(ValueError):
            r.mask[0, 0] = False

    def test_equality_includes_grid(self):
        a = PixelRegion.empty(2, 3)
        b = PixelRegion.empty(3, 2)
        assert a != b
        assert a == PixelRegion.empty(2, 3)


class TestRegionSet:
    def test_members_must_fit_grid(self):
        with pytest.raises(GridMismatch):
            RegionSet.from_boxes(5, 5, [BBox(3, 3, 4, 1)])
        with pytest.raises(GridMismatch):
            RegionSet(width=5, height=5,
                      members=(PixelRegion.full(4, 4),))

    def test_union_pixels_merges_overlap(self):
        rs = RegionSet.from_boxes(10, 10, [BBox(0, 0, 4, 4), BBox(2, 2, 4, 4)])
        merged = union_pixels(rs)
        assert merged.area == 16 + 16 - 4

    def test_union_of_empty_set_is_empty(self):
        assert union_pixels(RegionSet.from_boxes(5, 5, [])).area == 0


class TestBBoxOfRegion:
    def test_tight_box(self):
        r = PixelRegion.from_pixels(10, 10, [(2, 3), (5, 7)])
        assert bbox_of_region(r) == BBox(x=3, y=2, w=5, h=4)

    def test_empty_region_raises(self):
        with pytest.raises(EmptyRegion):
            bbox_of_region(PixelRegion.empty(3, 3))

    def test_region_area_counts_members(self):
        assert region_area(PixelRegion.from_pixels(4, 4, [(0, 0), (3, 3)])) == 2


def brute_iou_boxes(width, height, g_boxes, p_boxes):
    """Set-membership oracle, no arrays, no shared code with iou()."""
    g = {(r, c) for x, y, w, h in g_boxes
         for r in range(y, y + h) for c in range(x, x + w)}
    p = {(r, c) for x, y, w, h in p_boxes
         for r in range(y, y + h) for c in range(x, x + w)}
    return Fraction(len(g & p), len(g | p))


class TestIou:
    def test_identical_boxes_score_one(self):
        g = RegionSet.from_boxes(20, 20, [BBox(1, 1, 5, 5)])
        assert iou(g, g) == 1

    def test_offset_overlap_example(self):
        g = RegionSet.from_boxes(20, 20, [BBox(0, 0, 10, 10)])
        p = RegionSet.from_boxes(20, 20, [BBox(5, 5, 10, 10)])
        assert iou(g, p) == Fraction(25, 175)

    def test_disjoint_boxes_score_zero(self):
        g = RegionSet.from_boxes(20, 20, [BBox(0, 0, 5, 5)])
        p = RegionSet.from_boxes(20, 20, [BBox(10, 10, 5, 5)])
        assert iou(g, p) == 0

    def test_multi_region_sets(self):
        g = RegionSet.from_boxes(20, 20, [BBox(0, 0, 4, 4), BBox(10, 10, 4, 4)])
        p = RegionSet.from_boxes(20, 20, [BBox(0, 0, 4, 4)])
        assert iou(g, p) == Fraction(16, 32)

    def test_grid_mismatch(self):
        g = RegionSet.from_boxes(10, 10, [BBox(0, 0, 2, 2)])
        p = RegionSet.from_boxes(11, 10, [BBox(0, 0, 2, 2)])
        with pytest.raises(GridMismatch):
            iou(g, p)

    def test_both_empty_is_an_error(self):
        g = RegionSet.from_boxes(10, 10, [])
        with pytest.raises(BothEmpty):
            iou(g, g)

    def test_accepts_pixel_regions(self):
        g = RegionSet.from_boxes(10, 10, [BBox(0, 0, 4, 4)])
        p = RegionSet.from_boxes(10, 10, [BBox(2, 2, 4, 4)])
        assert iou(union_pixels(g), union_pixels(p)) == iou(g, p)

    def test_mixed_box_and_pixel_members(self):
        pixels = PixelRegion.from_pixels(10, 10, [(0, 0), (0, 1)])
        g = RegionSet(width=10, height=10, members=(pixels,))
        p = RegionSet.from_boxes(10, 10, [BBox(0, 0, 2, 1)])
        assert iou(g, p) == 1


def _boxes_strategy(width, height):
    return st.lists(
        st.tuples(st.integers(0, width - 1), st.integers(0, height - 1),
                  st.integers(1, width), st.integers(1, height))
        .map(lambda t: (t[0], t[1], min(t[2], width - t[0]),
                        min(t[3], height - t[1]))),
        min_size=0, max_size=3)


@given(data=st.data())
@settings(max_examples=150, deadline=None)
def test_iou_matches_membership_oracle(data):
    width = data.draw(st.integers(1, 24), label="width")
    height = data.draw(st.integers(1, 24), label="height")
    g_boxes = data.draw(_boxes_strategy(width, height), label="g")
    p_boxes = data.draw(_boxes_strategy(width, height), label="p")
    g = RegionSet.from_boxes(width, height, [BBox(*b) for b in g_boxes])
    p = RegionSet.from_boxes(width, height, [BBox(*b) for b in p_boxes])
    if not g_boxes and not p_boxes:
        with pytest.raises(BothEmpty):
            iou(g, p)
        return
    value = iou(g, p)
    assert value == brute_iou_boxes(width, height, g_boxes, p_boxes)
    assert 0 <= value <= 1
    assert value == iou(p, g)


class TestRasterImage:
    def test_filled_and_shape(self):
        img = RasterImage.filled(4, 3, (10, 20, 30))
        assert img.grid == (4, 3)
        assert np.array_equal(img.array[0, 0], [10, 20, 30])

    def test_array_read_only_but_copy_writable(self):
        img = RasterImage.filled(2, 2)
        with pytest.raises(ValueError):
            img.array[0, 0, 0] = 1
        copy = img.mutable_copy()
        copy[0, 0, 0] = 1
        assert img.array[0, 0, 0] == 255

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            RasterImage(np.zeros((3, 3), dtype=np.uint8))
        with pytest.raises(ValueError):
            RasterImage(np.zeros((0, 3, 3), dtype=np.uint8))
