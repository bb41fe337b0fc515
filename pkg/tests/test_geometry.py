import math
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from fsodbench.geometry import (
    BBox, ImageDims, InvalidBoxError, area, clip, crop_region, dedupe, iou, iou_matrix,
)
from oracles import iou_exact
from strategies import boxes, real_boxes

D100 = ImageDims(100, 100)


@pytest.mark.parametrize("coords, expected", [
    ((0, 0, 10, 10), 100),   # [TRIVIAL]
    ((0, 0, 1, 1), 1),       # [TRIVIAL]
    ((2, 3, 7, 5), 10),      # [DERIVED] 5 x 2 by hand
])
def test_area(coords, expected):
    assert area(BBox(*coords)) == expected


def test_iou_examples():
    a = BBox(0, 0, 10, 10)
    assert iou(a, BBox(0, 0, 10, 10)) == 1.0
    assert iou(a, BBox(20, 20, 30, 30)) == 0.0
    # [DERIVED] inter 50, union 150
    assert iou(a, BBox(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)
    assert iou_exact((0, 0, 10, 10), (5, 0, 15, 10)) == Fraction(1, 3)


def test_touching_boxes_do_not_overlap():
    assert iou(BBox(0, 0, 10, 10), BBox(10, 0, 20, 10)) == 0.0


@pytest.mark.parametrize("coords", [(0, 0, 0, 10), (5, 5, 4, 9), (0, 0, math.inf, 1), (0, math.nan, 1, 1)])
def test_invalid_boxes_rejected(coords):
    with pytest.raises(InvalidBoxError):
        BBox(*coords)


def test_image_dims_positive():
    with pytest.raises(ValueError):
        ImageDims(0, 5)


def test_xywh_roundtrip():
    b = BBox.from_xywh(3, 4, 5, 6)
    assert b.as_list() == [3, 4, 8, 10]
    assert b.as_xywh() == [3, 4, 5, 6]


def test_clip_examples():
    assert clip(BBox(-5, -5, 5, 5), D100) == BBox(0, 0, 5, 5)
    inside = BBox(10, 10, 20, 20)
    assert clip(inside, D100) is inside
    assert clip(BBox(200, 200, 300, 300), D100) is None
    # an edge-touching box clips to zero area
    assert clip(BBox(100, 0, 120, 10), D100) is None


def test_crop_region_examples():
    b = BBox(10, 10, 20, 20)
    assert crop_region(b, D100, 0) == clip(b, D100)
    assert crop_region(b, D100, 0.1) == BBox(9, 9, 21, 21)                 # [DERIVED] pad 1
    assert crop_region(BBox(0, 0, 10, 10), D100, 0.5) == BBox(0, 0, 15, 15)  # [DERIVED] pad 5, clamped
    # pad uses the longer side
    assert crop_region(BBox(40, 40, 60, 50), D100, 0.1) == BBox(38, 38, 62, 52)


def test_crop_region_errors():
    with pytest.raises(InvalidBoxError):
        crop_region(BBox(150, 150, 160, 160), D100, 0.1)
    with pytest.raises(ValueError):
        crop_region(BBox(1, 1, 2, 2), D100, -0.1)


def test_dedupe_keeps_first_of_duplicates():
    a = BBox(0, 0, 10, 10)
    near = BBox(0, 0, 10, 10.2)  # iou ~0.98
    far = BBox(0, 0, 10, 12)     # iou ~0.83
    assert dedupe([a, a, near, far]) == [a, far]


@given(boxes(), boxes())
def test_iou_matches_exact_oracle(a, b):
    assert iou(a, b) == pytest.approx(float(iou_exact(a.as_list(), b.as_list())), abs=1e-12)


@given(real_boxes(), real_boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(real_boxes())
def test_iou_self_is_one(a):
    assert iou(a, a) == 1.0


@given(boxes(), st.integers(0, 40), st.integers(0, 40), st.integers(0, 40), st.integers(0, 40))
def test_containment_monotone(b, l, t, r, btm):
    # b inside b' inside a  =>  iou(a, b) <= iou(a, b')
    b2 = BBox(b.x_min - l, b.y_min - t, b.x_max + r, b.y_max + btm)
    a = BBox(b2.x_min - 5, b2.y_min - 5, b2.x_max + 5, b2.y_max + 5)
    assert iou(a, b) <= iou(a, b2) + 1e-12


@given(real_boxes(), st.integers(1, 300), st.integers(1, 300))
def test_clip_idempotent_and_inside(b, w, h):
    d = ImageDims(w, h)
    c = clip(b, d)
    if c is None:
        return
    assert clip(c, d) == c
    assert BBox(0, 0, w, h).contains(c)


@given(st.lists(boxes(), max_size=6), st.lists(boxes(), max_size=6))
def test_iou_matrix_matches_scalar(a, b):
    m = iou_matrix(a, b)
    assert m.shape == (len(a), len(b))
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            assert m[i, j] == pytest.approx(iou(x, y), abs=1e-12)


@given(boxes(max_coord=100), st.floats(0, 2))
def test_crop_padding_monotone(b, margin):
    inner = crop_region(b, D100, 0)
    outer = crop_region(b, D100, margin)
    assert outer.contains(inner)
