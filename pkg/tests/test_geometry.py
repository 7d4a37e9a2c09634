import pytest
from hypothesis import given, strategies as st

from detpo.geometry import BoundingBox, CoordinateSpace, CoordinateSpaceError, convert, convert_values, iou


def box(x1, y1, x2, y2, space=None):
    return BoundingBox(x1, y1, x2, y2) if space is None else BoundingBox(x1, y1, x2, y2, space)


def test_iou_examples():
    assert iou(box(0, 0, 10, 10), box(0, 0, 10, 10)) == 1.0
    assert iou(box(0, 0, 10, 10), box(20, 20, 30, 30)) == 0.0
    assert iou(box(0, 0, 10, 10), box(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_degenerate_is_zero():
    p = box(3, 3, 3, 3)
    assert iou(p, p) == 0.0
    assert iou(p, box(0, 0, 10, 10)) == 0.0


def test_iou_rejects_mixed_spaces():
    with pytest.raises(CoordinateSpaceError):
        iou(box(0, 0, 1, 1), box(0, 0, 1, 1, CoordinateSpace.per_mille()))


def test_convert_examples():
    pm = CoordinateSpace.per_mille()
    assert convert(box(0, 0, 1000, 1000, pm), pm, CoordinateSpace.pixel(640, 480)).as_list() == [0, 0, 640, 480]
    assert convert(box(0, 0, 500, 500, pm), pm, CoordinateSpace.pixel(200, 100)).as_list() == [0, 0, 100, 50]


def test_yxyx_per_mille_decoding():
    src = CoordinateSpace.per_mille("yxyx")
    assert convert_values([100, 200, 300, 400], src, CoordinateSpace.pixel(1000, 1000)) == [200, 100, 400, 300]


def test_decode_swaps_inverted_corners():
    b = CoordinateSpace.pixel(100, 100).decode([50, 60, 10, 20])
    assert b.as_list() == [10, 20, 50, 60]


def test_per_mille_encoding_is_integral():
    pm = CoordinateSpace.per_mille()
    assert pm.encode(box(1.4, 2.6, 3.5, 999.9, pm)) == [1, 3, 4, 1000]


def test_non_positive_dimensions_rejected():
    with pytest.raises(ValueError):
        CoordinateSpace.pixel(0, 10)
    with pytest.raises(ValueError):
        convert(box(0, 0, 1, 1), CoordinateSpace.per_mille(), CoordinateSpace("pixel", None, None))


def test_from_xywh_preserves_area():
    b = BoundingBox.from_xywh(10, 10, 20, 20)
    assert b.as_list() == [10, 10, 30, 30]
    assert b.area == 400


coord = st.floats(0, 500, allow_nan=False)


@st.composite
def boxes(draw):
    x1, x2 = sorted((draw(coord), draw(coord)))
    y1, y2 = sorted((draw(coord), draw(coord)))
    return BoundingBox(x1, y1, x2, y2)


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)


@given(boxes())
def test_iou_self_is_one(a):
    if a.area > 1e-6:
        assert iou(a, a) == pytest.approx(1.0)


@given(boxes(), st.integers(1, 4000), st.integers(1, 4000), st.sampled_from(["xyxy", "yxyx"]))
def test_pixel_per_mille_round_trip(b, w, h, order):
    px = CoordinateSpace.pixel(w, h)
    b = b.clamp(w, h)
    pm = CoordinateSpace.per_mille(order)
    back = convert(convert(b, px, pm), pm, px)
    for u, v in zip(b.as_list(), back.as_list()):
        assert abs(u - v) <= 1.0
    # through the integer serialization as well
    raw = convert_values(px.encode(b), px, pm)
    back = CoordinateSpace.pixel(w, h).decode(convert_values(raw, pm, px))
    for u, v in zip(b.as_list(), back.as_list()):
        assert abs(u - v) <= max(1.0, 0.5 * max(w, h) / 1000 + 1e-9)
