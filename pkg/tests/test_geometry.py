import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from deepbox.errors import GeometryError
from deepbox.geometry import (Box, PerturbConfig, as_boxes, clip_to_image, iou, iou_matrix, max_iou,
                              perturb_gt, perturb_many)
from oracles import iou_brute

coord = st.floats(-1000, 1000, allow_nan=False)


@st.composite
def boxes(draw):
    x0, y0 = draw(coord), draw(coord)
    w = draw(st.floats(0.01, 500))
    h = draw(st.floats(0.01, 500))
    return Box(x0, y0, x0 + w, y0 + h)


def test_box_rejects_bad_coordinates():
    with pytest.raises(GeometryError):
        Box(10, 0, 5, 5)
    with pytest.raises(GeometryError):
        Box(0, 0, float("nan"), 5)
    with pytest.raises(GeometryError):
        Box(0, 0, 0, 5)


def test_area_is_half_open():
    assert Box(0, 0, 10, 20).area == 200


def test_iou_examples():
    assert iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0
    assert iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == pytest.approx(1 / 3)
    assert iou(Box(0, 0, 10, 10), Box(10, 0, 20, 10)) == 0.0


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a, a) == pytest.approx(1.0)


@given(st.lists(boxes(), min_size=1, max_size=6), st.lists(boxes(), min_size=1, max_size=6))
def test_iou_matrix_matches_pairwise(a, b):
    m = iou_matrix([x.to_array() for x in a], [y.to_array() for y in b])
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            assert m[i, j] == pytest.approx(iou_brute(tuple(x), tuple(y)), abs=1e-12)


def test_max_iou_with_no_gt_is_zero():
    assert max_iou([[0, 0, 5, 5]], np.zeros((0, 4))).tolist() == [0.0]


def test_as_boxes_shape_check():
    with pytest.raises(GeometryError):
        as_boxes([[1, 2, 3]])


def test_clip_to_image():
    assert tuple(clip_to_image(Box(-5, -5, 50, 50), 40, 30)) == (0, 0, 40, 30)
    with pytest.raises(GeometryError):
        clip_to_image(Box(50, 50, 60, 60), 40, 30)
    with pytest.raises(GeometryError):
        clip_to_image(Box(0, 0, 1, 1), 0, 30)


@given(boxes(), st.floats(1, 2000), st.floats(1, 2000))
def test_clip_stays_inside_or_raises(b, w, h):
    try:
        c = clip_to_image(b, w, h)
    except GeometryError:
        return
    assert 0 <= c.x_min < c.x_max <= w and 0 <= c.y_min < c.y_max <= h


def test_perturb_gamma_zero_is_identity():
    b = Box(10, 10, 110, 210)
    assert perturb_gt(b, PerturbConfig(gamma=0.0), 300, 300) == b


def test_perturb_interval_and_border():
    rng = np.random.default_rng(0)
    b = Box(10, 10, 110, 210)
    xs = np.array([perturb_gt(b, PerturbConfig(gamma=0.2), 300, 300, rng).x_min for _ in range(2000)])
    assert xs.min() >= 0 and xs.max() <= 30
    assert (xs == 0).mean() > 0.1  # the [-10, 0) quarter lands on the border


def test_perturb_x_min_is_uniform():
    rng = np.random.default_rng(1)
    gt = np.tile([[100.0, 100.0, 200.0, 300.0]], (100_000, 1))
    out = perturb_many(gt, 0.2, 10_000, 10_000, rng)
    u = (out[:, 0] - 80.0) / 40.0
    assert stats.kstest(u, "uniform").pvalue > 0.01


@settings(max_examples=200)
@given(boxes(), st.integers(0, 2**32 - 1))
def test_perturbed_box_overlaps_gt(b, seed):
    w, h = b.x_max + 50, b.y_max + 50
    if b.x_min < 0 or b.y_min < 0:
        return
    p = perturb_gt(b, PerturbConfig(gamma=0.2), w, h, np.random.default_rng(seed))
    assert iou(b, p) > 0


def test_perturb_config_range():
    with pytest.raises(ValueError):
        PerturbConfig(gamma=0.5)
