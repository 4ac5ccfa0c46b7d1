import numpy as np
import pytest

from deepbox.errors import DimensionError, GeometryError
from deepbox.netdef import NetConfig, build_net
from deepbox.rerank import score_consistency_check
from deepbox.roipool import (FastDeepBoxNet, RoIGrid, ScaleSet, forward_objectness_fast, project_box, project_boxes,
                             roi_maxpool, roi_maxpool_backward, roi_maxpool_batch, roi_maxpool_fast,
                              select_scale, select_scales)
from deepbox.tensorcore import softmax_xent
from oracles import numeric_grad, rel_error, roi_pool_naive


def test_project_box_example():
    assert project_box((16, 16, 80, 80), 8) == (2, 2, 10, 10)
    assert project_box((17, 17, 18, 18), 8) == (2, 2, 3, 3)  # at least one cell
    assert project_boxes(np.array([[16.0, 16, 80, 80]]), 8, 20, 20).tolist() == [[2, 2, 10, 10]]


def test_project_box_outside_raises():
    with pytest.raises(GeometryError):
        project_box((200, 0, 240, 40), 8, feat_h=10, feat_w=10)
    with pytest.raises(GeometryError):
        project_boxes(np.array([[0.0, 200, 40, 240]]), 8, 10, 10)


def test_roi_pool_matches_bruteforce_exhaustively():
    rng = np.random.default_rng(0)
    count = 0
    for h in range(1, 7):
        for w in range(1, 7):
            feats = rng.integers(-4, 5, size=(2, h, w)).astype(np.float32)  # ties on purpose
            for by in range(1, 5):
                for bx in range(1, 5):
                    y0, x0 = int(rng.integers(0, h)), int(rng.integers(0, w))
                    y1, x1 = int(rng.integers(y0 + 1, h + 1)), int(rng.integers(x0 + 1, w + 1))
                    roi = (x0, y0, x1, y1)
                    ref, arg = roi_pool_naive(feats, roi, by, bx)
                    got, garg = roi_maxpool(feats, roi, RoIGrid(by, bx))
                    assert np.array_equal(got, ref)
                    assert np.array_equal(garg, arg)
                    assert np.array_equal(roi_maxpool_fast(feats, roi, RoIGrid(by, bx)), ref)
                    count += 1
    assert count >= 100


def test_batched_roi_pool_matches_bruteforce():
    rng = np.random.default_rng(7)
    for _ in range(100):
        c, h, w = int(rng.integers(1, 5)), int(rng.integers(1, 12)), int(rng.integers(1, 12))
        feats = rng.integers(-3, 4, size=(c, h, w)).astype(np.float32)
        rois = []
        for _ in range(int(rng.integers(1, 6))):
            y0, x0 = int(rng.integers(0, h)), int(rng.integers(0, w))
            rois.append((x0, y0, int(rng.integers(x0 + 1, w + 1)), int(rng.integers(y0 + 1, h + 1))))
        grid = RoIGrid(int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        got, garg = roi_maxpool_batch(feats, np.array(rois), grid)
        for k, roi in enumerate(rois):
            ref, arg = roi_pool_naive(feats, roi, grid.bins_y, grid.bins_x)
            assert np.array_equal(got[k], ref)
            assert np.array_equal(garg[k], arg)
    with pytest.raises(GeometryError):
        roi_maxpool_batch(np.zeros((1, 4, 4)), np.array([[0, 0, 5, 4]]), RoIGrid(2, 2))


def test_roi_pool_empty_bins_replicate():
    feats = np.arange(4, dtype=np.float32).reshape(1, 2, 2)
    out, _ = roi_maxpool(feats, (0, 0, 2, 2), RoIGrid(4, 4))
    assert out.shape == (1, 4, 4)
    assert out[0].tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]


def test_roi_pool_invalid_roi():
    with pytest.raises(GeometryError):
        roi_maxpool(np.zeros((1, 4, 4)), (0, 0, 5, 4))
    with pytest.raises(DimensionError):
        roi_maxpool(np.zeros((4, 4)), (0, 0, 2, 2))


def test_roi_pool_gradients():
    rng = np.random.default_rng(1)
    for _ in range(20):
        c, h, w = 2, int(rng.integers(2, 8)), int(rng.integers(2, 8))
        feats = rng.permutation(c * h * w).reshape(c, h, w) * 0.01
        y0, x0 = int(rng.integers(0, h)), int(rng.integers(0, w))
        roi = (x0, y0, int(rng.integers(x0 + 1, w + 1)), int(rng.integers(y0 + 1, h + 1)))
        grid = RoIGrid(int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        out, arg = roi_maxpool(feats, roi, grid)
        r = rng.standard_normal(out.shape)
        d = roi_maxpool_backward(r, arg, feats.shape)
        num = numeric_grad(lambda: float(np.sum(roi_maxpool(feats, roi, grid)[0] * r)), feats)
        assert rel_error(d, num) < 1e-3


def test_scale_selection_example():
    idx, factor = select_scale((0, 0, 50, 50), 500, 700)
    assert idx == 2 and factor == pytest.approx(900 / 500)
    assert select_scales(np.array([[0.0, 0, 50, 50]]), 500, 700).tolist() == [2]


def test_scale_selection_tie_goes_to_smaller():
    b = (0, 0, 10, 10)  # area 100 at factor 1, 900 at factor 3
    tie = ScaleSet((100, 300), target_area=500.0)
    assert select_scale(b, 100, 100, tie)[0] == 0
    assert select_scales(np.array([b], dtype=float), 100, 100, tie).tolist() == [0]
    assert select_scale(b, 100, 100, ScaleSet((100, 300), target_area=501.0))[0] == 1


def test_crop_and_fast_paths_agree_on_aligned_box():
    rng = np.random.default_rng(2)
    params = build_net(NetConfig.for_profile("small", seed=7, init_std=0.05))
    params.mean[:] = (120, 110, 100)
    for _ in range(3):
        img = rng.integers(0, 256, (140, 140, 3)).astype(np.uint8)
        assert score_consistency_check(params, img, [(0, 0, 140, 140)]) < 1e-5


def test_fast_path_is_permutation_equivariant():
    rng = np.random.default_rng(3)
    params = build_net(NetConfig.for_profile("small", seed=1, init_std=0.05))
    img = rng.integers(0, 256, (120, 160, 3)).astype(np.uint8)
    x0 = rng.uniform(0, 100, 30)
    y0 = rng.uniform(0, 70, 30)
    boxes = np.stack([x0, y0, x0 + rng.uniform(10, 60, 30), y0 + rng.uniform(10, 50, 30)], axis=1)
    scales = ScaleSet((120, 240, 360))
    s = forward_objectness_fast(params, img, boxes, scales)
    perm = rng.permutation(30)
    assert np.array_equal(forward_objectness_fast(params, img, boxes[perm], scales), s[perm])


def test_fast_path_grid_must_fit_fc6():
    params = build_net(NetConfig.for_profile("small"))
    img = np.zeros((140, 140, 3), np.uint8)
    with pytest.raises(DimensionError):
        forward_objectness_fast(params, img, [(0, 0, 140, 140)], grid=RoIGrid(4, 4))


def test_fast_net_end_to_end_gradient():
    cfg = NetConfig(profile="small", input_side=27, conv1=(3, 2, 2), pool=(2, 2), conv2=(3, 3, 1), fc6=4,
                    pads=(0, 1), init_std=0.5, seed=3)
    p = build_net(cfg)
    p.weights = {k: v.astype(np.float64) for k, v in p.weights.items()}
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 3, 40, 36))
    rois = [(0, 0, 8, 9), (2, 1, 6, 5), (3, 3, 8, 9)]
    y = np.array([1, 0, 1])
    net = FastDeepBoxNet(cfg)
    loss, d = softmax_xent(net.forward(p, [(x, rois)]), y)
    grads = net.backward(d)

    def f():
        return softmax_xent(FastDeepBoxNet(cfg).forward(p, [(x, rois)]), y)[0]
    for name in ("conv1.w", "conv2.w", "fc6.w", "fc7.b"):
        assert rel_error(grads[name], numeric_grad(f, p.weights[name])) < 1e-3
