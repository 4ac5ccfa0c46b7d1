"""Shared-feature scoring: conv features once per scale, RoI max-pooling per box.

Feature maps come from the trunk (conv1-relu-pool-conv2-relu) run over the whole
resized image. A box is projected onto the map by the total stride, split into a
fixed grid of near-equal integer bins and max-pooled per bin, so every box yields
the same fc6 input length regardless of its size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._kernels import roi_pool_bwd, roi_pool_fwd, warp_into
from .errors import DimensionError, GeometryError
from .geometry import Box, as_boxes
from .netdef import NetConfig, NetParams, head_layers, trunk_layers
from .tensorcore import Chain, softmax


@dataclass(frozen=True)
class ScaleSet:
    sizes: tuple = (400, 600, 900)
    target_area: float = 140.0 ** 2

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if not sizes or any(s <= 0 for s in sizes) or list(sizes) != sorted(sizes):
            raise ValueError(f"scales must be positive and ascending, got {sizes}")
        if self.target_area <= 0:
            raise ValueError("target area must be positive")


@dataclass(frozen=True)
class RoIGrid:
    bins_y: int = 16
    bins_x: int = 16

    def __post_init__(self):
        if self.bins_y < 1 or self.bins_x < 1:
            raise ValueError(f"grid must have at least one bin per axis, got {self.bins_y}x{self.bins_x}")


def project_box(b, total_stride: int, feat_h: int | None = None, feat_w: int | None = None):
    """Image box -> integer feature cells ``(x0, y0, x1, y1)``, half-open.

    Starts round down and ends round up; each axis keeps at least one cell, and
    the result is clipped to the map when its size is given.
    """
    x0, y0, x1, y1 = (float(v) for v in b)
    bx0 = math.floor(x0 / total_stride)
    by0 = math.floor(y0 / total_stride)
    bx1 = max(math.ceil(x1 / total_stride), bx0 + 1)
    by1 = max(math.ceil(y1 / total_stride), by0 + 1)
    if feat_w is not None:
        if bx0 >= feat_w or bx1 <= 0:
            raise GeometryError(f"box {(x0, y0, x1, y1)} projects outside a feature map of width {feat_w}")
        bx0, bx1 = max(bx0, 0), min(bx1, feat_w)
    if feat_h is not None:
        if by0 >= feat_h or by1 <= 0:
            raise GeometryError(f"box {(x0, y0, x1, y1)} projects outside a feature map of height {feat_h}")
        by0, by1 = max(by0, 0), min(by1, feat_h)
    return bx0, by0, bx1, by1


def project_boxes(boxes: np.ndarray, total_stride: int, feat_h: int, feat_w: int) -> np.ndarray:
    boxes = as_boxes(boxes)
    x0 = np.floor(boxes[:, 0] / total_stride)
    y0 = np.floor(boxes[:, 1] / total_stride)
    x1 = np.maximum(np.ceil(boxes[:, 2] / total_stride), x0 + 1)
    y1 = np.maximum(np.ceil(boxes[:, 3] / total_stride), y0 + 1)
    bad = np.flatnonzero((x0 >= feat_w) | (y0 >= feat_h) | (x1 <= 0) | (y1 <= 0))
    if bad.size:
        raise GeometryError(f"box {int(bad[0])} projects outside the {feat_h}x{feat_w} feature map")
    out = np.stack([np.maximum(x0, 0), np.maximum(y0, 0),
                    np.minimum(x1, feat_w), np.minimum(y1, feat_h)], axis=1)
    return out.astype(np.intp)


def bin_edges(length: int, bins: int) -> np.ndarray:
    """Start offsets ``floor(i * length / bins)`` for ``i = 0..bins``."""
    return (np.arange(bins + 1) * length) // bins


def _bin_index(length: int, bins: int) -> np.ndarray:
    """Gather table ``[bins, maxlen]`` of cell offsets per bin.

    Short bins repeat their last cell; empty bins hold the single cell at their
    start (the replication rule), which is always < length.
    """
    edges = bin_edges(length, bins)
    start = edges[:-1]
    size = np.maximum(edges[1:] - start, 1)
    width = int(size.max())
    offs = np.minimum(np.arange(width)[None, :], size[:, None] - 1)
    return start[:, None] + offs


def roi_maxpool(features: np.ndarray, roi, grid: RoIGrid = RoIGrid()):
    """Max-pool one RoI of a (C, H, W) map onto the grid.

    Returns ``(pooled, argmax)``: ``pooled`` is (C, bins_y, bins_x) and ``argmax``
    holds flat ``y * W + x`` positions into the map for the backward pass.
    """
    if features.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) feature map, got {features.shape}")
    c, h, w = features.shape
    x0, y0, x1, y1 = (int(v) for v in roi)
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise GeometryError(f"roi {(x0, y0, x1, y1)} invalid for a {h}x{w} feature map")
    rows = y0 + _bin_index(y1 - y0, grid.bins_y)
    cols = x0 + _bin_index(x1 - x0, grid.bins_x)
    by, ly = rows.shape
    bx, lx = cols.shape
    flat = (rows[:, None, :, None] * w + cols[None, :, None, :]).reshape(by, bx, ly * lx)
    vals = features.reshape(c, h * w)[:, flat]
    pick = vals.argmax(axis=-1)
    pooled = np.take_along_axis(vals, pick[..., None], axis=-1)[..., 0]
    argmax = np.take_along_axis(np.broadcast_to(flat, vals.shape), pick[..., None], axis=-1)[..., 0]
    return pooled, argmax


def roi_maxpool_fast(features: np.ndarray, roi, grid: RoIGrid = RoIGrid()) -> np.ndarray:
    """Forward-only :func:`roi_maxpool` using two segmented max reductions."""
    x0, y0, x1, y1 = (int(v) for v in roi)
    region = features[:, y0:y1, x0:x1]
    ry = bin_edges(y1 - y0, grid.bins_y)[:-1]
    rx = bin_edges(x1 - x0, grid.bins_x)[:-1]
    return np.maximum.reduceat(np.maximum.reduceat(region, ry, axis=1), rx, axis=2)


def roi_maxpool_batch(features: np.ndarray, rois, grid: RoIGrid = RoIGrid()):
    """:func:`roi_maxpool` over an (N, 4) array of RoIs; returns (N, C, by, bx) pooled and argmax."""
    if features.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) feature map, got {features.shape}")
    c, h, w = features.shape
    rois = np.asarray(rois, dtype=np.int64).reshape(-1, 4)
    bad = np.flatnonzero((rois[:, 0] < 0) | (rois[:, 1] < 0) | (rois[:, 2] > w) | (rois[:, 3] > h)
                         | (rois[:, 0] >= rois[:, 2]) | (rois[:, 1] >= rois[:, 3]))
    if bad.size:
        raise GeometryError(f"roi {tuple(rois[bad[0]].tolist())} invalid for a {h}x{w} feature map")
    pooled, argmax = roi_pool_fwd(np.ascontiguousarray(features.transpose(1, 2, 0)), rois,
                                  grid.bins_y, grid.bins_x)
    return np.ascontiguousarray(pooled), np.ascontiguousarray(argmax)


def roi_maxpool_backward(dpooled: np.ndarray, argmax: np.ndarray, feat_shape) -> np.ndarray:
    c, h, w = feat_shape
    dfeat = np.zeros((c, h * w), dtype=dpooled.dtype)
    chan = np.broadcast_to(np.arange(c)[:, None, None], argmax.shape)
    np.add.at(dfeat, (chan.ravel(), argmax.ravel()), dpooled.ravel())
    return dfeat.reshape(c, h, w)


def resize_factor(scale: int, width: float, height: float) -> float:
    return scale / min(width, height)


def select_scale(b, width: float, height: float, scales: ScaleSet = ScaleSet()):
    """Pick the scale whose resized box area is closest to ``scales.target_area``.

    Returns ``(index, factor)``; the factor maps the shorter image side to the
    chosen size. Ties go to the smaller scale.
    """
    b = b if isinstance(b, Box) else Box(*(float(v) for v in b))
    best, best_err = 0, math.inf
    for i, s in enumerate(scales.sizes):
        f = resize_factor(s, width, height)
        err = abs(b.area * f * f - scales.target_area)
        if err < best_err:
            best, best_err = i, err
    return best, resize_factor(scales.sizes[best], width, height)


def select_scales(boxes: np.ndarray, width: float, height: float, scales: ScaleSet = ScaleSet()) -> np.ndarray:
    boxes = as_boxes(boxes)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    f = np.array([resize_factor(s, width, height) for s in scales.sizes])
    err = np.abs(area[:, None] * f[None, :] ** 2 - scales.target_area)
    return np.argmin(err, axis=1)  # argmin keeps the first (smallest) scale on ties


def resized_dims(width: int, height: int, factor: float) -> tuple[int, int]:
    return max(1, int(round(width * factor))), max(1, int(round(height * factor)))


def prepare_scaled_image(image: np.ndarray, factor: float, mean) -> np.ndarray:
    """Resize the whole image by ``factor`` and mean-subtract; returns (1, 3, H', W')."""
    h, w = image.shape[:2]
    nw, nh = resized_dims(w, h, factor)
    mean = np.asarray(mean, dtype=np.float32).reshape(3)
    if (nw, nh) == (w, h):
        img = image.astype(np.float32) - mean
        return np.ascontiguousarray(img.transpose(2, 0, 1)[None])
    out = np.empty((1, 3, nh, nw), np.float32)
    warp_into(out[0], image, 0.0, 0.0, float(w), float(h), mean)
    return out


def feature_map(params: NetParams, image: np.ndarray, factor: float) -> np.ndarray:
    x = prepare_scaled_image(image, factor, params.mean)
    cfg = params.config
    side = min(x.shape[2:])
    if side < cfg.conv1[0]:
        raise DimensionError(f"resized image side {side} smaller than the conv1 kernel")
    return Chain(trunk_layers(cfg)).forward(params.weights, x, record=False)[0]


def default_grid(cfg: NetConfig) -> RoIGrid:
    """The grid that reproduces the crop path's conv2 output size."""
    return RoIGrid(cfg.feature_side, cfg.feature_side)


def forward_objectness_fast(params: NetParams, image: np.ndarray, boxes, scales: ScaleSet = ScaleSet(),
                            grid: RoIGrid | None = None, chunk: int = 256) -> np.ndarray:
    """Objectness for every box of one image, sharing conv features per scale.

    Scores come back in input order. ``grid`` defaults to the crop path's conv2
    size so fc6 weights are interchangeable between the two paths.
    """
    cfg = params.config
    grid = grid or default_grid(cfg)
    if cfg.feature_channels * grid.bins_y * grid.bins_x != params["fc6.w"].shape[0]:
        raise DimensionError(f"grid {grid.bins_y}x{grid.bins_x} does not match fc6 input length "
                             f"{params['fc6.w'].shape[0]}")
    boxes = as_boxes(boxes)
    h, w = image.shape[:2]
    bad = np.flatnonzero((boxes[:, 0] >= boxes[:, 2]) | (boxes[:, 1] >= boxes[:, 3])
                         | (boxes[:, 0] < 0) | (boxes[:, 1] < 0) | (boxes[:, 2] > w) | (boxes[:, 3] > h))
    if bad.size:
        raise GeometryError(f"box {int(bad[0])} {boxes[bad[0]].tolist()} is invalid for a {w}x{h} image")
    scores = np.empty(len(boxes))
    if len(boxes) == 0:
        return scores
    which = select_scales(boxes, w, h, scales)
    head = Chain(head_layers(cfg))
    stride = cfg.total_stride
    for si in np.unique(which):
        factor = resize_factor(scales.sizes[si], w, h)
        feat = feature_map(params, image, factor)
        idx = np.flatnonzero(which == si)
        try:
            rois = project_boxes(boxes[idx] * factor, stride, feat.shape[1], feat.shape[2])
        except GeometryError as exc:
            raise GeometryError(f"at scale {scales.sizes[si]}: {exc}") from None
        for start in range(0, len(idx), chunk):
            part = slice(start, start + chunk)
            pooled = roi_maxpool_batch(feat, rois[part], grid)[0]
            logits = head.forward(params.weights, pooled, record=False)
            scores[idx[part]] = softmax(logits.astype(np.float64))[:, 1]
    return scores


class FastDeepBoxNet:
    """Trainable shared-feature net: trunk per scaled image, RoI pooling, head.

    ``forward`` takes a list of ``(scaled_image_tensor, rois)`` pairs, one per
    distinct image/scale in the minibatch, and returns logits for all RoIs in
    order.
    """

    def __init__(self, cfg: NetConfig, grid: RoIGrid | None = None):
        self.cfg = cfg
        self.grid = grid or default_grid(cfg)
        self.head = Chain(head_layers(cfg))
        self._cache = None

    def forward(self, params: NetParams, groups) -> np.ndarray:
        cache = []
        pooled_all = []
        for x, rois in groups:
            trunk = Chain(trunk_layers(self.cfg))
            feat = trunk.forward(params.weights, x)[0]
            pooled, argmax = roi_maxpool_batch(feat, rois, self.grid)
            pooled_all.append(pooled)
            cache.append((trunk, feat.shape, argmax))
        logits = self.head.forward(params.weights, np.concatenate(pooled_all))
        self._cache = cache
        return logits

    def backward(self, dlogits: np.ndarray) -> dict:
        grads, dpooled = self.head.backward(dlogits, need_input_grad=True)
        pos = 0
        for trunk, shape, argmax in self._cache:
            n = len(argmax)
            dfeat = roi_pool_bwd(np.ascontiguousarray(dpooled[pos:pos + n]), argmax, *shape)
            pos += n
            g, _ = trunk.backward(dfeat[None])
            for k, v in g.items():
                grads[k] = grads[k] + v if k in grads else v
        self._cache = None
        return grads
