"""Box algebra: overlap, clipping and ground-truth perturbation.

Coordinates are continuous pixels with a half-open convention, so a box
``(x_min, y_min, x_max, y_max)`` has area ``(x_max - x_min) * (y_max - y_min)``
(no ``+1``). Bulk operations take ``[N, 4]`` float arrays in the same order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import GeometryError

MAX_PERTURB_RETRIES = 10


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"coordinate order violated: {coords}")

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(*(float(v) for v in a))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def __iter__(self):
        return iter((self.x_min, self.y_min, self.x_max, self.y_max))


@dataclass(frozen=True)
class PerturbConfig:
    gamma: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 0.5:
            raise ValueError(f"gamma must lie in [0, 0.5), got {self.gamma}")


def as_boxes(boxes) -> np.ndarray:
    """Coerce a Box, a sequence of Boxes or an array-like to a float64 ``[N, 4]`` array."""
    if isinstance(boxes, Box):
        return boxes.to_array()[None]
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64, copy=False)
    else:
        boxes = list(boxes)
        if boxes and isinstance(boxes[0], Box):
            arr = np.array([b.to_array() for b in boxes], dtype=np.float64)
        else:
            arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise GeometryError(f"expected an [N, 4] box array, got shape {arr.shape}")
    return arr


def validate_boxes(boxes: np.ndarray) -> None:
    if not np.all(np.isfinite(boxes)):
        raise GeometryError("non-finite box coordinates")
    bad = np.flatnonzero((boxes[:, 0] >= boxes[:, 2]) | (boxes[:, 1] >= boxes[:, 3]))
    if bad.size:
        raise GeometryError(f"coordinate order violated at index {int(bad[0])}: {boxes[bad[0]].tolist()}")


def box_areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two valid boxes."""
    if not isinstance(a, Box):
        a = Box(*a)
    if not isinstance(b, Box):
        b = Box(*b)
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape ``[len(a), len(b)]``."""
    a = as_boxes(a)
    b = as_boxes(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    return inter / union


def max_iou(boxes, gt) -> np.ndarray:
    """Best overlap of each box with any box of ``gt``; zero when ``gt`` is empty."""
    boxes = as_boxes(boxes)
    gt = as_boxes(gt)
    if len(gt) == 0:
        return np.zeros(len(boxes))
    return iou_matrix(boxes, gt).max(axis=1)


def clip_to_image(b: Box, width: float, height: float) -> Box:
    if width <= 0 or height <= 0:
        raise GeometryError(f"image dimensions must be positive, got {width}x{height}")
    x0 = min(max(b.x_min, 0.0), width)
    y0 = min(max(b.y_min, 0.0), height)
    x1 = min(max(b.x_max, 0.0), width)
    y1 = min(max(b.y_max, 0.0), height)
    if not (x0 < x1 and y0 < y1):
        raise GeometryError(f"box {tuple(b)} has no area inside a {width}x{height} image")
    return Box(x0, y0, x1, y1)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = boxes.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    return out


def perturb_gt(gt: Box, cfg: PerturbConfig, width: float, height: float,
               rng: np.random.Generator | None = None) -> Box:
    """Jitter each corner of ``gt`` uniformly within +-gamma of its width/height.

    Corners leaving the image are moved onto the border. A draw that collapses
    after clipping is redrawn, at most ``MAX_PERTURB_RETRIES`` times.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if cfg.gamma == 0:
        return gt
    w, h = gt.width, gt.height
    lo = np.array([gt.x_min - cfg.gamma * w, gt.y_min - cfg.gamma * h,
                   gt.x_max - cfg.gamma * w, gt.y_max - cfg.gamma * h])
    span = np.array([2 * cfg.gamma * w, 2 * cfg.gamma * h] * 2)
    for _ in range(MAX_PERTURB_RETRIES + 1):
        c = lo + span * rng.random(4)
        c[[0, 2]] = np.clip(c[[0, 2]], 0, width)
        c[[1, 3]] = np.clip(c[[1, 3]], 0, height)
        if c[0] < c[2] and c[1] < c[3]:
            return Box(*(float(v) for v in c))
    raise GeometryError(f"perturbation of {tuple(gt)} stayed degenerate after {MAX_PERTURB_RETRIES} retries")


def perturb_many(gt: np.ndarray, gamma: float, width: float, height: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Vectorized counterpart of :func:`perturb_gt`: one jittered copy per row of ``gt``.

    Rows that come out degenerate after clipping are returned as-is; callers drop
    them with :func:`nondegenerate`.
    """
    gt = as_boxes(gt)
    w = gt[:, 2] - gt[:, 0]
    h = gt[:, 3] - gt[:, 1]
    half = gamma * np.stack([w, h, w, h], axis=1)
    out = gt - half + 2 * half * rng.random(gt.shape)
    return clip_boxes(out, width, height)


def nondegenerate(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 0] < boxes[:, 2]) & (boxes[:, 1] < boxes[:, 3])


def boxes_to_list(boxes: Iterable) -> list[Box]:
    return [Box.from_array(b) for b in as_boxes(boxes)]
