"""Training-sample generation for the two training stages.

Stage 1 pairs sliding-window negatives with jittered ground-truth positives.
Stage 2 labels bottom-up proposals by overlap (object >= 0.7, background < 0.3,
the band in between dropped) and tops up positives with jittered ground truth.
Pools are stored as flat arrays; :func:`compose_batch` turns them into shuffled
minibatches with a fixed positive:negative ratio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import CompositionError, SamplingExhausted
from .geometry import Box, as_boxes, clip_boxes, iou_matrix, max_iou, nondegenerate, perturb_many

OBJECT, BACKGROUND, DISCARD = 1, 0, -1

SOURCES = ("sliding", "perturbed-gt", "proposal")


@dataclass(frozen=True)
class SamplerConfig:
    alpha: float = 0.65
    aspect_ratios: tuple = ((1, 1), (2, 3), (1, 3), (3, 2), (3, 1))
    gamma: float = 0.2
    stage1_pos: float = 0.5
    stage1_neg: float = 0.5
    stage2_pos: float = 0.7
    stage2_neg: float = 0.3
    neg_per_pos: int = 3
    min_window: float = 16.0
    positives_per_gt: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.stage1_neg > self.stage1_pos or self.stage2_neg > self.stage2_pos:
            raise ValueError("negative threshold must not exceed the positive threshold")
        if self.neg_per_pos <= 0:
            raise ValueError("neg_per_pos must be positive")
        if not 0 <= self.gamma < 0.5:
            raise ValueError(f"gamma must lie in [0, 0.5), got {self.gamma}")

    def thresholds(self, stage: int) -> tuple[float, float]:
        if stage == 1:
            return self.stage1_pos, self.stage1_neg
        if stage == 2:
            return self.stage2_pos, self.stage2_neg
        raise ValueError(f"stage must be 1 or 2, got {stage}")


@dataclass(frozen=True)
class LabeledSample:
    image_id: str
    box: Box
    label: int
    stage: int
    source: str


# ----------------------------------------------------------- sliding windows

def scale_step(alpha: float) -> float:
    """Side ratio between consecutive concentric windows with IoU ``alpha``."""
    return 1.0 / math.sqrt(alpha)


def translation_step(side: float, alpha: float) -> float:
    """Shift along one axis that leaves two equal windows at IoU ``alpha``."""
    return side * (1 - alpha) / (1 + alpha)


def window_shapes(width: float, height: float, cfg: SamplerConfig) -> list[tuple[float, float]]:
    """(w, h) per scale and aspect ratio, scale-major.

    The shorter window side runs from ``min_window`` upward by ``1/sqrt(alpha)``
    for as long as the window fits in the image.
    """
    f = scale_step(cfg.alpha)
    shapes = []
    k = 0
    while True:
        s = cfg.min_window * f ** k
        fitted = False
        for rw, rh in cfg.aspect_ratios:
            r = rw / rh
            w, h = (s * r, s) if r >= 1 else (s, s / r)
            if w <= width + 1e-9 and h <= height + 1e-9:
                shapes.append((w, h))
                fitted = True
        if not fitted:
            break
        k += 1
    return shapes


def _positions(extent: float, side: float, step: float) -> np.ndarray:
    # last window may hang over the border by less than one step; it is clipped later
    n = max(0, math.ceil((extent - side) / step - 1e-9))
    return np.arange(n + 1) * step


def gen_sliding_windows(width: float, height: float, cfg: SamplerConfig = SamplerConfig(),
                        clip: bool = True) -> np.ndarray:
    """All sliding windows of an image as an ``[N, 4]`` array.

    Order: scale, aspect ratio, row, column. Neighbouring windows of one shape are
    one translation step apart, so unclipped axis neighbours overlap at ``alpha``.
    """
    if min(width, height) < cfg.min_window:
        return np.zeros((0, 4))
    out = []
    for w, h in window_shapes(width, height, cfg):
        xs = _positions(width, w, translation_step(w, cfg.alpha))
        ys = _positions(height, h, translation_step(h, cfg.alpha))
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        xx, yy = xx.ravel(), yy.ravel()
        out.append(np.stack([xx, yy, xx + w, yy + h], axis=1))
    boxes = np.concatenate(out)
    return clip_boxes(boxes, width, height) if clip else boxes


# ----------------------------------------------------------------- labeling

def label_boxes(boxes, gt, stage: int, cfg: SamplerConfig = SamplerConfig(),
                source: str = "proposal") -> np.ndarray:
    """Per-box label: ``OBJECT`` (1), ``BACKGROUND`` (0) or ``DISCARD`` (-1).

    Stage 1 sliding windows overlapping any ground truth by more than the stage-1
    negative threshold are discarded, the rest are background. Jittered positives
    (either stage) are objects if they reach the stage's positive threshold and
    discarded otherwise. Stage 2 proposals are objects at or above 0.7, background
    below 0.3 and discarded in between.
    """
    if source not in SOURCES:
        raise ValueError(f"unknown sample source {source!r}")
    pos_t, neg_t = cfg.thresholds(stage)
    best = max_iou(boxes, gt)
    labels = np.full(len(best), DISCARD, dtype=np.int8)
    if source == "perturbed-gt":
        labels[best >= pos_t] = OBJECT
    elif stage == 1:
        labels[best <= neg_t] = BACKGROUND
    else:
        labels[best >= pos_t] = OBJECT
        labels[best < neg_t] = BACKGROUND
    return labels


# ---------------------------------------------------------------- positives

MAX_DRAWS_PER_GT = 1000


def gen_positives(gt, count: int, cfg: SamplerConfig, width: float, height: float,
                  stage: int = 1, rng: np.random.Generator | None = None) -> np.ndarray:
    """``count`` jittered ground-truth boxes that survive the stage's positive filter.

    Ground-truth boxes are chosen uniformly; survival is judged against the whole
    ground-truth set. Raises :class:`SamplingExhausted` if some chosen box keeps
    failing for ``MAX_DRAWS_PER_GT`` draws without a single survivor.
    """
    if count <= 0:
        return np.zeros((0, 4))
    gt = as_boxes(gt)
    if len(gt) == 0:
        raise SamplingExhausted("cannot generate positives without ground truth")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    pos_t, _ = cfg.thresholds(stage)
    draws = np.zeros(len(gt), dtype=np.int64)
    hits = np.zeros(len(gt), dtype=np.int64)
    kept = []
    total = 0
    while total < count:
        need = count - total
        pick = rng.integers(0, len(gt), size=max(need * 2, 8))
        cand = perturb_many(gt[pick], cfg.gamma, width, height, rng)
        ok = nondegenerate(cand)
        ok[ok] = iou_matrix(cand[ok], gt).max(axis=1) >= pos_t
        np.add.at(draws, pick, 1)
        np.add.at(hits, pick[ok], 1)
        good = cand[ok][:need]
        kept.append(good)
        total += len(good)
        starved = np.flatnonzero((draws >= MAX_DRAWS_PER_GT) & (hits == 0))
        if starved.size and total < count:
            raise SamplingExhausted(
                f"ground-truth box {gt[starved[0]].tolist()} never survived the IoU >= {pos_t} "
                f"filter in {int(draws[starved[0]])} perturbations")
    return np.concatenate(kept)[:count]


# -------------------------------------------------------------------- pools

@dataclass
class SamplePool:
    """Flat storage for many labeled boxes across images."""

    image_ids: list = field(default_factory=list)
    image_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    sources: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    stage: int = 1

    def __len__(self):
        return len(self.boxes)

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(self.image_ids[self.image_index[i]], Box.from_array(self.boxes[i]),
                             int(self.labels[i]), self.stage, SOURCES[self.sources[i]])

    def select(self, mask) -> "SamplePool":
        return SamplePool(self.image_ids, self.image_index[mask], self.boxes[mask],
                          self.labels[mask], self.sources[mask], self.stage)


class PoolBuilder:
    def __init__(self, stage: int):
        self.stage = stage
        self.image_ids: list = []
        self._index: dict = {}
        self._parts = []

    def add(self, image_id: str, boxes: np.ndarray, labels: np.ndarray, source: str) -> None:
        if image_id not in self._index:
            self._index[image_id] = len(self.image_ids)
            self.image_ids.append(image_id)
        idx = self._index[image_id]
        keep = labels != DISCARD
        n = int(keep.sum())
        if n:
            self._parts.append((np.full(n, idx), boxes[keep], labels[keep],
                                np.full(n, SOURCES.index(source), dtype=np.int8)))

    def build(self) -> tuple[SamplePool, SamplePool]:
        """Return ``(positives, negatives)``."""
        if self._parts:
            idx, boxes, labels, src = (np.concatenate(p) for p in zip(*self._parts))
        else:
            idx, boxes = np.zeros(0, dtype=np.int64), np.zeros((0, 4))
            labels, src = np.zeros(0, dtype=np.int8), np.zeros(0, dtype=np.int8)
        pool = SamplePool(self.image_ids, idx.astype(np.int64), boxes, labels.astype(np.int8), src, self.stage)
        return pool.select(pool.labels == OBJECT), pool.select(pool.labels == BACKGROUND)


def stage1_pools(images, cfg: SamplerConfig = SamplerConfig(), rng=None) -> tuple[SamplePool, SamplePool]:
    """Sliding-window negatives and jittered positives.

    ``images`` yields ``(image_id, width, height, gt_boxes)``.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    builder = PoolBuilder(stage=1)
    for image_id, width, height, gt in images:
        gt = as_boxes(gt)
        windows = gen_sliding_windows(width, height, cfg)
        builder.add(image_id, windows, label_boxes(windows, gt, 1, cfg, "sliding"), "sliding")
        if len(gt):
            pos = gen_positives(gt, cfg.positives_per_gt * len(gt), cfg, width, height, 1, rng)
            builder.add(image_id, pos, np.full(len(pos), OBJECT, dtype=np.int8), "perturbed-gt")
    return builder.build()


def stage2_pools(images, cfg: SamplerConfig = SamplerConfig(), rng=None) -> tuple[SamplePool, SamplePool]:
    """Proposal-derived hard negatives and positives, topped up with jittered ground truth.

    ``images`` yields ``(image_id, width, height, gt_boxes, proposal_boxes)``.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    builder = PoolBuilder(stage=2)
    for image_id, width, height, gt, proposals in images:
        gt = as_boxes(gt)
        proposals = as_boxes(proposals)
        labels = label_boxes(proposals, gt, 2, cfg, "proposal")
        builder.add(image_id, proposals, labels, "proposal")
        missing = cfg.positives_per_gt * len(gt) - int((labels == OBJECT).sum())
        if missing > 0:
            pos = gen_positives(gt, missing, cfg, width, height, 2, rng)
            builder.add(image_id, pos, np.full(len(pos), OBJECT, dtype=np.int8), "perturbed-gt")
    return builder.build()


# ---------------------------------------------------------------- batching

def positives_in_batch(batch_size: int, neg_per_pos: int = 3) -> int:
    return int(math.floor(batch_size / (1 + neg_per_pos) + 0.5))


class _EpochCursor:
    """Draws indices without replacement, reshuffling when the pool is exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            part = self.order[self.pos:self.pos + k]
            self.pos += len(part)
            k -= len(part)
            out.append(part)
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def compose_batch_indices(pos: SamplePool, neg: SamplePool, batch_size: int = 128,
                          neg_per_pos: int = 3, seed: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Infinite stream of ``(pos_idx, neg_idx)`` index arrays, one pair per batch."""
    if len(pos) == 0:
        raise CompositionError("positive pool is empty")
    if len(neg) == 0:
        raise CompositionError("negative pool is empty")
    n_pos = positives_in_batch(batch_size, neg_per_pos)
    rng = np.random.default_rng(seed)
    pcur = _EpochCursor(len(pos), rng)
    ncur = _EpochCursor(len(neg), rng)
    while True:
        yield pcur.take(n_pos), ncur.take(batch_size - n_pos)


def compose_batch(pos: SamplePool, neg: SamplePool, batch_size: int = 128,
                  neg_per_pos: int = 3, seed: int = 0) -> Iterator[list[LabeledSample]]:
    """Infinite stream of shuffled minibatches with ``round(B / (1 + neg_per_pos))`` positives."""
    rng = np.random.default_rng(seed + 1)
    for pi, ni in compose_batch_indices(pos, neg, batch_size, neg_per_pos, seed):
        batch = [pos.sample(i) for i in pi] + [neg.sample(i) for i in ni]
        yield [batch[i] for i in rng.permutation(len(batch))]
