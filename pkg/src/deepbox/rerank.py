"""Rerank a bottom-up proposal pool by learned objectness."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import ProposalSet
from .errors import DataError, GeometryError
from .netdef import NetParams, score_crops
from .roipool import RoIGrid, ScaleSet, default_grid, forward_objectness_fast

DEFAULT_TOP_K = 2048


@dataclass
class RerankResult:
    image_id: str
    order: np.ndarray        # output position -> input index
    scores: np.ndarray       # objectness of the scored prefix, descending
    path: str
    top_k: int

    def apply(self, proposals: ProposalSet) -> ProposalSet:
        """The reranked proposal set, with objectness attached (NaN for the unscored tail)."""
        obj = np.full(len(self.order), np.nan)
        obj[:len(self.scores)] = self.scores
        return ProposalSet(proposals.image_id, proposals.boxes[self.order], proposals.scores[self.order],
                           proposals.source, obj, f"deepbox-{self.path}")


def _validate(image, proposals: ProposalSet) -> None:
    if image is None:
        raise DataError(f"missing image for {proposals.image_id!r}")
    h, w = image.shape[:2]
    b = proposals.boxes
    bad = np.flatnonzero((b[:, 0] < 0) | (b[:, 1] < 0) | (b[:, 2] > w) | (b[:, 3] > h)
                         | (b[:, 0] >= b[:, 2]) | (b[:, 1] >= b[:, 3]))
    if bad.size:
        raise DataError(f"{proposals.image_id}: proposal {int(bad[0])} {b[bad[0]].tolist()} "
                        f"is invalid for a {w}x{h} image")


def score_boxes(params: NetParams, image: np.ndarray, boxes: np.ndarray, path: str = "crop",
                scales: ScaleSet = ScaleSet(), grid: RoIGrid | None = None) -> np.ndarray:
    if path == "crop":
        return score_crops(params, image, boxes)
    if path == "fast":
        return forward_objectness_fast(params, image, boxes, scales, grid)
    raise ValueError(f"path must be 'crop' or 'fast', got {path!r}")


def rerank(params: NetParams, image: np.ndarray, proposals: ProposalSet, top_k: int | None = DEFAULT_TOP_K,
           path: str = "crop", scales: ScaleSet = ScaleSet(), grid: RoIGrid | None = None,
           scorer=None) -> RerankResult:
    """Score the first ``top_k`` proposals and sort them by objectness.

    ``top_k=None`` scores the whole pool. Ties keep source order; proposals past
    ``top_k`` follow unchanged. ``scorer(image, boxes) -> scores`` replaces the
    network when given.
    """
    _validate(image, proposals)
    n = len(proposals)
    k = n if top_k is None else min(int(top_k), n)
    if k < 0:
        raise ValueError("top_k must be non-negative")
    if k == 0:
        return RerankResult(proposals.image_id, np.arange(n), np.zeros(0), path, 0)
    head = proposals.boxes[:k]
    if scorer is not None:
        scores = np.asarray(scorer(image, head), dtype=np.float64)
    else:
        try:
            scores = score_boxes(params, image, head, path, scales, grid)
        except GeometryError as exc:
            raise DataError(f"{proposals.image_id}: {exc}") from None
    perm = np.argsort(-scores, kind="stable")
    order = np.concatenate([perm, np.arange(k, n)])
    return RerankResult(proposals.image_id, order, scores[perm], path, k)


def score_consistency_check(params: NetParams, image: np.ndarray, boxes) -> float:
    """Largest |crop score - fast score| over ``boxes``.

    Meaningful when the boxes are aligned so both paths see the same pixels: an
    input_side x input_side image with its whole-image box, scored at a single
    scale equal to the input side and with the grid equal to the conv2 output.
    """
    cfg = params.config
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return 0.0
    crop = score_crops(params, image, boxes)
    side = cfg.input_side
    fast = forward_objectness_fast(params, image, boxes, ScaleSet((side,), float(side) ** 2), default_grid(cfg))
    return float(np.max(np.abs(crop - fast)))
