"""Proposal-quality metrics: recall curves, AUC, average recall, hit/miss dumps.

A ground-truth box counts as recalled at budget ``k`` if any of the first ``k``
proposals of its image overlaps it with IoU >= threshold. There is no
one-to-one matching, so one proposal may recall several boxes. Recall is pooled
over all ground truth of all images.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import as_boxes, iou_matrix

AR_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_TARGETS = (0.25, 0.5, 0.75)

AUC_LOG_FORMULA = ("auc_log = sum_{k=1}^{K-1} recall(k) * log10((k+1)/k) / log10(K); "
                   "exact area under the step curve recall(k) on a log10(k) axis over [1, K], "
                   "normalized to [0, 1]; K=1 gives recall(1)")
AUC_LINEAR_FORMULA = ("auc_linear = sum_{k=1}^{K-1} recall(k) / (K-1); "
                      "area under the step curve on a linear k axis over [1, K]; K=1 gives recall(1)")


@dataclass
class GroundTruthSet:
    image_id: str
    boxes: np.ndarray
    categories: np.ndarray

    def __post_init__(self):
        self.boxes = as_boxes(self.boxes)
        self.categories = np.asarray(self.categories, dtype=np.int64).reshape(-1)
        if len(self.categories) != len(self.boxes):
            raise DataError(f"{self.image_id}: {len(self.categories)} categories for {len(self.boxes)} boxes")
        if np.any(self.categories < 0):
            raise DataError(f"{self.image_id}: negative category id")

    @classmethod
    def from_annotation(cls, ann) -> "GroundTruthSet":
        return cls(ann.image_id, ann.boxes, ann.categories)

    def filtered(self, categories=None, max_area: float | None = None) -> "GroundTruthSet":
        keep = np.ones(len(self.boxes), dtype=bool)
        if categories is not None:
            keep &= np.isin(self.categories, np.asarray(list(categories), dtype=np.int64))
        if max_area is not None:
            area = (self.boxes[:, 2] - self.boxes[:, 0]) * (self.boxes[:, 3] - self.boxes[:, 1])
            keep &= area < max_area
        return GroundTruthSet(self.image_id, self.boxes[keep], self.categories[keep])


def _ranked_boxes(p) -> np.ndarray:
    return as_boxes(p.boxes if hasattr(p, "boxes") else p)


def _coerce_gt(gt) -> dict:
    out = {}
    for iid, g in gt.items():
        if isinstance(g, GroundTruthSet):
            out[iid] = g
        elif hasattr(g, "categories"):
            out[iid] = GroundTruthSet(iid, g.boxes, g.categories)
        else:
            boxes = as_boxes(g)
            out[iid] = GroundTruthSet(iid, boxes, np.zeros(len(boxes), dtype=np.int64))
    return out


def filter_gt(gt: dict, categories=None, max_area: float | None = None) -> dict:
    return {iid: g.filtered(categories, max_area) for iid, g in _coerce_gt(gt).items()}


def _per_image_ious(proposals: dict, gt: dict, k_max: int | None):
    for iid in gt:
        if iid not in proposals:
            raise DataError(f"image {iid!r} has ground truth but no proposals")
    for iid, g in gt.items():
        boxes = _ranked_boxes(proposals[iid])
        if k_max is not None:
            boxes = boxes[:k_max]
        yield iid, g, iou_matrix(g.boxes, boxes)


def first_hit_ranks(proposals: dict, gt: dict, thresholds, k_max: int | None = None) -> np.ndarray:
    """``[n_gt, n_thresholds]`` 1-based rank of the first proposal reaching each threshold (inf if none)."""
    gt = _coerce_gt(gt)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    rows = []
    for _, _, m in _per_image_ious(proposals, gt, k_max):
        if m.shape[0] == 0:
            continue
        ok = m[:, :, None] >= thresholds[None, None, :]
        first = np.where(ok.any(axis=1), ok.argmax(axis=1) + 1.0, np.inf)
        rows.append(first)
    if not rows:
        return np.zeros((0, len(thresholds)))
    return np.concatenate(rows)


def recall_at_k(proposals: dict, gt: dict, k: int, iou_threshold: float) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    if not 0 < iou_threshold <= 1:
        raise ValueError("IoU threshold must lie in (0, 1]")
    ranks = first_hit_ranks(proposals, gt, [iou_threshold], k_max=k)[:, 0]
    return float(np.mean(ranks <= k)) if len(ranks) else 0.0


def recall_curve(proposals: dict, gt: dict, k_max: int, iou_threshold: float) -> np.ndarray:
    """Recall at k = 1..k_max (index ``k - 1``)."""
    ranks = first_hit_ranks(proposals, gt, [iou_threshold], k_max=k_max)[:, 0]
    if len(ranks) == 0:
        return np.zeros(k_max)
    finite = ranks[np.isfinite(ranks)].astype(np.int64)
    counts = np.bincount(finite, minlength=k_max + 1)[1:k_max + 1]
    return np.cumsum(counts) / len(ranks)


def auc(curve) -> float:
    """Normalized area under a recall curve sampled at k = 1..K, on a log10(k) axis."""
    r = np.asarray(curve, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty recall curve")
    k_max = r.size
    if k_max == 1:
        return float(r[0])
    k = np.arange(1, k_max)
    widths = np.log10(k + 1) - np.log10(k)
    return float(np.dot(r[:-1], widths) / math.log10(k_max))


def auc_linear(curve) -> float:
    r = np.asarray(curve, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty recall curve")
    if r.size == 1:
        return float(r[0])
    return float(r[:-1].sum() / (r.size - 1))


def recall_vs_iou(proposals: dict, gt: dict, k_fixed: int, thresholds=AR_THRESHOLDS):
    """Recall at ``k_fixed`` for each threshold, plus their mean (average recall)."""
    if k_fixed < 1:
        raise ValueError("k_fixed must be at least 1")
    ranks = first_hit_ranks(proposals, gt, thresholds, k_max=k_fixed)
    rec = (ranks <= k_fixed).mean(axis=0) if len(ranks) else np.zeros(len(thresholds))
    return np.asarray(thresholds, dtype=np.float64), rec, float(rec.mean())


def proposals_for_recall(curve, target: float):
    """Smallest k whose recall reaches ``target``, or None if never reached."""
    r = np.asarray(curve)
    hit = np.flatnonzero(r >= target)
    return int(hit[0]) + 1 if hit.size else None


@dataclass
class HitRecord:
    image_id: str
    gt_index: int
    category: int
    gt_box: list
    status: str
    best_box: list | None
    best_iou: float
    hit_rank: int | None


def hit_records(proposals: dict, gt: dict, k: int, iou_threshold: float) -> list[HitRecord]:
    gt = _coerce_gt(gt)
    out = []
    for iid, g, m in _per_image_ious(proposals, gt, k):
        boxes = _ranked_boxes(proposals[iid])[:k]
        for j in range(len(g.boxes)):
            row = m[j]
            if row.size:
                bi = int(np.argmax(row))
                best, best_box = float(row[bi]), boxes[bi].tolist()
                ok = np.flatnonzero(row >= iou_threshold)
                rank = int(ok[0]) + 1 if ok.size else None
            else:
                best, best_box, rank = 0.0, None, None
            out.append(HitRecord(iid, j, int(g.categories[j]), g.boxes[j].tolist(),
                                 "hit" if rank is not None else "miss", best_box, best, rank))
    return out


@dataclass
class EvalReport:
    name: str
    k_max: int
    thresholds: tuple
    curves: dict                   # threshold -> recall at k = 1..k_max
    auc_log: dict
    auc_linear: dict
    proposals_needed: dict         # threshold -> {target: k or None}
    k_ar: int
    iou_thresholds: np.ndarray
    recall_at_iou: np.ndarray
    average_recall: float
    n_gt: int
    hits: list = field(default_factory=list)

    def recall(self, k: int, threshold: float) -> float:
        return float(self.curves[threshold][min(k, self.k_max) - 1])

    def check_invariants(self) -> None:
        for t, c in self.curves.items():
            if np.any(np.diff(c) < 0):
                raise AssertionError(f"recall decreases in k at IoU {t}")
        ts = sorted(self.curves)
        for a, b in zip(ts, ts[1:]):
            if np.any(self.curves[b] > self.curves[a]):
                raise AssertionError(f"recall at IoU {b} exceeds recall at IoU {a}")
        if np.any(np.diff(self.recall_at_iou) > 0):
            raise AssertionError("recall increases with the IoU threshold")

    def summary(self) -> dict:
        return {
            "name": self.name,
            "k_max": self.k_max,
            "n_gt": self.n_gt,
            "auc_log": {str(t): v for t, v in self.auc_log.items()},
            "auc_linear": {str(t): v for t, v in self.auc_linear.items()},
            "auc_log_formula": AUC_LOG_FORMULA,
            "auc_linear_formula": AUC_LINEAR_FORMULA,
            "proposals_needed": {str(t): {str(g): k for g, k in d.items()} for t, d in self.proposals_needed.items()},
            "average_recall": {"k": self.k_ar, "value": self.average_recall,
                               "thresholds": [float(t) for t in self.iou_thresholds]},
            "recall_at_100": {str(t): self.recall(100, t) for t in self.thresholds},
        }


def evaluate(proposals: dict, gt: dict, thresholds=(0.5, 0.7), k_max: int = 1000, k_ar: int = 1000,
             categories=None, max_gt_area: float | None = None, hit_threshold: float = 0.7,
             hit_k: int = 1000, name: str = "proposals") -> EvalReport:
    """Full report: curves and AUCs per threshold, average recall and hit/miss records."""
    gt = filter_gt(gt, categories, max_gt_area)
    thresholds = tuple(float(t) for t in thresholds)
    curves = {t: recall_curve(proposals, gt, k_max, t) for t in thresholds}
    ious, rec, ar = recall_vs_iou(proposals, gt, k_ar)
    report = EvalReport(
        name=name, k_max=k_max, thresholds=thresholds, curves=curves,
        auc_log={t: auc(c) for t, c in curves.items()},
        auc_linear={t: auc_linear(c) for t, c in curves.items()},
        proposals_needed={t: {g: proposals_for_recall(c, g) for g in RECALL_TARGETS} for t, c in curves.items()},
        k_ar=k_ar, iou_thresholds=ious, recall_at_iou=rec, average_recall=ar,
        n_gt=sum(len(g.boxes) for g in gt.values()),
        hits=hit_records(proposals, gt, hit_k, hit_threshold),
    )
    report.check_invariants()
    return report


# ------------------------------------------------------------------ output

HIT_FIELDS = ["image_id", "gt_index", "category", "gt_x_min", "gt_y_min", "gt_x_max", "gt_y_max", "status",
              "best_x_min", "best_y_min", "best_x_max", "best_y_max", "best_iou", "hit_rank"]


def write_hit_csv(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HIT_FIELDS)
        for r in records:
            best = [repr(v) for v in r.best_box] if r.best_box else ["", "", "", ""]
            w.writerow([r.image_id, r.gt_index, r.category, *(repr(v) for v in r.gt_box), r.status,
                        *best, repr(r.best_iou), "" if r.hit_rank is None else r.hit_rank])


def write_curve_csv(path, curves: dict) -> None:
    """Columns ``k`` then one ``recall@<threshold>`` column per curve; exact float repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(curves)
    n = len(next(iter(curves.values()))) if curves else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k"] + [f"recall@{k}" for k in keys])
        for i in range(n):
            w.writerow([i + 1] + [repr(float(curves[k][i])) for k in keys])


def read_curve_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    out = {}
    for j, name in enumerate(header[1:], start=1):
        key = name.split("@", 1)[1]
        try:
            key = float(key)
        except ValueError:
            pass
        out[key] = np.array([float(r[j]) for r in body])
    return out


# ---------------------------------------------------------------- svg plots

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _svg(width, height, body) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n' + "".join(body) + "</svg>\n")


def line_plot_svg(series: dict, title: str, xlabel: str, ylabel: str, log_x: bool = False,
                  width: int = 480, height: int = 360) -> str:
    """Simple line chart; ``series`` maps a label to ``(xs, ys)`` with ys in [0, 1]."""
    ml, mr, mt, mb = 56, 140, 30, 44
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = np.concatenate([np.asarray(x, dtype=np.float64) for x, _ in series.values()]) if series else np.ones(1)
    tx = np.log10 if log_x else (lambda v: np.asarray(v, dtype=np.float64))
    lo, hi = float(tx(xs_all.min())), float(tx(xs_all.max()))
    if hi <= lo:
        hi = lo + 1

    def px(x):
        return ml + (tx(x) - lo) / (hi - lo) * pw

    def py(y):
        return mt + (1 - np.asarray(y, dtype=np.float64)) * ph

    body = [f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>\n',
            f'<text x="{ml + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>\n',
            f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>\n']
    for yv in (0, 0.25, 0.5, 0.75, 1.0):
        y = float(py(yv))
        body.append(f'<line x1="{ml - 4}" y1="{y:.1f}" x2="{ml}" y2="{y:.1f}" stroke="black"/>'
                    f'<text x="{ml - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="10">{yv:g}</text>\n')
    ticks = [10 ** e for e in range(int(math.floor(lo)), int(math.ceil(hi)) + 1)] if log_x else \
        list(np.linspace(10 ** lo if log_x else lo, hi, 5))
    for t in ticks:
        if lo - 1e-9 <= float(tx(t)) <= hi + 1e-9:
            x = float(px(t))
            body.append(f'<line x1="{x:.1f}" y1="{mt + ph}" x2="{x:.1f}" y2="{mt + ph + 4}" stroke="black"/>'
                        f'<text x="{x:.1f}" y="{mt + ph + 16}" text-anchor="middle" font-size="10">{t:g}</text>\n')
    body.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11">{xlabel}</text>\n')
    body.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" font-size="11" '
                f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{ylabel}</text>\n')
    for i, (label, (x, y)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{float(a):.2f},{float(b):.2f}" for a, b in zip(px(np.asarray(x)), py(y)))
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>\n')
        ly = mt + 14 + 16 * i
        body.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 28}" y2="{ly}" stroke="{color}" '
                    f'stroke-width="2"/><text x="{ml + pw + 32}" y="{ly + 4}" font-size="10">{label}</text>\n')
    return _svg(width, height, body)


def density_svg(image_id: str, width: int, height: int, proposals, gt_hits, png_b64: str | None = None,
                top: int = 100) -> str:
    """Top-``top`` proposals drawn translucently over the image, ground truth coloured by hit/miss."""
    body = []
    if png_b64:
        body.append(f'<image x="0" y="0" width="{width}" height="{height}" '
                    f'href="data:image/png;base64,{png_b64}"/>\n')
    else:
        body.append(f'<rect x="0" y="0" width="{width}" height="{height}" fill="#eeeeee"/>\n')
    for b in _ranked_boxes(proposals)[:top]:
        body.append(f'<rect x="{b[0]:.2f}" y="{b[1]:.2f}" width="{b[2] - b[0]:.2f}" height="{b[3] - b[1]:.2f}" '
                    'fill="#1f77b4" fill-opacity="0.03" stroke="#1f77b4" stroke-opacity="0.25" stroke-width="0.5"/>\n')
    for r in gt_hits:
        color = "#2ca02c" if r.status == "hit" else "#d62728"
        g = r.gt_box
        body.append(f'<rect x="{g[0]:.2f}" y="{g[1]:.2f}" width="{g[2] - g[0]:.2f}" height="{g[3] - g[1]:.2f}" '
                    f'fill="none" stroke="{color}" stroke-width="1.5"/>\n')
    return _svg(width, height, [f"<title>{image_id}</title>\n"] + body)


def dump_reports(reports, proposals: dict, out_dir, image_sizes: dict | None = None,
                 png_b64: dict | None = None, density_top: int = 100) -> list[Path]:
    """Write hit/miss CSVs, density overlays and aggregate curves for one or more reports.

    ``reports`` is an :class:`EvalReport` or a dict name -> report; per-image
    outputs use the first report and ``proposals`` (image id -> ranked boxes).
    """
    if isinstance(reports, EvalReport):
        reports = {reports.name: reports}
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written = []
    first = next(iter(reports.values()))
    by_image: dict = {iid: [] for iid in proposals}
    for r in first.hits:
        by_image.setdefault(r.image_id, []).append(r)
    for iid in sorted(by_image):
        p = out / "hitmiss" / f"{iid}.csv"
        write_hit_csv(p, by_image[iid])
        written.append(p)
        if image_sizes and iid in image_sizes and iid in proposals:
            w, h = image_sizes[iid]
            svg = density_svg(iid, w, h, proposals[iid], by_image[iid],
                              (png_b64 or {}).get(iid), density_top)
            p = out / "density" / f"{iid}.svg"
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(svg)
            written.append(p)
    for name, rep in reports.items():
        p = out / f"curves_{name}.csv"
        write_curve_csv(p, rep.curves)
        written.append(p)
        p = out / f"recall_vs_iou_{name}.csv"
        write_curve_csv(p, {"iou": rep.iou_thresholds, "recall": rep.recall_at_iou})
        written.append(p)
    summary = {name: rep.summary() for name, rep in reports.items()}
    p = out / "summary.json"
    p.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    written.append(p)
    for t in first.thresholds:
        series = {name: (np.arange(1, rep.k_max + 1), rep.curves[t]) for name, rep in reports.items() if t in rep.curves}
        p = out / f"recall_vs_proposals_iou{t}.svg"
        p.write_text(line_plot_svg(series, f"Recall vs. number of proposals, IoU={t}",
                                   "number of proposals", "recall", log_x=True))
        written.append(p)
    series = {name: (rep.iou_thresholds, rep.recall_at_iou) for name, rep in reports.items()}
    p = out / "recall_vs_iou.svg"
    p.write_text(line_plot_svg(series, f"Recall vs. IoU at {first.k_ar} proposals", "IoU", "recall"))
    written.append(p)
    return written
