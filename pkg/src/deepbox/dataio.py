"""Datasets on disk, synthetic scene generation and a baseline proposer.

Directory layout under a dataset root::

    images/<split>/<image_id>.png          8-bit RGB
    annotations/<split>/annotations.jsonl  one image per line
    proposals/<split>/<name>.jsonl         one image per line
    models/<split>/   reports/<split>/

Annotation records are ``{"image_id", "width", "height", "boxes", "categories"}``;
proposal records are ``{"image_id", "boxes", "scores"}`` and may carry
``"objectness"``, ``"ranker"`` and ``"source"``. Boxes are
``[x_min, y_min, x_max, y_max]`` in pixels.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import draw

from .errors import DataError
from .geometry import as_boxes, iou_matrix
from .sampler import SamplerConfig, gen_sliding_windows

SUBDIRS = ("images", "annotations", "proposals", "models", "reports")

SHAPES = ("ellipse", "rectangle", "triangle", "ring", "diamond", "cross", "hexagon", "limbed")


# ------------------------------------------------------------------ formats

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_jsonl(path, records) -> None:
    lines = [json.dumps(r, separators=(", ", ": ")) for r in records]
    _atomic_write(Path(path), "".join(line + "\n" for line in lines))


def read_jsonl(path) -> list[tuple[int, dict]]:
    """Parse a JSON Lines file into ``(line_number, record)`` pairs.

    Parse failures raise :class:`DataError` naming the line and byte offset.
    """
    raw = Path(path).read_bytes()
    out = []
    offset = 0
    for lineno, line in enumerate(raw.split(b"\n"), start=1):
        start = offset
        offset += len(line) + 1
        if not line.strip():
            continue
        try:
            rec = json.loads(line.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            pos = getattr(exc, "pos", 0) or 0
            byte = start + len(line.decode("utf-8", errors="replace")[:pos].encode("utf-8"))
            raise DataError(f"{path}: line {lineno}: malformed JSON at byte offset {byte}: {exc}") from None
        if not isinstance(rec, dict):
            raise DataError(f"{path}: line {lineno}: expected a JSON object")
        out.append((lineno, rec))
    return out


def _boxes_field(rec: dict, key: str, path, lineno: int) -> np.ndarray:
    try:
        boxes = np.asarray(rec.get(key, []), dtype=np.float64)
    except (TypeError, ValueError):
        raise DataError(f"{path}: line {lineno}: '{key}' must be a list of 4-number boxes") from None
    if boxes.size == 0:
        return boxes.reshape(0, 4)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise DataError(f"{path}: line {lineno}: '{key}' must be a list of 4-number boxes")
    if not np.all(np.isfinite(boxes)):
        raise DataError(f"{path}: line {lineno}: non-finite coordinates in '{key}'")
    bad = np.flatnonzero((boxes[:, 0] >= boxes[:, 2]) | (boxes[:, 1] >= boxes[:, 3]))
    if bad.size:
        raise DataError(f"{path}: line {lineno}: box {int(bad[0])} {boxes[bad[0]].tolist()} "
                        "violates x_min < x_max, y_min < y_max")
    return boxes


def _image_id(rec, path, lineno) -> str:
    iid = rec.get("image_id")
    if not isinstance(iid, str) or not iid:
        raise DataError(f"{path}: line {lineno}: missing or non-string 'image_id'")
    return iid


@dataclass
class Annotation:
    image_id: str
    width: int
    height: int
    boxes: np.ndarray
    categories: np.ndarray

    def to_record(self) -> dict:
        return {"image_id": self.image_id, "width": int(self.width), "height": int(self.height),
                "boxes": self.boxes.tolist(), "categories": [int(c) for c in self.categories]}


def save_annotations(path, annotations) -> None:
    write_jsonl(path, [a.to_record() for a in annotations])


def load_annotations(path) -> dict[str, Annotation]:
    out = {}
    for lineno, rec in read_jsonl(path):
        iid = _image_id(rec, path, lineno)
        boxes = _boxes_field(rec, "boxes", path, lineno)
        cats = rec.get("categories", [0] * len(boxes))
        if len(cats) != len(boxes):
            raise DataError(f"{path}: line {lineno}: {len(cats)} categories for {len(boxes)} boxes")
        if any((not isinstance(c, int)) or c < 0 for c in cats):
            raise DataError(f"{path}: line {lineno}: categories must be non-negative integers")
        w, h = rec.get("width"), rec.get("height")
        if not isinstance(w, int) or not isinstance(h, int) or w <= 0 or h <= 0:
            raise DataError(f"{path}: line {lineno}: missing or invalid 'width'/'height'")
        if len(boxes) and (boxes[:, [0, 1]].min() < 0 or boxes[:, 2].max() > w or boxes[:, 3].max() > h):
            raise DataError(f"{path}: line {lineno}: box outside the {w}x{h} image")
        if iid in out:
            raise DataError(f"{path}: line {lineno}: duplicate image_id {iid!r}")
        out[iid] = Annotation(iid, w, h, boxes, np.asarray(cats, dtype=np.int64))
    return out


@dataclass
class ProposalSet:
    """Ranked proposals for one image; order is the ranking."""

    image_id: str
    boxes: np.ndarray
    scores: np.ndarray
    source: str = "unknown"
    objectness: np.ndarray | None = None
    ranker: str | None = None

    def __post_init__(self):
        self.boxes = as_boxes(self.boxes)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.scores) != len(self.boxes):
            raise DataError(f"{self.image_id}: {len(self.scores)} scores for {len(self.boxes)} boxes")

    def __len__(self):
        return len(self.boxes)

    def to_record(self) -> dict:
        rec = {"image_id": self.image_id, "boxes": self.boxes.tolist(), "scores": self.scores.tolist(),
               "source": self.source}
        if self.objectness is not None:
            rec["objectness"] = [None if not math.isfinite(v) else v for v in self.objectness.tolist()]
        if self.ranker is not None:
            rec["ranker"] = self.ranker
        return rec


def save_proposals(path, proposals) -> None:
    write_jsonl(path, [p.to_record() for p in proposals])


def load_proposals(path, known_ids=None) -> dict[str, ProposalSet]:
    out = {}
    for lineno, rec in read_jsonl(path):
        iid = _image_id(rec, path, lineno)
        if known_ids is not None and iid not in known_ids:
            raise DataError(f"{path}: line {lineno}: unknown image id {iid!r}")
        boxes = _boxes_field(rec, "boxes", path, lineno)
        scores = rec.get("scores", [0.0] * len(boxes))
        if len(scores) != len(boxes):
            raise DataError(f"{path}: line {lineno}: {len(scores)} scores for {len(boxes)} boxes")
        obj = rec.get("objectness")
        if obj is not None:
            obj = np.array([np.nan if v is None else v for v in obj], dtype=np.float64)
        if iid in out:
            raise DataError(f"{path}: line {lineno}: duplicate image_id {iid!r}")
        out[iid] = ProposalSet(iid, boxes, scores, rec.get("source", "unknown"), obj, rec.get("ranker"))
    return out


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.astype(np.uint8), "RGB").save(path, format="PNG")


@dataclass
class Dataset:
    root: Path
    split: str
    annotations: dict = field(default_factory=dict)

    @classmethod
    def open(cls, root, split: str) -> "Dataset":
        root = Path(root)
        ann = root / "annotations" / split / "annotations.jsonl"
        if not ann.exists():
            raise DataError(f"no annotations for split {split!r} under {root}")
        ds = cls(root, split, load_annotations(ann))
        for iid in ds.annotations:
            if not ds.image_path(iid).exists():
                raise DataError(f"annotation for {iid!r} has no image at {ds.image_path(iid)}")
        return ds

    def dir(self, kind: str) -> Path:
        return self.root / kind / self.split

    @property
    def ids(self) -> list[str]:
        return list(self.annotations)

    def image_path(self, image_id: str) -> Path:
        return self.dir("images") / f"{image_id}.png"

    def image(self, image_id: str) -> np.ndarray:
        img = load_image(self.image_path(image_id))
        a = self.annotations[image_id]
        if img.shape[:2] != (a.height, a.width):
            raise DataError(f"image {image_id!r} is {img.shape[1]}x{img.shape[0]}, index says {a.width}x{a.height}")
        return img

    def proposals(self, name: str = "baseline") -> dict[str, ProposalSet]:
        return load_proposals(self.dir("proposals") / f"{name}.jsonl", known_ids=set(self.annotations))


# --------------------------------------------------------- synthetic scenes

@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 100
    width: int = 128
    height: int = 128
    objects_min: int = 1
    objects_max: int = 3
    size_min: int = 24
    size_max: int = 72
    n_categories: int = 8
    clutter: float = 1.0
    categories: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1 or self.objects_min < 0 or self.objects_max < max(self.objects_min, 1):
            raise ValueError(f"invalid counts in {self}")
        if self.width < 100 or self.height < 100:
            raise ValueError("synthetic images must be at least 100 px on each side")
        if not 1 <= self.n_categories <= len(SHAPES):
            raise ValueError(f"n_categories must lie in [1, {len(SHAPES)}]")
        if self.size_min < 8 or self.size_max < self.size_min or self.size_max > min(self.width, self.height):
            raise ValueError(f"invalid object size range {self.size_min}..{self.size_max}")


def _polygon_mask(shape, rows, cols) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    rr, cc = draw.polygon(rows, cols, shape)
    m[rr, cc] = True
    return m


def _rotated(cx, cy, pts, theta):
    c, s = math.cos(theta), math.sin(theta)
    xs = [cx + px * c - py * s for px, py in pts]
    ys = [cy + px * s + py * c for px, py in pts]
    return ys, xs


def shape_mask(kind: str, shape, cx: float, cy: float, rx: float, ry: float, theta: float,
               rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of one object centred at (cx, cy) with half-extents rx, ry."""
    if kind == "ellipse":
        m = np.zeros(shape, dtype=bool)
        rr, cc = draw.ellipse(cy, cx, ry, rx, shape=shape, rotation=theta)
        m[rr, cc] = True
        return m
    if kind == "ring":
        outer = np.zeros(shape, dtype=bool)
        rr, cc = draw.ellipse(cy, cx, ry, rx, shape=shape, rotation=theta)
        outer[rr, cc] = True
        inner = np.zeros(shape, dtype=bool)
        t = rng.uniform(0.45, 0.65)
        rr, cc = draw.ellipse(cy, cx, ry * t, rx * t, shape=shape, rotation=theta)
        inner[rr, cc] = True
        return outer & ~inner
    if kind == "rectangle":
        pts = [(-rx, -ry), (rx, -ry), (rx, ry), (-rx, ry)]
    elif kind == "triangle":
        pts = [(0, -ry), (rx, ry), (-rx, ry)]
    elif kind == "diamond":
        pts = [(0, -ry), (rx, 0), (0, ry), (-rx, 0)]
    elif kind == "hexagon":
        pts = [(rx * math.cos(a), ry * math.sin(a)) for a in np.arange(6) * math.pi / 3]
    elif kind == "cross":
        a, b = 0.35 * rx, 0.35 * ry
        pts = [(-a, -ry), (a, -ry), (a, -b), (rx, -b), (rx, b), (a, b), (a, ry), (-a, ry),
               (-a, b), (-rx, b), (-rx, -b), (-a, -b)]
    elif kind == "limbed":
        body = np.zeros(shape, dtype=bool)
        rr, cc = draw.ellipse(cy, cx, ry * 0.6, rx * 0.6, shape=shape, rotation=theta)
        body[rr, cc] = True
        for k in range(int(rng.integers(2, 5))):
            ang = theta + k * 2 * math.pi / 4 + rng.uniform(-0.3, 0.3)
            ex, ey = rx * math.cos(ang), ry * math.sin(ang)
            t = max(2.0, 0.12 * min(rx, ry))
            nx, ny = -math.sin(ang) * t, math.cos(ang) * t
            ys = [cy + ny, cy + ey + ny, cy + ey - ny, cy - ny]
            xs = [cx + nx, cx + ex + nx, cx + ex - nx, cx - nx]
            body |= _polygon_mask(shape, ys, xs)
        return body
    else:
        raise ValueError(f"unknown shape {kind!r}")
    ys, xs = _rotated(cx, cy, pts, theta)
    return _polygon_mask(shape, ys, xs)


def mask_box(mask: np.ndarray):
    """Tight half-open bounding box of a boolean mask, or None if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return [float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)]


def _background(h, w, rng) -> np.ndarray:
    base = rng.uniform(60, 200, size=3)
    gy, gx = np.mgrid[0:h, 0:w] / max(h, w)
    tilt = rng.uniform(-40, 40, size=(2, 3))
    img = base + gx[..., None] * tilt[0] + gy[..., None] * tilt[1]
    img += rng.normal(0, 4, size=(h, w, 3))
    return img


def _paint_line(img, r0, c0, r1, c1, color, width):
    h, w = img.shape[:2]
    length = math.hypot(r1 - r0, c1 - c0) or 1.0
    nr, nc = -(c1 - c0) / length * width / 2, (r1 - r0) / length * width / 2
    rr, cc = draw.polygon([r0 + nr, r1 + nr, r1 - nr, r0 - nr], [c0 + nc, c1 + nc, c1 - nc, c0 - nc], (h, w))
    img[rr, cc] = color
    rr, cc = draw.line(int(round(r0)), int(round(c0)), int(round(r1)), int(round(c1)))
    keep = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    img[rr[keep], cc[keep]] = color


def _clutter(img, rng, density: float):
    h, w = img.shape[:2]
    # long lines crossing the scene
    for _ in range(rng.poisson(4 * density)):
        r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
        ang = rng.uniform(0, math.pi)
        length = rng.uniform(0.4, 1.2) * max(h, w)
        _paint_line(img, r0, c0, r0 + length * math.sin(ang), c0 + length * math.cos(ang),
                    rng.uniform(0, 255, 3), rng.uniform(1, 2.5))
    # scribbles: open random polylines
    for _ in range(rng.poisson(3 * density)):
        r, c = rng.uniform(0, h), rng.uniform(0, w)
        color = rng.uniform(0, 255, 3)
        for _ in range(int(rng.integers(3, 8))):
            r2 = float(np.clip(r + rng.normal(0, 12), 0, h - 1))
            c2 = float(np.clip(c + rng.normal(0, 12), 0, w - 1))
            _paint_line(img, r, c, r2, c2, color, 1.5)
            r, c = r2, c2
    # clusters of short strokes: edge-dense but without a closed outline
    for _ in range(rng.poisson(2 * density)):
        r, c = rng.uniform(0, h), rng.uniform(0, w)
        spread = rng.uniform(6, 18)
        for _ in range(int(rng.integers(6, 14))):
            rr, cc = r + rng.normal(0, spread), c + rng.normal(0, spread)
            ang = rng.uniform(0, math.pi)
            ln = rng.uniform(3, 9)
            _paint_line(img, rr, cc, rr + ln * math.sin(ang), cc + ln * math.cos(ang),
                        rng.uniform(0, 255, 3), 1.0)


def _texture(kind: int, h, w, rng) -> np.ndarray:
    gy, gx = np.mgrid[0:h, 0:w]
    if kind == 0:
        ang = rng.uniform(0, math.pi)
        period = rng.uniform(4, 9)
        t = np.sin((gx * math.cos(ang) + gy * math.sin(ang)) * 2 * math.pi / period)
        return 25 * np.sign(t)
    if kind == 1:
        return rng.normal(0, 14, size=(h, w))
    return 18 * np.sin(gx / rng.uniform(3, 7)) * np.sin(gy / rng.uniform(3, 7))


def _contrasting_color(img, mask, rng) -> np.ndarray:
    under = img[mask].mean(axis=0) if mask.any() else np.full(3, 128.0)
    for _ in range(20):
        col = rng.uniform(20, 235, 3)
        if np.abs(col - under).sum() > 150:
            return col
    return 255 - under


def render_scene(cfg: SynthConfig, rng: np.random.Generator):
    """One image and its objects: ``(uint8 HxWx3, boxes [N,4], categories [N], masks)``."""
    h, w = cfg.height, cfg.width
    img = _background(h, w, rng)
    _clutter(img, rng, cfg.clutter)
    cats_allowed = list(cfg.categories) if cfg.categories is not None else list(range(cfg.n_categories))
    n = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    occupied = np.zeros((h, w), dtype=bool)
    boxes, cats, masks = [], [], []
    attempts = 0
    while len(boxes) < n and attempts < 50 * max(n, 1):
        attempts += 1
        cat = int(rng.choice(cats_allowed))
        size = rng.uniform(cfg.size_min, cfg.size_max)
        aspect = math.exp(rng.uniform(-0.6, 0.6))
        rx, ry = size / 2 * math.sqrt(aspect), size / 2 / math.sqrt(aspect)
        rx, ry = min(rx, w / 2 - 2), min(ry, h / 2 - 2)
        cx, cy = rng.uniform(rx + 1, w - rx - 1), rng.uniform(ry + 1, h - ry - 1)
        theta = rng.uniform(0, math.pi) if rng.random() < 0.5 else 0.0
        mask = shape_mask(SHAPES[cat], (h, w), cx, cy, rx, ry, theta, rng)
        box = mask_box(mask)
        if box is None or (box[2] - box[0]) < 8 or (box[3] - box[1]) < 8:
            continue
        x0, y0, x1, y1 = (int(v) for v in box)
        if occupied[max(y0 - 3, 0):y1 + 3, max(x0 - 3, 0):x1 + 3].any():
            continue
        color = _contrasting_color(img, mask, rng)
        fill = color + _texture(int(rng.integers(0, 3)), h, w, rng)[..., None] * rng.uniform(0.5, 1.0, 3)
        outline = mask & ~ndimage.binary_erosion(mask, iterations=2)
        img[mask] = fill[mask]
        img[outline] = color * 0.45
        occupied[y0:y1, x0:x1] = True
        boxes.append(box)
        cats.append(cat)
        masks.append(mask)
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return img, np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(cats, dtype=np.int64), masks


def gen_synthetic(cfg: SynthConfig, out_dir, split: str = "train") -> Dataset:
    """Render ``cfg.n_images`` scenes into ``out_dir`` and return the dataset index."""
    root = Path(out_dir)
    for sub in SUBDIRS:
        (root / sub / split).mkdir(parents=True, exist_ok=True)
    anns = []
    for i in range(cfg.n_images):
        rng = np.random.default_rng([cfg.seed, i])
        img, boxes, cats, _ = render_scene(cfg, rng)
        iid = f"{split}_{i:05d}"
        save_image(root / "images" / split / f"{iid}.png", img)
        anns.append(Annotation(iid, cfg.width, cfg.height, boxes, cats))
    save_annotations(root / "annotations" / split / "annotations.jsonl", anns)
    _atomic_write(root / "annotations" / split / "synth_config.json",
                  json.dumps(asdict(cfg), sort_keys=True, indent=1) + "\n")
    return Dataset(root, split, {a.image_id: a for a in anns})


# ---------------------------------------------------------- baseline proposer

def gradient_magnitude(image: np.ndarray) -> np.ndarray:
    gray = image.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    gx = ndimage.sobel(gray, axis=1)
    gy = ndimage.sobel(gray, axis=0)
    return np.hypot(gx, gy)


def _box_sums(integral: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    h, w = integral.shape[0] - 1, integral.shape[1] - 1
    x0 = np.clip(np.round(boxes[:, 0]).astype(np.intp), 0, w)
    y0 = np.clip(np.round(boxes[:, 1]).astype(np.intp), 0, h)
    x1 = np.clip(np.round(boxes[:, 2]).astype(np.intp), 0, w)
    y1 = np.clip(np.round(boxes[:, 3]).astype(np.intp), 0, h)
    s = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
    return np.where((x1 > x0) & (y1 > y0), s, 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float, limit: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    alive = np.ones(len(order), dtype=bool)
    kept = []
    b = boxes[order]
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(order[i])
        if limit is not None and len(kept) >= limit:
            break
        rest = np.flatnonzero(alive[i + 1:]) + i + 1
        if rest.size:
            over = iou_matrix(b[i:i + 1], b[rest])[0] > threshold
            alive[rest[over]] = False
    return np.asarray(kept, dtype=np.intp)


def window_scores(image: np.ndarray, windows: np.ndarray, kappa: float = 1.5,
                  straddle_weight: float = 1.0, band: int = 2) -> np.ndarray:
    """Edge-density objectness of each window.

    Edge mass inside the window, minus the mass of its central half, minus the
    edge mass in a ``band``-pixel ring just outside it, divided by perimeter**kappa.
    """
    mag = gradient_magnitude(image)
    integral = np.zeros((mag.shape[0] + 1, mag.shape[1] + 1))
    integral[1:, 1:] = mag.cumsum(0).cumsum(1)
    w = windows[:, 2] - windows[:, 0]
    h = windows[:, 3] - windows[:, 1]
    total = _box_sums(integral, windows)
    inner = _box_sums(integral, np.stack([windows[:, 0] + w / 4, windows[:, 1] + h / 4,
                                          windows[:, 2] - w / 4, windows[:, 3] - h / 4], axis=1))
    # band outside only: edges on the object border itself should not count against a tight box
    outer = _box_sums(integral, windows + np.array([-band, -band, band, band]))
    straddle = outer - total
    return (total - inner - straddle_weight * straddle) / (2 * (w + h)) ** kappa


def baseline_propose(image: np.ndarray, n: int = 1000, image_id: str = "", nms_threshold: float = 0.8,
                     cfg: SamplerConfig = SamplerConfig()) -> ProposalSet:
    """Rank sliding windows by :func:`window_scores`, suppress near-duplicates, keep ``n``.

    Returns fewer than ``n`` boxes only when fewer windows survive suppression.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    h, w = image.shape[:2]
    windows = gen_sliding_windows(w, h, cfg)
    if len(windows) == 0:
        return ProposalSet(image_id, np.zeros((0, 4)), np.zeros(0), "baseline")
    scores = window_scores(image, windows)
    keep = nms(windows, scores, nms_threshold, limit=n)
    return ProposalSet(image_id, windows[keep], scores[keep], "baseline")
