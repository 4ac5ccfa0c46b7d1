"""Two-stage training loop (sliding windows, then hard negatives)."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import DivergenceError, StateError
from .netdef import DeepBoxNet, NetParams, build_net, preprocess_crops, save_checkpoint
from .roipool import FastDeepBoxNet, RoIGrid, ScaleSet, prepare_scaled_image, project_boxes, resize_factor, select_scales
from .sampler import SamplePool, compose_batch_indices, positives_in_batch
from .tensorcore import OptimState, out_size, sgd_step, softmax_xent

log = logging.getLogger(__name__)

CROP_ITERATIONS = 60_000
FAST_ITERATIONS = 120_000
DECAY_INTERVAL = 20_000


@dataclass(frozen=True)
class TrainSchedule:
    stage: int = 1
    total_iters: int = CROP_ITERATIONS
    batch_size: int = 128
    base_lr: float = 0.001
    lr_decay: float = 0.1
    step_size: int = DECAY_INTERVAL
    momentum: float = 0.9
    weight_decay: float = 0.0005
    checkpoint_interval: int = 0
    log_every: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.total_iters < 0 or self.batch_size < 1 or self.base_lr <= 0 or self.step_size < 1:
            raise ValueError(f"invalid schedule {self}")
        if self.total_iters and self.step_size > self.total_iters:
            raise ValueError("decay interval exceeds the total number of iterations")

    @classmethod
    def paper(cls, stage: int = 1, mode: str = "crop", scale=1, **overrides) -> "TrainSchedule":
        """The published recipe, optionally shrunk by ``scale`` (e.g. ``1/30``).

        Iteration count and decay interval shrink together so the number of
        learning-rate drops stays the same.
        """
        scale = Fraction(scale).limit_denominator(10_000)
        total = CROP_ITERATIONS if mode == "crop" else FAST_ITERATIONS
        total_iters = max(1, round(total * scale))
        step = max(1, min(round(DECAY_INTERVAL * scale), total_iters))
        return replace(cls(stage=stage, total_iters=total_iters, step_size=step), **overrides)


def lr_at(iteration: int, schedule: TrainSchedule) -> float:
    return schedule.base_lr * schedule.lr_decay ** (iteration // schedule.step_size)


@dataclass
class TrainingData:
    """Images (HxWx3 float32, keyed by id) plus positive and negative pools."""

    images: dict
    positives: SamplePool
    negatives: SamplePool

    def image(self, pool: SamplePool, i: int) -> np.ndarray:
        return self.images[pool.image_ids[pool.image_index[i]]]


@dataclass
class LossLog:
    rows: list = field(default_factory=list)
    ema: float | None = None
    decay: float = 0.99

    def add(self, iteration: int, lr: float, loss: float) -> None:
        self.ema = loss if self.ema is None else self.decay * self.ema + (1 - self.decay) * loss
        self.rows.append((iteration, lr, loss, self.ema))

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "lr", "loss", "ema_loss"])
            for it, lr, loss, ema in self.rows:
                w.writerow([it, repr(lr), repr(loss), repr(ema)])


def read_loss_log(path) -> list[tuple]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["iteration"]), float(r["lr"]), float(r["loss"]), float(r["ema_loss"])) for r in rows]


def dataset_mean(images) -> np.ndarray:
    """Per-channel mean over a collection of HxWx3 images, weighted by pixel count."""
    total = np.zeros(3)
    count = 0
    for img in images:
        total += img.reshape(-1, 3).sum(axis=0, dtype=np.float64)
        count += img.shape[0] * img.shape[1]
    return (total / max(count, 1)).astype(np.float32)


def crop_batch(data: TrainingData, pi: np.ndarray, ni: np.ndarray, params: NetParams):
    side = params.config.input_side
    x = np.empty((len(pi) + len(ni), 3, side, side), dtype=np.float32)
    row = 0
    for pool, idx in ((data.positives, pi), (data.negatives, ni)):
        for i in idx:
            x[row] = preprocess_crops(data.image(pool, i), [pool.boxes[i]], side, params.mean)[0]
            row += 1
    y = np.concatenate([np.ones(len(pi), dtype=np.int64), np.zeros(len(ni), dtype=np.int64)])
    return x, y


def _check_stage(params: NetParams, schedule: TrainSchedule, allow_skip_stage1: bool) -> None:
    if schedule.stage == 2 and params.stage < 1 and not allow_skip_stage1:
        raise StateError("stage-2 training needs a stage-1 model; pass allow_skip_stage1=True "
                         "to train on hard negatives from scratch")


def train_stage(params: NetParams, data: TrainingData, schedule: TrainSchedule, mode: str = "crop",
                allow_skip_stage1: bool = False, checkpoint_dir=None, scales: ScaleSet = ScaleSet(),
                grid: RoIGrid | None = None, images_per_batch: int = 2) -> tuple[NetParams, LossLog]:
    """Run one training stage; returns the updated parameters and the loss log.

    Parameters are updated in place on a copy of ``params``. Each iteration
    composes a 1:3 minibatch, runs forward, softmax cross-entropy, backward and
    one SGD step at ``lr_at(iteration)``.
    """
    if mode not in ("crop", "fast"):
        raise ValueError(f"mode must be 'crop' or 'fast', got {mode!r}")
    _check_stage(params, schedule, allow_skip_stage1)
    params = params.copy()
    state = OptimState(schedule.base_lr, schedule.momentum, schedule.weight_decay)
    losses = LossLog()
    if schedule.total_iters == 0:
        return params, losses

    if mode == "crop":
        net = DeepBoxNet(params.config)
        batches = compose_batch_indices(data.positives, data.negatives, schedule.batch_size,
                                        3, schedule.seed)
    else:
        fast = _FastBatcher(data, params, schedule, scales, grid, images_per_batch)

    for it in range(schedule.total_iters):
        lr = lr_at(it, schedule)
        if mode == "crop":
            pi, ni = next(batches)
            x, y = crop_batch(data, pi, ni, params)
            logits = net.forward(params, x)
            loss, dlogits = softmax_xent(logits, y)
            grads, _ = net.backward(dlogits.astype(np.float32))
        else:
            loss, grads = fast.step()
        if not math.isfinite(loss):
            raise DivergenceError(it, loss)
        sgd_step(params.weights, grads, state, lr)
        losses.add(it, lr, loss)
        if schedule.log_every and it % schedule.log_every == 0:
            log.info("stage %d iter %d lr %.2g loss %.4f ema %.4f", schedule.stage, it, lr, loss, losses.ema)
        params.iteration = it + 1
        if checkpoint_dir and schedule.checkpoint_interval and (it + 1) % schedule.checkpoint_interval == 0:
            save_checkpoint(_stamped(params, schedule), Path(checkpoint_dir) / f"stage{schedule.stage}_iter{it + 1}.dbx")

    params = _stamped(params, schedule)
    if checkpoint_dir:
        save_checkpoint(params, Path(checkpoint_dir) / f"stage{schedule.stage}_final.dbx")
    return params, losses


def _stamped(params: NetParams, schedule: TrainSchedule) -> NetParams:
    out = params.copy()
    out.stage = schedule.stage
    return out


class _FastBatcher:
    """Minibatches for shared-feature training: a few images, RoIs sampled within each."""

    def __init__(self, data: TrainingData, params: NetParams, schedule: TrainSchedule,
                 scales: ScaleSet, grid, images_per_batch: int):
        self.data, self.params, self.scales = data, params, scales
        self.net = FastDeepBoxNet(params.config, grid)
        self.rng = np.random.default_rng(schedule.seed)
        self.per_image = max(1, images_per_batch)
        n_pos = positives_in_batch(schedule.batch_size)
        self.n_pos, self.n_neg = n_pos, schedule.batch_size - n_pos
        pos, neg = data.positives, data.negatives
        self.pos_by_image = {k: np.flatnonzero(pos.image_index == k) for k in range(len(pos.image_ids))}
        self.neg_by_image = {k: np.flatnonzero(neg.image_index == k) for k in range(len(neg.image_ids))}
        self.pos_slot = {iid: k for k, iid in enumerate(pos.image_ids)}
        self.neg_slot = {iid: k for k, iid in enumerate(neg.image_ids)}
        self.image_ids = [i for i in pos.image_ids if i in self.neg_slot]
        if not self.image_ids:
            raise StateError("no training image has both positive and negative samples")

    def _take(self, pool: SamplePool, idx: np.ndarray, k: int) -> np.ndarray:
        return pool.boxes[self.rng.choice(idx, size=k, replace=len(idx) < k)]

    def step(self):
        chosen = self.rng.choice(len(self.image_ids), size=self.per_image, replace=False
                                 if len(self.image_ids) >= self.per_image else True)
        groups, labels = [], []
        for j, c in enumerate(chosen):
            image_id = self.image_ids[c]
            image = self.data.images[image_id]
            h, w = image.shape[:2]
            kp = self.n_pos // self.per_image + (j < self.n_pos % self.per_image)
            kn = self.n_neg // self.per_image + (j < self.n_neg % self.per_image)
            pos = self.data.positives
            neg = self.data.negatives
            boxes = np.concatenate([
                self._take(pos, self.pos_by_image[self.pos_slot[image_id]], kp),
                self._take(neg, self.neg_by_image[self.neg_slot[image_id]], kn)])
            lab = np.concatenate([np.ones(kp, dtype=np.int64), np.zeros(kn, dtype=np.int64)])
            which = select_scales(boxes, w, h, self.scales)
            for si in np.unique(which):
                factor = resize_factor(self.scales.sizes[si], w, h)
                x = prepare_scaled_image(image, factor, self.params.mean)
                fh, fw = _feature_dims(self.params, x.shape[2], x.shape[3])
                sel = which == si
                rois = project_boxes(boxes[sel] * factor, self.params.config.total_stride, fh, fw)
                groups.append((x, rois))
                labels.append(lab[sel])
        logits = self.net.forward(self.params, groups)
        loss, dlogits = softmax_xent(logits, np.concatenate(labels))
        grads = self.net.backward(dlogits.astype(np.float32))
        return loss, grads


def _feature_dims(params: NetParams, h: int, w: int) -> tuple[int, int]:
    cfg = params.config
    dims = []
    for n in (h, w):
        a = out_size(n, cfg.conv1[0], cfg.conv1[2], cfg.pads[0])
        b = out_size(a, cfg.pool[0], cfg.pool[1])
        dims.append(out_size(b, cfg.conv2[0], cfg.conv2[2], cfg.pads[1]))
    return dims[0], dims[1]


def pretrain_synthetic(params: NetParams, images: dict, gt: dict, categories: dict,
                       iterations: int = 200, batch_size: int = 32, lr: float = 0.001,
                       seed: int = 0) -> NetParams:
    """Warm up the conv layers on a shape-discrimination task, then reset the fc layers.

    Stand-in for ImageNet initialization: ground-truth crops are classified by
    category parity through the regular two-way head. Only conv1/conv2 are kept.
    """
    rng = np.random.default_rng(seed)
    items = [(iid, b, c) for iid in sorted(gt) for b, c in zip(gt[iid], categories[iid])]
    if not items:
        return params.copy()
    work = params.copy()
    net = DeepBoxNet(work.config)
    state = OptimState(lr, 0.9, 0.0005)
    side = work.config.input_side
    for _ in range(iterations):
        pick = rng.integers(0, len(items), size=batch_size)
        x = np.empty((batch_size, 3, side, side), dtype=np.float32)
        y = np.empty(batch_size, dtype=np.int64)
        for row, k in enumerate(pick):
            iid, box, cat = items[k]
            x[row] = preprocess_crops(images[iid], [box], side, work.mean)[0]
            y[row] = int(cat) % 2
        logits = net.forward(work, x)
        loss, d = softmax_xent(logits, y)
        if not math.isfinite(loss):
            raise DivergenceError(-1, loss)
        grads, _ = net.backward(d.astype(np.float32))
        sgd_step(work.weights, grads, state)
    fresh = build_net(replace(work.config, seed=work.config.seed + 1))
    for name in ("fc6.w", "fc6.b", "fc7.w", "fc7.b"):
        work.weights[name] = fresh.weights[name]
    return work
