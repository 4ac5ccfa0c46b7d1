"""
Training a small objectness net and reranking proposals
=======================================================

Everything runs in memory on a few hundred synthetic scenes: stage 1 learns
from sliding windows, stage 2 fine-tunes on the baseline proposer's own hard
negatives, and the reranked pools are compared with the baseline ranking.
Takes about ten minutes on one core.
"""
import logging

import numpy as np

from deepbox.dataio import SynthConfig, baseline_propose, render_scene
from deepbox.evalkit import evaluate
from deepbox.netdef import NetConfig, build_net
from deepbox.rerank import rerank
from deepbox.sampler import SamplerConfig, stage1_pools, stage2_pools
from deepbox.trainer import TrainSchedule, TrainingData, dataset_mean, train_stage

logging.basicConfig(level=logging.INFO, format="%(message)s")

synth = SynthConfig()


def scenes(n, seed):
    out = {}
    for i in range(n):
        img, boxes, _, _ = render_scene(synth, np.random.default_rng([seed, i]))
        out[f"{seed}-{i}"] = (img, boxes)
    return out


train, test = scenes(100, 1), scenes(40, 2)

# %%
# Stage 1: sliding-window negatives, jittered positives.
cfg = SamplerConfig()
pos, neg = stage1_pools([(k, 128, 128, b) for k, (_, b) in train.items()], cfg)
print("stage 1 pools:", len(pos), "positives,", len(neg), "negatives")

params = build_net(NetConfig.for_profile("small"))
params.mean[:] = dataset_mean(img for img, _ in train.values())
images = {k: img.astype(np.float32) for k, (img, _) in train.items()}
s1, log1 = train_stage(params, TrainingData(images, pos, neg),
                       TrainSchedule(stage=1, total_iters=300, step_size=200, log_every=50))

# %%
# Stage 2: the baseline's proposals on the training scenes supply hard negatives.
train_props = {k: baseline_propose(img, 1000, k) for k, (img, _) in train.items()}
pos2, neg2 = stage2_pools([(k, 128, 128, b, train_props[k].boxes) for k, (_, b) in train.items()], cfg)
print("stage 2 pools:", len(pos2), "positives,", len(neg2), "negatives")
s2, log2 = train_stage(s1, TrainingData(images, pos2, neg2),
                       TrainSchedule(stage=2, total_iters=300, step_size=200, log_every=50))

# %%
gt = {k: b for k, (_, b) in test.items()}
base = {k: baseline_propose(img, 1000, k) for k, (img, _) in test.items()}
rng = np.random.default_rng(0)
ranked = {
    "baseline": base,
    "random": {k: p.boxes[rng.permutation(len(p))] for k, p in base.items()},
    "stage 1": {k: rerank(s1, test[k][0], p, path="fast").apply(p) for k, p in base.items()},
    "stage 2": {k: rerank(s2, test[k][0], p, path="fast").apply(p) for k, p in base.items()},
}
for name, props in ranked.items():
    r = evaluate(props, gt, k_max=1000, name=name)
    print(f"{name:9s} AUC@0.5 {r.auc_log[0.5]:.3f}  AUC@0.7 {r.auc_log[0.7]:.3f}  "
          f"R@10 {r.recall(10, 0.7):.3f}  R@100 {r.recall(100, 0.7):.3f}")
