"""
Sliding windows, overlap and jittered ground truth
==================================================

Stage-1 training draws negatives from a dense sliding-window grid and positives
from jittered copies of each ground-truth box. This walks through both on one
synthetic scene.
"""
import numpy as np

from deepbox.dataio import SynthConfig, render_scene
from deepbox.geometry import Box, PerturbConfig, iou, max_iou, perturb_gt
from deepbox.sampler import SamplerConfig, gen_sliding_windows, label_boxes, scale_step, translation_step

# %%
# Boxes are half-open [x_min, x_max) x [y_min, y_max).
a = Box(0, 0, 10, 10)
b = Box(5, 0, 15, 10)
print("iou of two half-overlapping squares:", iou(a, b))  # 50 / 150

# %%
# Window spacing follows from the target overlap alpha between neighbours.
cfg = SamplerConfig()
print("scale step", round(scale_step(cfg.alpha), 4))
d = translation_step(100, cfg.alpha)
print("translation step for a 100 px window", round(d, 4))
print("neighbour iou", iou(Box(0, 0, 100, 50), Box(d, 0, 100 + d, 50)))

# %%
img, gt, cats, _ = render_scene(SynthConfig(), np.random.default_rng(7))
print("scene", img.shape, "objects", len(gt), "categories", cats.tolist())

windows = gen_sliding_windows(img.shape[1], img.shape[0], cfg)
labels = label_boxes(windows, gt, 1, cfg, "sliding")
# windows overlapping an object by more than 0.5 are dropped, not used as positives
print(len(windows), "windows;", int((labels == 0).sum()), "background,", int((labels == -1).sum()), "dropped")

# %%
# Jittered positives: each corner moves by up to gamma of the box side.
rng = np.random.default_rng(0)
g = Box(*gt[0])
jit = np.array([tuple(perturb_gt(g, PerturbConfig(cfg.gamma), 128, 128, rng)) for _ in range(2000)])
ov = max_iou(jit, gt[:1])
print("jittered copies: median iou %.3f, share >= 0.5: %.2f" % (np.median(ov), (ov >= 0.5).mean()))
