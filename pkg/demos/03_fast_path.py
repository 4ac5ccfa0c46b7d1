"""
Shared features and RoI pooling
===============================

The crop path warps every box to 140x140 and runs the whole net per box. The
fast path runs the conv layers once per image scale and max-pools each box's
footprint on the feature map into the grid fc6 expects.
"""
import time

import numpy as np

from deepbox.netdef import NetConfig, build_net, score_crops
from deepbox.rerank import score_consistency_check
from deepbox.roipool import ScaleSet, forward_objectness_fast, project_box, select_scale

cfg = NetConfig.for_profile("small")
params = build_net(cfg)
print("total stride", cfg.total_stride, "feature grid", cfg.feature_side)

# %%
# A 64 px box at stride 8 covers 8 feature cells.
print("box (16,16,80,80) on the feature map:", project_box((16, 16, 80, 80), cfg.total_stride))

# %%
# Each box is scored at the scale that brings its area closest to 140^2.
for side in (30, 80, 200):
    idx, f = select_scale((0, 0, side, side), 640, 480)
    print(f"{side}px box -> scale {ScaleSet().sizes[idx]} (x{f:.2f})")

# %%
# When the box is the whole input-sized image both paths see the same pixels.
rng = np.random.default_rng(0)
img = rng.integers(0, 256, (140, 140, 3)).astype(np.uint8)
print("max |crop - fast| on aligned boxes:", score_consistency_check(params, img, [[0, 0, 140, 140]]))

# %%
img = rng.integers(0, 256, (480, 640, 3)).astype(np.uint8)
x0, y0 = rng.uniform(0, 600, 2000), rng.uniform(0, 440, 2000)
boxes = np.stack([x0, y0, np.minimum(x0 + rng.uniform(16, 320, 2000), 640),
                  np.minimum(y0 + rng.uniform(16, 320, 2000), 480)], axis=1)
forward_objectness_fast(params, img, boxes[:4])
score_crops(params, img, boxes[:4])
t = time.perf_counter()
forward_objectness_fast(params, img, boxes)
fast = time.perf_counter() - t
t = time.perf_counter()
score_crops(params, img, boxes)
crop = time.perf_counter() - t
print(f"2000 boxes: crop {crop:.2f}s, fast {fast:.2f}s ({crop / fast:.1f}x)")
