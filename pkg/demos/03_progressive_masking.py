"""Progressive redundant-token masking, stage by stage.

A frozen teacher scores tokens by cosine similarity to their mean at each
scheduled layer and the most redundant fraction is dropped. Run:
python demos/03_progressive_masking.py
"""

import numpy as np

from dualdistill import data, masking, vit

cfg = vit.ViTConfig(image_size=32, patch_size=4, channels=1, depth=6, heads=4, dim=96)
teacher = vit.init_params(cfg, seed=2).freeze()
ds = data.generate(seed=3, n=8, image_size=32, class_count=8)

schedule = masking.MaskSchedule.thirds(cfg.depth, drop_fraction=0.3)
print(f"schedule: update layers {schedule.update_layers}, drop 30% per update")

mask = masking.progressive_mask(teacher, ds.images[0], schedule)
kept = cfg.tokens
for stage in mask.stage_history:
    kept -= len(stage.dropped)
    print(f"  layer {stage.layer}: dropped {len(stage.dropped):2d} -> {kept} kept")
print(f"final keep ratio: {mask.keep_ratio:.4f} "
      f"(idealized 0.7^3 = {0.7 ** 3:.4f}; floors make it slightly higher)")

# the kept set as an 8x8 token grid
grid = mask.keep.reshape(8, 8)
print("kept tokens (# = kept):")
for row in grid:
    print("  " + "".join("#" if k else "." for k in row))

# masks select rows of features, and rows+columns of relation matrices
feats = np.arange(cfg.tokens * 3, dtype=float).reshape(cfg.tokens, 3)
rel = np.arange(cfg.tokens ** 2, dtype=float).reshape(cfg.tokens, cfg.tokens)
print(f"feature rows {feats.shape} -> {masking.apply_mask(feats, mask).shape}")
print(f"relation grid {rel.shape} -> {masking.apply_mask(rel, mask).shape}")

# per-image masks differ; per-stage counts do not
masks = masking.progressive_mask_batch(teacher, ds.images[:4], schedule)
print("kept counts:", [m.kept_count for m in masks],
      "| identical sets:", len({tuple(m.kept_indices()) for m in masks}) == 1)
