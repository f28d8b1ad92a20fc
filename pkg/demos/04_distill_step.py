"""One distillation step under the microscope: targets, loss terms, update.

Uses randomly initialized frozen teachers (fast, structurally faithful).
Run: python demos/04_distill_step.py
"""

import numpy as np

from dualdistill import data, distill, masking, optim, vit

cfg = vit.ViTConfig(image_size=32, patch_size=4, channels=1, depth=6, heads=4, dim=96)
feat_teacher = vit.init_params(cfg, seed=10).freeze()
rel_teacher = vit.init_params(cfg, seed=20).freeze()
teachers = distill.TeacherBundle(feat=feat_teacher, rel=rel_teacher)
student = vit.init_params(cfg, seed=30)

ds = data.generate(seed=4, n=32, image_size=32, class_count=8)
dcfg = distill.DistillConfig(alpha=1.0,
                             schedule=masking.MaskSchedule.thirds(cfg.depth, 0.3))
print(f"feature layer {dcfg.resolved_feature_layer(cfg.depth)}, "
      f"relation layers {dcfg.resolved_relation_layers(cfg.depth)}")

targets = distill.compute_targets(teachers, ds.images, dcfg)
print(f"targets: {targets.tokens_used} kept tokens/image, "
      f"features {targets.features.shape}, "
      f"relations {[f'{l}:{r.shape}' for l, r in targets.relations.items()]}")

state = optim.AdamWState(lr_base=1.5e-3, total_steps=100, warmup_steps=5,
                         weight_decay=0.05, no_decay=student.no_decay_names())
for step in range(5):
    bd = distill.distill_step(student, teachers, ds.images, state, dcfg,
                              targets=targets)
    rels = " ".join(f"L{l}={v:.5f}" for l, v in sorted(bd.relation_terms.items()))
    print(f"step {step}: total={bd.total:.5f} feature={bd.feature_term:.5f} {rels}")

# the breakdown identity holds every step
rel_sum = sum(bd.relation_terms.values())
print(f"decomposition check: |total - (feature + alpha*rels)| = "
      f"{abs(bd.total - (bd.feature_term + dcfg.alpha * rel_sum)):.2e}")

# teachers never move
print(f"teacher params writeable: "
      f"{feat_teacher['pos_embed'].data.flags.writeable}")
