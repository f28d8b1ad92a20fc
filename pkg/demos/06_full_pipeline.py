"""End-to-end miniature: data -> two teachers -> distillation -> diagnostics.

Everything is shrunk so the whole run takes a couple of minutes. At this
miniature scale the attention diagnostics barely move away from their
random-init values; the demo shows the moving parts and the bookkeeping.
For the properly sized experiment (where the MIM teacher's late-layer NMI
clearly exceeds the supervised teacher's and the two-teacher student tracks
it) run the acceptance suite or pipeline.run_effect_check — that takes
around twenty minutes. Run: python demos/06_full_pipeline.py
"""

import numpy as np

from dualdistill import data, diagnostics, distill, masking, pipeline, vit

cfg = vit.ViTConfig(image_size=16, patch_size=4, channels=1, depth=4, heads=2, dim=32)
train_ds = data.generate(seed=1, n=512, image_size=16, class_count=8)
eval_ds = data.generate(seed=2, n=64, image_size=16, class_count=8, split="eval")

print("pretraining supervised teacher (classification)...")
sup, sup_log = data.pretrain_supervised_teacher(
    cfg, train_ds, data.TrainConfig(epochs=12, lr=2.5e-3, seed=11))
print(f"  train acc {sup_log[0]['acc']:.3f} -> {sup_log[-1]['acc']:.3f}")

print("pretraining masked-reconstruction teacher...")
mim, mim_log = data.pretrain_mim_teacher(
    cfg, train_ds, data.ReconTask(mask_ratio=0.5),
    data.TrainConfig(epochs=12, lr=3e-3, seed=12))
print(f"  recon loss {mim_log[0]['loss']:.3f} -> {mim_log[-1]['loss']:.3f}")

teachers = distill.TeacherBundle(feat=sup, rel=mim)
dcfg = distill.DistillConfig(alpha=1.0,
                             schedule=masking.MaskSchedule.thirds(cfg.depth, 0.3))
student = vit.init_params(cfg, seed=13)

print("distilling from both teachers...")
records = pipeline.distill_train(
    student, teachers, train_ds.images, dcfg,
    pipeline.DistillTrainConfig(epochs=10, batch_size=64, lr=2e-3, seed=13))
steps = [r for r in records if r["kind"] == "step"]
print(f"  total {steps[0]['total']:.4f} -> {steps[-1]['total']:.4f}, "
      f"feature {steps[0]['feature_term']:.4f} -> {steps[-1]['feature_term']:.4f}, "
      f"keep ratio {steps[-1]['keep_ratio']:.3f}")

probes = eval_ds.images[:16]
frozen_student = student.clone(requires_grad=False).freeze()
print("\nper-layer mean NMI on probe images:")
for name, model in [("sup teacher", sup), ("mim teacher", mim),
                    ("student", frozen_student)]:
    stats = diagnostics.model_report(model, probes)
    nmis = " ".join(f"{ls.mean_nmi:.3f}" for ls in stats.layers)
    print(f"  {name:12s} {nmis}")
print("\n(miniature numbers; the desk-scale effect check in the acceptance "
      "suite is where the teacher contrast and the student's shift toward "
      "the MIM teacher are actually established)")
