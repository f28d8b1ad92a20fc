"""Orchestration: distillation training loop and the end-to-end effect check.

The training loop precomputes frozen-teacher targets (masks, feature rows,
relation submatrices) once per image by default — teachers never change, so
cached targets equal freshly recomputed ones — and then runs the student
over shuffled epochs. The effect check trains both proxy teachers, verifies
the teacher contrast precondition (the MIM proxy must show higher NMI at
the relation layers than the supervised proxy, else everything downstream
is reported as meaningless), and compares a two-teacher student against an
alpha = 0 feature-only student across seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data, diagnostics, distill, masking, optim, vit
from .errors import ContractError
from .util import rng


@dataclass(frozen=True)
class DistillTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1.5e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    seed: int = 0
    cache_targets: bool = True
    log_masks: bool = False     # serialize per-image kept-index lists per step


def _cache_all_targets(teachers: distill.TeacherBundle, images: np.ndarray,
                       dcfg: distill.DistillConfig, chunk: int,
                       masked: bool) -> list[distill.DistillTargets]:
    out = []
    for start in range(0, images.shape[0], chunk):
        out.append(distill.compute_targets(teachers, images[start:start + chunk],
                                           dcfg, masked=masked))
    return out


def _slice_targets(cached: list[distill.DistillTargets], chunk: int,
                   idx: np.ndarray) -> distill.DistillTargets:
    """Assemble a batch's targets from per-chunk caches."""
    blocks, offs = np.divmod(idx, chunk)
    masks = [cached[b].masks[o] for b, o in zip(blocks, offs)]
    feats = np.stack([cached[b].features[o] for b, o in zip(blocks, offs)])
    mask_idx = None
    if cached[0].mask_indices is not None:
        mask_idx = np.stack([cached[b].mask_indices[o] for b, o in zip(blocks, offs)])
    relations = {
        layer: np.stack([cached[b].relations[layer][o] for b, o in zip(blocks, offs)])
        for layer in cached[0].relations
    }
    return distill.DistillTargets(masks=masks, mask_indices=mask_idx,
                                  features=feats, relations=relations)


def distill_train(student: vit.ViTParams, teachers: distill.TeacherBundle,
                  images: np.ndarray, dcfg: distill.DistillConfig,
                  train: DistillTrainConfig, masked: bool = True,
                  on_step=None, on_epoch=None) -> list[dict]:
    """Train the student; returns per-step records (and fires callbacks).

    ``masked=False`` selects the explicit no-masking path irrespective of
    the schedule.
    """
    teachers.check_structure(student.config)
    n = images.shape[0]
    steps_per_epoch = max(1, -(-n // train.batch_size))
    state = optim.AdamWState(
        lr_base=train.lr, lr_min=train.lr_min,
        total_steps=max(1, train.epochs * steps_per_epoch),
        warmup_steps=int(round(train.warmup_frac * train.epochs * steps_per_epoch)),
        weight_decay=train.weight_decay, no_decay=student.no_decay_names())
    chunk = 128
    cached = None
    if train.cache_targets:
        cached = _cache_all_targets(teachers, images, dcfg, chunk, masked)
    records: list[dict] = []
    step = 0
    for epoch in range(train.epochs):
        gen = rng(train.seed, "distill-shuffle", epoch)
        for idx in data.epoch_batches(n, train.batch_size, gen):
            if cached is not None:
                targets = _slice_targets(cached, chunk, idx)
            else:
                targets = distill.compute_targets(teachers, images[idx], dcfg,
                                                  masked=masked)
            breakdown = distill.distill_step(student, teachers, images[idx],
                                             state, dcfg, targets=targets)
            rec = {"kind": "step", "step": step, "epoch": epoch,
                   "lr": breakdown.lr, **breakdown.as_record(),
                   "keep_ratio": targets.tokens_used / student.config.tokens}
            if train.log_masks:
                rec["masks"] = [m.kept_indices().tolist() for m in targets.masks]
            records.append(rec)
            if on_step:
                on_step(rec)
            step += 1
        if on_epoch:
            on_epoch(epoch, student)
    return records


# ---------------------------------------------------------------------------
# end-to-end effect check


@dataclass(frozen=True)
class EffectCheckConfig:
    """Desk-scale experiment sizing, tuned so the full check (two teachers,
    three seeds, two arms each) finishes in well under half an hour."""

    image_size: int = 32
    class_count: int = 8
    model: vit.ViTConfig = field(default_factory=lambda: vit.ViTConfig(
        image_size=32, patch_size=4, channels=1, depth=6, heads=4, dim=96, mlp_ratio=4))
    data_seed: int = 11
    n_teacher_train: int = 768
    n_distill: int = 512
    n_eval: int = 256
    teacher_sup: data.TrainConfig = field(default_factory=lambda: data.TrainConfig(
        epochs=20, lr=2e-3, seed=101))
    teacher_mim: data.TrainConfig = field(default_factory=lambda: data.TrainConfig(
        epochs=24, lr=3e-3, seed=202))
    mim_mask_ratio: float = 0.5
    distill_epochs: int = 30
    drop_fraction: float = 0.3
    probe_count: int = 32
    probe_seed: int = 7


@dataclass
class ArmResult:
    seed: int
    hybrid_nmi: float
    baseline_nmi: float
    teacher_rel_nmi: float
    hybrid_dist: float
    teacher_feat_dist: float

    @property
    def nmi_closer(self) -> bool:
        """(a): student NMI at the relation layers strictly closer to the MIM teacher's."""
        return abs(self.hybrid_nmi - self.teacher_rel_nmi) < \
               abs(self.baseline_nmi - self.teacher_rel_nmi)

    @property
    def dist_preserved(self) -> bool:
        """(b): final-layer mean head distance within 15% of the feature teacher's."""
        return abs(self.hybrid_dist - self.teacher_feat_dist) <= 0.15 * self.teacher_feat_dist


@dataclass
class EffectCheckResult:
    sup_nmi: float
    mim_nmi: float
    teacher_contrast_ok: bool
    arms: list[ArmResult]
    sup_log: list[dict]
    mim_log: list[dict]
    sup_stats: diagnostics.AttentionStats | None = None
    mim_stats: diagnostics.AttentionStats | None = None
    runtime: float = 0.0

    def passed_seeds(self) -> int:
        return sum(1 for a in self.arms if a.nmi_closer and a.dist_preserved)


def _relation_layer_nmi(stats: diagnostics.AttentionStats, depth: int) -> float:
    layers = [i for i in (depth - 2, depth - 1) if i >= 1]
    return float(np.mean([stats.layer(i).mean_nmi for i in layers]))


def train_proxy_teachers(cfg: EffectCheckConfig
                         ) -> tuple[vit.ViTParams, vit.ViTParams, list[dict], list[dict], data.Dataset]:
    """Generate data and pretrain both proxy teachers."""
    ds = data.generate(cfg.data_seed, cfg.n_teacher_train, cfg.image_size,
                       cfg.class_count, split="train")
    sup, sup_log = data.pretrain_supervised_teacher(cfg.model, ds, cfg.teacher_sup)
    mim, mim_log = data.pretrain_mim_teacher(cfg.model, ds,
                                             data.ReconTask(cfg.mim_mask_ratio),
                                             cfg.teacher_mim)
    return sup, mim, sup_log, mim_log, ds


def probe_images(cfg: EffectCheckConfig) -> np.ndarray:
    """Probes drawn from the evaluation split with a fixed seed."""
    eval_ds = data.generate(cfg.data_seed + 1, cfg.n_eval, cfg.image_size,
                            cfg.class_count, split="eval")
    gen = rng(cfg.probe_seed, "probes")
    pick = gen.permutation(eval_ds.n)[:cfg.probe_count]
    return eval_ds.images[np.sort(pick)]


def teacher_contrast(sup: vit.ViTParams, mim: vit.ViTParams,
                     probes: np.ndarray) -> tuple[float, float, bool]:
    """Precondition: MIM-proxy NMI at the relation layers exceeds the
    supervised proxy's. Downstream effect numbers are meaningless if not."""
    depth = sup.config.depth
    sup_nmi = _relation_layer_nmi(diagnostics.model_report(sup, probes), depth)
    mim_nmi = _relation_layer_nmi(diagnostics.model_report(mim, probes), depth)
    return sup_nmi, mim_nmi, mim_nmi > sup_nmi


def run_effect_check(cfg: EffectCheckConfig, seeds=(1, 2, 3),
                     log=print) -> EffectCheckResult:
    """Full directional experiment: hybrid vs feature-only across seeds."""
    depth = cfg.model.depth
    sup, mim, sup_log, mim_log, _ = train_proxy_teachers(cfg)
    probes = probe_images(cfg)
    sup_stats = diagnostics.model_report(sup, probes)
    mim_stats = diagnostics.model_report(mim, probes)
    sup_nmi = _relation_layer_nmi(sup_stats, depth)
    mim_nmi = _relation_layer_nmi(mim_stats, depth)
    contrast_ok = mim_nmi > sup_nmi
    result = EffectCheckResult(sup_nmi=sup_nmi, mim_nmi=mim_nmi,
                               teacher_contrast_ok=contrast_ok, arms=[],
                               sup_log=sup_log, mim_log=mim_log,
                               sup_stats=sup_stats, mim_stats=mim_stats)
    if log:
        log(f"teacher contrast: supervised nmi={sup_nmi:.4f} mim nmi={mim_nmi:.4f} "
            f"ok={contrast_ok}")
    if not contrast_ok:
        # report explicitly rather than silently running the student arms
        return result

    teachers = distill.TeacherBundle(feat=sup, rel=mim)
    distill_ds = data.generate(cfg.data_seed + 2, cfg.n_distill, cfg.image_size,
                               cfg.class_count, split="distill")
    schedule = masking.MaskSchedule.thirds(depth, cfg.drop_fraction)
    tm_nmi = mim_nmi
    tc_dist = sup_stats.layer(depth).mean_dist_patch

    for seed in seeds:
        arms = {}
        for name, alpha in (("hybrid", 1.0), ("baseline", 0.0)):
            dcfg = distill.DistillConfig(alpha=alpha, schedule=schedule)
            student = vit.init_params(cfg.model, seed)
            train = DistillTrainConfig(epochs=cfg.distill_epochs, seed=seed)
            distill_train(student, teachers, distill_ds.images, dcfg, train)
            arms[name] = diagnostics.model_report(student, probes)
        arm = ArmResult(
            seed=seed,
            hybrid_nmi=_relation_layer_nmi(arms["hybrid"], depth),
            baseline_nmi=_relation_layer_nmi(arms["baseline"], depth),
            teacher_rel_nmi=tm_nmi,
            hybrid_dist=arms["hybrid"].layer(depth).mean_dist_patch,
            teacher_feat_dist=tc_dist,
        )
        result.arms.append(arm)
        if log:
            log(f"seed {seed}: hybrid nmi={arm.hybrid_nmi:.4f} "
                f"baseline nmi={arm.baseline_nmi:.4f} teacher nmi={tm_nmi:.4f} "
                f"| hybrid dist={arm.hybrid_dist:.3f} teacher dist={tc_dist:.3f} "
                f"| (a)={arm.nmi_closer} (b)={arm.dist_preserved}")
    return result
