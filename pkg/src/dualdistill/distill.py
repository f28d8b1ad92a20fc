"""Two-teacher distillation objective and training step.

The student imitates two frozen teachers at once: smooth-L1 between its
final features and the feature teacher's final-layer features, plus an
alpha-weighted smooth-L1 between its per-head token relations and the
relation (MIM) teacher's relations at the two layers preceding the final
one. Both targets come from full-sequence teacher forwards and are then
restricted to the kept token set; the student itself runs only on the kept
tokens, where its relations are computed natively on the subsequence.

Conventions: distillation layer indices are 1-based block outputs (layer L
is the final block), while mask-schedule indices are 0-based block inputs.
The objective is minimized. With a student decoder enabled, the feature
loss attaches to the decoder output while relations and diagnostics stay on
the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import masking, optim, tensor as T, vit
from .errors import ContractError, NumericError


def smooth_l1(a: T.Tensor, b: T.Tensor, beta: float = 1.0) -> T.Tensor:
    """Mean smooth-L1 distance (quadratic inside |delta| < beta)."""
    return T.smooth_l1(a, b, beta=beta)


@dataclass(frozen=True)
class DistillConfig:
    """Objective hyperparameters; layer defaults follow the student depth."""

    alpha: float = 1.0
    feature_layer: int | None = None            # default: L
    relation_layers: tuple[int, ...] | None = None   # default: (L-2, L-1)
    schedule: masking.MaskSchedule = field(default_factory=masking.MaskSchedule)
    student_decoder: str = "none"
    student_decoder_depth: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError("alpha must be >= 0")

    def resolved_feature_layer(self, depth: int) -> int:
        layer = depth if self.feature_layer is None else self.feature_layer
        if not 1 <= layer <= depth:
            raise ContractError(f"feature_layer {layer} outside 1..{depth}")
        return layer

    def resolved_relation_layers(self, depth: int) -> tuple[int, ...]:
        layers = self.relation_layers
        if layers is None:
            layers = tuple(i for i in (depth - 2, depth - 1) if i >= 1)
        if any(not 1 <= i <= depth for i in layers):
            raise ContractError(f"relation_layers {layers} outside 1..{depth}")
        return tuple(layers)


@dataclass
class TeacherBundle:
    """The two frozen teachers: feature teacher and relation (MIM) teacher."""

    feat: vit.ViTParams
    rel: vit.ViTParams

    def __post_init__(self):
        for which, t in (("feature", self.feat), ("relation", self.rel)):
            if not t.frozen:
                raise ContractError(f"{which} teacher must be frozen")
        self.check_structure(self.feat.config)

    def check_structure(self, student_cfg: vit.ViTConfig) -> None:
        for t in (self.feat, self.rel):
            if not t.config.same_structure(student_cfg):
                raise ContractError(
                    "symmetric structure required: teachers and student must share "
                    f"geometry, got {t.config.to_dict()} vs {student_cfg.to_dict()}")


@dataclass
class LossBreakdown:
    """Scalar total plus its components; total = feature + alpha * sum(relations)."""

    total: float
    feature_term: float
    relation_terms: dict[int, float]
    tokens_used: int
    loss: T.Tensor | None = None     # graph root; dropped after backward
    lr: float | None = None          # learning rate applied by distill_step

    def as_record(self) -> dict:
        return {
            "total": self.total,
            "feature_term": self.feature_term,
            "relation_terms": [[k, v] for k, v in sorted(self.relation_terms.items())],
            "tokens_used": self.tokens_used,
        }


@dataclass
class DistillTargets:
    """Frozen-teacher outputs for one batch, restricted to kept tokens."""

    masks: list[masking.TokenMask]
    mask_indices: np.ndarray | None     # [B, k] kept token ids, None = unmasked path
    features: np.ndarray                # [B, k, d]
    relations: dict[int, np.ndarray]    # layer -> [B, H, k, k]

    @property
    def tokens_used(self) -> int:
        return self.features.shape[-2]


def feature_target(teacher: vit.ViTParams, image: np.ndarray,
                   mask: masking.TokenMask | None = None) -> np.ndarray:
    """Final-layer features of the full-sequence teacher, row-selected by mask."""
    feats = vit.forward(teacher, image).features.data
    if mask is None:
        return feats
    return np.take(feats, mask.kept_indices(), axis=-2)


def relation_target(teacher: vit.ViTParams, image: np.ndarray,
                    mask: masking.TokenMask | None, layer: int) -> np.ndarray:
    """Per-head scaled relations at a 1-based layer, kept rows and columns."""
    depth = teacher.config.depth
    if not 1 <= layer <= depth:
        raise ContractError(f"relation layer {layer} outside 1..{depth}")
    r = vit.forward(teacher, image, keep_trace=True).traces[layer - 1].r.data
    if mask is None:
        return r
    kept = mask.kept_indices()
    return r[..., kept[:, None], kept[None, :]]


def compute_targets(teachers: TeacherBundle, images: np.ndarray,
                    cfg: DistillConfig, masked: bool = True) -> DistillTargets:
    """Masks plus both teachers' targets for a batch, in two teacher forwards.

    The relation teacher's forward supplies both the mask stages and the
    relation matrices. ``masked=False`` is the explicit no-masking path.
    """
    depth = teachers.feat.config.depth
    rel_layers = cfg.resolved_relation_layers(depth)
    feat_layer = cfg.resolved_feature_layer(depth)
    rel_res = vit.forward(teachers.rel, images, keep_trace=True)
    feat_res = vit.forward(teachers.feat, images, keep_trace=feat_layer != depth)
    if masked:
        masks = masking.masks_from_forward(rel_res, teachers.rel.config, cfg.schedule)
        idx = np.stack([m.kept_indices() for m in masks])
    else:
        masks = [masking.TokenMask.full(teachers.rel.config.tokens)
                 for _ in range(images.shape[0])]
        idx = None
    if feat_layer == depth:
        feats = feat_res.features.data
    else:
        feats = feat_res.traces[feat_layer - 1].f.data
    relations = {layer: rel_res.traces[layer - 1].r.data for layer in rel_layers}
    if idx is not None:
        b, k = idx.shape
        feats = feats[np.arange(b)[:, None], idx]
        selected = {}
        for layer, r in relations.items():
            sub = np.empty((b, r.shape[1], k, k))
            for j in range(b):
                kept = idx[j]
                sub[j] = r[j][:, kept[:, None], kept[None, :]]
            selected[layer] = sub
        relations = selected
    return DistillTargets(masks=masks, mask_indices=idx, features=feats,
                          relations=relations)


def loss_from_targets(student_res: vit.ForwardResult, targets: DistillTargets,
                      cfg: DistillConfig, depth: int) -> LossBreakdown:
    """Assemble the objective for a student already run on the kept tokens.

    Relation terms are always evaluated for reporting; with alpha == 0 they
    are left out of the total's graph, which reduces the objective to plain
    feature distillation bit-for-bit.
    """
    k = targets.tokens_used
    if student_res.features.shape[-2] != k:
        raise ContractError(
            f"student ran on {student_res.features.shape[-2]} tokens, targets cover {k}")
    rel_layers = cfg.resolved_relation_layers(depth)
    feat_t = smooth_l1(student_res.distill_features, T.Tensor(targets.features))
    rel_ts: dict[int, T.Tensor] = {}
    for layer in rel_layers:
        rel_ts[layer] = smooth_l1(student_res.traces[layer - 1].r,
                                  T.Tensor(targets.relations[layer]))
    total = feat_t
    if cfg.alpha > 0 and rel_ts:
        rel_sum = None
        for t in rel_ts.values():
            rel_sum = t if rel_sum is None else T.add(rel_sum, t)
        total = T.add(feat_t, T.scale(rel_sum, cfg.alpha))
    return LossBreakdown(
        total=float(total.data),
        feature_term=float(feat_t.data),
        relation_terms={layer: float(t.data) for layer, t in rel_ts.items()},
        tokens_used=k,
        loss=total,
    )


def hybrid_loss(student: vit.ViTParams, teachers: TeacherBundle, image: np.ndarray,
                mask: masking.TokenMask | None, cfg: DistillConfig) -> LossBreakdown:
    """Objective for a single image under a given mask (None = no masking).

    Convenience wrapper: runs the student on the kept subsequence and both
    teachers on the full sequence, then assembles the loss.
    """
    teachers.check_structure(student.config)
    images = np.asarray(image)[None]
    depth = student.config.depth
    if mask is None:
        targets = compute_targets(teachers, images, cfg, masked=False)
        idx = None
    else:
        kept = mask.kept_indices()
        if kept.size == 0:
            raise ContractError("mask selects zero tokens")
        idx = kept[None, :]
        feats = feature_target(teachers.feat, images, mask)
        relations = {
            layer: relation_target(teachers.rel, images, mask, layer)
            for layer in cfg.resolved_relation_layers(depth)
        }
        targets = DistillTargets(masks=[mask], mask_indices=idx,
                                 features=feats, relations=relations)
    student_res = vit.forward(student, images, mask_indices=idx, keep_trace=True)
    return loss_from_targets(student_res, targets, cfg, depth)


def distill_step(student: vit.ViTParams, teachers: TeacherBundle,
                 images: np.ndarray, state: optim.AdamWState,
                 cfg: DistillConfig, targets: DistillTargets | None = None,
                 masked: bool = True) -> LossBreakdown:
    """One optimizer step on the batch-mean objective.

    Per-image masks are recomputed fresh from the relation teacher unless
    precomputed ``targets`` are supplied (teachers are frozen, so cached
    targets are identical to fresh ones). Non-finite losses abort.
    """
    teachers.check_structure(student.config)
    if targets is None:
        targets = compute_targets(teachers, images, cfg, masked=masked)
    student_res = vit.forward(student, images, mask_indices=targets.mask_indices,
                              keep_trace=True)
    breakdown = loss_from_targets(student_res, targets, cfg, student.config.depth)
    if not np.isfinite(breakdown.total):
        raise NumericError(f"non-finite distill loss at step {state.step}")
    student.zero_grads()
    T.backward(breakdown.loss)
    breakdown.lr = optim.adamw_step(student.tensors, student.grads(), state)
    breakdown.loss = None
    return breakdown
