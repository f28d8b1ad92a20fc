"""Progressive redundant-token masking.

A frozen masked-image-modeling teacher identifies redundant tokens layer by
layer: at each scheduled layer, the tokens still kept are scored by cosine
similarity to their mean, and the most-similar fraction is dropped. The
final keep set decides which tokens the student processes and which rows
(and relation rows/columns) the distillation losses cover.

The teacher always runs the full sequence; masking only restricts which of
its activations are read. Layer index i refers to the *input* of block i,
so index 0 scores the post-embedding tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import vit
from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class MaskStage:
    layer: int
    dropped: tuple[int, ...]
    note: str | None = None


@dataclass
class TokenMask:
    """Binary keep vector plus the per-stage drop history that produced it."""

    keep: np.ndarray                      # bool, length N
    stage_history: list[MaskStage] = field(default_factory=list)

    @property
    def n(self) -> int:
        return int(self.keep.shape[0])

    @property
    def kept_count(self) -> int:
        return int(self.keep.sum())

    @property
    def keep_ratio(self) -> float:
        return self.kept_count / self.n

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)

    @classmethod
    def full(cls, n: int) -> "TokenMask":
        return cls(keep=np.ones(n, dtype=bool))


@dataclass(frozen=True)
class MaskSchedule:
    """Which layers update the mask, and the drop fraction per update."""

    update_layers: tuple[int, ...] = ()
    drop_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.drop_fraction < 1.0:
            raise ContractError(f"drop_fraction must be in [0, 1), got {self.drop_fraction}")
        if any(i < 0 for i in self.update_layers):
            raise ContractError("update layers must be non-negative")
        object.__setattr__(self, "update_layers", tuple(sorted(set(self.update_layers))))

    @classmethod
    def thirds(cls, depth: int, drop_fraction: float) -> "MaskSchedule":
        """Default update set {0, L/3, 2L/3}, rounded and deduplicated."""
        layers = sorted({int(round(depth * f)) for f in (0.0, 1 / 3, 2 / 3)})
        return cls(update_layers=tuple(layers), drop_fraction=drop_fraction)

    def to_dict(self) -> dict:
        return {"update_layers": list(self.update_layers), "drop_fraction": self.drop_fraction}


def redundant_select(tokens: np.ndarray, drop_fraction: float) -> np.ndarray:
    """Indices of the floor(K * n) tokens most similar to the mean token.

    Similarity is cosine against the mean of the rows; if the mean vector is
    all zero, raw dot products are used instead (degenerate inputs). Zero
    rows score 0. Ties prefer the lower token index. Returned ascending.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ShapeError(f"redundant_select needs [n, d] tokens, got {tokens.shape}")
    if not 0.0 <= drop_fraction < 1.0:
        raise ContractError(f"drop_fraction must be in [0, 1), got {drop_fraction}")
    n = tokens.shape[0]
    count = int(np.floor(drop_fraction * n))
    if count == 0:
        return np.empty(0, dtype=np.intp)
    mean = tokens.mean(axis=0)
    mnorm = np.linalg.norm(mean)
    dots = tokens @ mean
    if mnorm == 0.0:
        sim = dots
    else:
        tnorm = np.linalg.norm(tokens, axis=1)
        sim = np.divide(dots, tnorm * mnorm, out=np.zeros(n), where=tnorm > 0)
    # stable sort on -sim keeps ascending index order within ties
    order = np.argsort(-sim, kind="stable")
    return np.sort(order[:count])


def _stage_update(keep: np.ndarray, feats: np.ndarray, layer: int,
                  drop_fraction: float, history: list[MaskStage]) -> None:
    kept = np.flatnonzero(keep)
    dropped_local = redundant_select(feats[kept], drop_fraction)
    dropped = kept[dropped_local]
    if dropped.size >= kept.size:  # unreachable for K < 1; defensive clamp
        dropped = dropped[:-1]
        history.append(MaskStage(layer, tuple(int(i) for i in dropped),
                                 note="clamped to keep >= 1 token"))
    else:
        history.append(MaskStage(layer, tuple(int(i) for i in dropped)))
    keep[dropped] = False


def progressive_mask(teacher: vit.ViTParams, image: np.ndarray,
                     schedule: MaskSchedule) -> TokenMask:
    """Run the frozen teacher once and derive the token mask for one image."""
    return progressive_mask_batch(teacher, np.asarray(image)[None], schedule)[0]


def progressive_mask_batch(teacher: vit.ViTParams, images: np.ndarray,
                           schedule: MaskSchedule) -> list[TokenMask]:
    """Per-image masks for a batch, from one full-sequence teacher forward.

    At each schedule layer the drop count depends only on how many tokens
    are still kept, so kept counts are identical across images; the dropped
    index sets differ.
    """
    depth = teacher.config.depth
    if schedule.update_layers and max(schedule.update_layers) >= depth:
        raise ContractError(f"schedule layers {schedule.update_layers} exceed teacher depth {depth}")
    if schedule.drop_fraction == 0.0 or not schedule.update_layers:
        return [TokenMask.full(teacher.config.tokens) for _ in range(images.shape[0])]
    res = vit.forward(teacher, images, keep_trace=True)
    return masks_from_forward(res, teacher.config, schedule)


def masks_from_forward(res: vit.ForwardResult, cfg: vit.ViTConfig,
                       schedule: MaskSchedule) -> list[TokenMask]:
    """Derive per-image masks from an existing full-sequence batched forward."""
    if schedule.update_layers and max(schedule.update_layers) >= cfg.depth:
        raise ContractError(f"schedule layers {schedule.update_layers} exceed teacher depth {cfg.depth}")
    b = res.tokens0.shape[0]
    masks = [TokenMask.full(cfg.tokens) for _ in range(b)]
    if schedule.drop_fraction == 0.0 or not schedule.update_layers:
        return masks
    # input of block i: embedded tokens for i = 0, else output of block i-1
    layer_inputs = [res.tokens0.data] + [tr.f.data for tr in res.traces[:-1]]
    for layer in schedule.update_layers:
        feats = layer_inputs[layer]
        for j in range(b):
            _stage_update(masks[j].keep, feats[j], layer,
                          schedule.drop_fraction, masks[j].stage_history)
    return masks


def apply_mask(x: np.ndarray, mask: TokenMask, relation: bool | None = None) -> np.ndarray:
    """Row-select kept tokens; relation tensors lose rows *and* columns.

    A tensor whose last two axes both equal the mask length is treated as a
    relation ([.., N, N] -> [.., k, k]) unless ``relation`` overrides the
    detection. Everything else is selected along axis 0. Kept tokens stay in
    ascending original order.
    """
    x = np.asarray(x)
    n = mask.n
    kept = mask.kept_indices()
    if relation is None:
        relation = x.ndim >= 2 and x.shape[-1] == n and x.shape[-2] == n
    if relation:
        if x.ndim < 2 or x.shape[-1] != n or x.shape[-2] != n:
            raise ShapeError(f"relation mask needs [.., {n}, {n}], got {x.shape}")
        return x[..., kept[:, None], kept[None, :]]
    if x.shape[0] != n:
        raise ShapeError(f"mask length {n} does not match axis 0 of {x.shape}")
    return x[kept]


def reconstruct_keep(n: int, history: list[MaskStage]) -> np.ndarray:
    """Replay a stage history from a full mask; equals the recorded keep."""
    keep = np.ones(n, dtype=bool)
    for stage in history:
        keep[list(stage.dropped)] = False
    return keep
