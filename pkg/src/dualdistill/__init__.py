"""dualdistill: desk-scale two-teacher ViT distillation workbench.

A student vision transformer learns simultaneously from a frozen
discriminative teacher (final-layer features) and a frozen masked-image-
modeling teacher (pre-final-layer token relations), over a progressively
masked token set, with attention diagnostics (average head distance,
normalized mutual information) to evidence the resulting properties.
"""

from .errors import (ContractError, DualDistillError, FormatError,
                     NumericError, ShapeError, UsageError)
from .tensor import Tensor, backward, no_grad
from .vit import ViTConfig, ViTParams, forward, init_params, load_checkpoint, save_checkpoint
from .masking import MaskSchedule, TokenMask, apply_mask, progressive_mask, redundant_select
from .distill import DistillConfig, LossBreakdown, TeacherBundle, hybrid_loss, smooth_l1
from .diagnostics import avg_head_distance, model_report, nmi
from .optim import AdamWState, adamw_step, cosine_lr
from .data import Dataset, ReconTask, generate, pretrain_mim_teacher, pretrain_supervised_teacher

__version__ = "0.1.0"

__all__ = [
    "AdamWState", "ContractError", "Dataset", "DistillConfig", "DualDistillError",
    "FormatError", "LossBreakdown", "MaskSchedule", "NumericError", "ReconTask",
    "ShapeError", "TeacherBundle", "Tensor", "TokenMask", "UsageError", "ViTConfig",
    "ViTParams", "adamw_step", "apply_mask", "avg_head_distance", "backward",
    "cosine_lr", "forward", "generate", "hybrid_loss", "init_params",
    "load_checkpoint", "model_report", "nmi", "no_grad", "pretrain_mim_teacher",
    "pretrain_supervised_teacher", "progressive_mask", "redundant_select",
    "save_checkpoint", "smooth_l1",
]
