"""AdamW with decoupled weight decay and a warmup + cosine-decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tensor


def cosine_lr(step: int, warmup_steps: int, total_steps: int,
              lr_base: float, lr_min: float = 0.0) -> float:
    """Linear ramp 0 -> lr_base over warmup, then cosine decay to lr_min."""
    if total_steps <= warmup_steps:
        raise ContractError(f"total_steps {total_steps} must exceed warmup {warmup_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return lr_base * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_min + 0.5 * (lr_base - lr_min) * (1.0 + np.cos(np.pi * progress))


@dataclass
class AdamWState:
    """Moment buffers plus the full schedule; one state per trained model."""

    lr_base: float
    total_steps: int
    warmup_steps: int = 0
    lr_min: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    no_decay: frozenset[str] = frozenset()
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self) -> float:
        return cosine_lr(self.step, self.warmup_steps, self.total_steps,
                         self.lr_base, self.lr_min)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: AdamWState) -> float:
    """One bias-corrected AdamW update over all parameters, in place.

    Weight decay is decoupled (applied directly to the parameter, scaled by
    lr) and skipped for names in ``state.no_decay`` — biases and layernorm
    parameters. Returns the learning rate used.
    """
    lr = state.lr()
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not p.data.flags.writeable:
            raise ContractError(f"parameter {name} is frozen; refusing update")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; aborting step")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay and name not in state.no_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * ((m / c1) / (np.sqrt(v / c2) + state.eps))
    return lr
