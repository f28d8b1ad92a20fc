"""Dense tensors with reverse-mode differentiation.

Just enough array math for a small transformer: matmul (with stacked batch
dims), softmax, layer norm, GELU, elementwise ops, reductions and row
gathering. Data is row-major float64 by default; float32 works but the
gradient test tolerances in this repo assume float64.

Every op checks its output for NaN/Inf and raises ``NumericError`` instead
of letting non-finite values propagate (small models at high learning rates
diverge loudly, not silently).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording; forwards of frozen models run through here."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


finite_checks = True  # module-wide switch; on by default per the numeric contract


def _check_finite(arr: np.ndarray, op: str) -> None:
    # sum is one allocation-free pass; any NaN/Inf in the array makes it
    # non-finite (Inf + -Inf gives NaN), and desk-scale magnitudes cannot
    # overflow a finite float64 sum
    if finite_checks and not np.isfinite(arr.sum()):
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """A dense n-d array, optionally tracked by the gradient tape.

    Leaves created with ``requires_grad=True`` own a zero-initialized
    ``grad`` buffer of the same shape; intermediate results carry backward
    closures instead and never retain gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all semantics live in the module-level ops
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
    record = _grad_enabled() and any(p.requires_grad or p._parents for p in parents)
    out.requires_grad = record
    out.grad = None
    out._parents = tuple(parents) if record else ()
    out._backward = backward_fn if record else None
    out._seq = next(_seq)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    ``loss`` must be a scalar produced by recorded ops. Nodes are replayed
    in reverse creation order, so repeated runs on identical inputs produce
    bit-identical gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward is None:
        raise ContractError("backward requires a loss produced within a recorded graph")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._seq in nodes or t._backward is None:
            continue
        nodes[t._seq] = t
        stack.extend(t._parents)

    # some backward closures return views/aliases of the incoming gradient
    # (add, reshape); track borrowed buffers so accumulation never mutates them
    grads: dict[int, np.ndarray] = {loss._seq: np.ones_like(loss.data)}
    borrowed: set[int] = set()
    for seq in sorted(nodes, reverse=True):
        node = nodes[seq]
        g = grads.pop(seq, None)
        if g is None:
            continue
        borrowed.discard(seq)
        contribs = node._backward(g)
        for parent, pg in zip(node._parents, contribs):
            if pg is None:
                continue
            if parent._backward is not None:
                acc = grads.get(parent._seq)
                if acc is None:
                    grads[parent._seq] = pg
                    borrowed.add(parent._seq)
                elif parent._seq in borrowed:
                    grads[parent._seq] = acc + pg
                    borrowed.discard(parent._seq)
                else:
                    acc += pg
            elif parent.requires_grad:
                parent.grad += pg


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` (undo stacked-matmul broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a @ b``; leading dims broadcast.

    The common transformer case — stacked activations times a 2-d weight —
    is flattened to a single large GEMM instead of one small GEMM per batch
    row, both forward and backward.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands: {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    flat = b.data.ndim == 2 and a.data.ndim > 2
    if flat:
        lead = a.data.shape[:-1]
        a2 = a.data.reshape(-1, a.data.shape[-1])
        out = (a2 @ b.data).reshape(*lead, b.data.shape[-1])
    else:
        try:
            out = a.data @ b.data
        except ValueError as e:
            raise ShapeError(f"matmul batch extents incompatible: {a.shape} @ {b.shape}") from e

    def bwd(g: np.ndarray):
        ga = gb = None
        need_a = a.requires_grad or a._parents
        need_b = b.requires_grad or b._parents
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if need_a:
                ga = (g2 @ b.data.T).reshape(a.data.shape)
            if need_b:
                gb = a.data.reshape(-1, a.data.shape[-1]).T @ g2
        else:
            if need_a:
                ga = _reduce_to(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
            if need_b:
                gb = _reduce_to(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(out, (a, b), bwd, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bwd(g: np.ndarray):
        return g, g

    return _make(out, (a, b), bwd, "add")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector over the last axis; the bias gradient sums leading axes."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias needs a last-axis vector: {x.shape} + {b.shape}")
    out = x.data + b.data

    def bwd(g: np.ndarray):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return g, gb

    return _make(out, (x, b), bwd, "add_bias")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product; shapes must match exactly."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def bwd(g: np.ndarray):
        return g * b.data, g * a.data

    return _make(out, (a, b), bwd, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def bwd(g: np.ndarray):
        return (g * c,)

    return _make(out, (x,), bwd, "scale")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes (default: swap the last two). Output is materialized."""
    if x.data.ndim < 2:
        raise ShapeError(f"transpose needs >=2-d input, got {x.shape}")
    if axes is None:
        axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g: np.ndarray):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(out, (x,), bwd, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bwd(g: np.ndarray):
        return (g.reshape(x.data.shape),)

    return _make(out, (x,), bwd, "reshape")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    xd = x.data
    half_cdf = erf(xd * _INV_SQRT2)     # reused in place as 0.5 (1 + erf(.))
    half_cdf += 1.0
    half_cdf *= 0.5
    out = xd * half_cdf
    bwd = None
    if _grad_enabled() and (x.requires_grad or x._parents):
        # build the derivative now, while operands are cache-hot
        deriv = np.exp(xd * xd * -0.5)
        deriv *= _INV_SQRT2PI
        deriv *= xd
        deriv += half_cdf

        def bwd(g: np.ndarray):
            return (g * deriv,)

    return _make(out, (x,), bwd, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; outputs sum to 1 on that axis."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=axis, keepdims=True)
    out = shifted

    def bwd(g: np.ndarray):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), bwd, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm affine params must be ({d},): {gamma.shape}, {beta.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be > 0")
    mean = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mean
    var = np.einsum("...i,...i->...", xhat, xhat) / d
    inv = 1.0 / np.sqrt(var + eps)[..., None]
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data

    def bwd(g: np.ndarray):
        gg = gb = None
        if gamma.requires_grad or gamma._parents or beta.requires_grad or beta._parents:
            g2 = g.reshape(-1, d)
            gg = np.einsum("ri,ri->i", g2, xhat.reshape(-1, d))
            gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad or x._parents:
            gy = g * gamma.data
            gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                        - xhat * np.einsum("...i,...i->...", gy, xhat)[..., None] / d)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bwd, "layer_norm")


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def bwd(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _make(out, (x,), bwd, "reduce_sum")


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    out = np.asarray(x.data.mean(axis=axis))

    def bwd(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g / n, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.data.shape).copy(),)

    return _make(out, (x,), bwd, "reduce_mean")


def _check_indices(idx: np.ndarray, n: int, op: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"{op} index {bad} out of range for {n} rows")
    return idx


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-d tensor; the backward scatters into dropped rows.

    ``indices`` may be any integer array; output shape is
    ``indices.shape + x.shape[1:]``. Callers pass sorted unique indices per
    row when masking tokens, but that is not enforced here.
    """
    if x.data.ndim < 2:
        raise ShapeError(f"gather_rows needs a >=2-d source, got {x.shape}")
    idx = _check_indices(indices, x.data.shape[0], "gather_rows")
    out = x.data[idx]

    def bwd(g: np.ndarray):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, (x,), bwd, "gather_rows")


def gather_tokens(x: Tensor, indices) -> Tensor:
    """Per-batch row selection: x[B, N, ...] with indices[B, M] -> [B, M, ...]."""
    idx = _check_indices(indices, x.data.shape[1], "gather_tokens")
    if idx.ndim != 2 or idx.shape[0] != x.data.shape[0]:
        raise ShapeError(f"gather_tokens needs indices [B, M] for x {x.shape}, got {idx.shape}")
    batch = np.arange(x.data.shape[0])[:, None]
    out = x.data[batch, idx]

    def bwd(g: np.ndarray):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (batch, idx), g)
        return (gx,)

    return _make(out, (x,), bwd, "gather_tokens")


def smooth_l1(a: Tensor, b: Tensor, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 distance: 0.5 d^2/beta inside |d|<beta, |d|-0.5 beta outside."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"smooth_l1 shapes differ: {a.shape} vs {b.shape}")
    if beta <= 0:
        raise ContractError("smooth_l1 beta must be > 0")
    delta = a.data - b.data
    absd = np.abs(delta)
    quad = absd < beta
    vals = np.where(quad, 0.5 * delta * delta / beta, absd - 0.5 * beta)
    out = np.asarray(vals.mean())

    def bwd(g: np.ndarray):
        d = np.where(quad, delta / beta, np.sign(delta)) * (g / delta.size)
        return d, -d

    return _make(out, (a, b), bwd, "smooth_l1")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row softmax of ``logits``."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [batch, classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError("label out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    out = np.asarray((logz - shifted[np.arange(n), labels]).mean())
    probs = np.exp(shifted - logz[:, None])

    def bwd(g: np.ndarray):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1.0
        gl *= g / n
        return (gl,)

    return _make(out, (logits,), bwd, "softmax_cross_entropy")


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
