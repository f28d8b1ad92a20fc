"""A small Vision Transformer whose forward pass can expose per-layer internals.

The same parameter/config shape serves as trainable student and as frozen
teacher. Each block can record a :class:`LayerTrace` holding the per-head
query/key projections, the scaled query-key relation matrix, the attention
probabilities and the block output, which is the raw material both for
relation distillation and for the attention diagnostics.

Architecture notes (fixed for determinism and testability):

* no class token; classification mean-pools the final features, so every
  token stays spatial and token masking applies uniformly;
* pre-layernorm placement, with the block's residual wiring
  ``out = x + mlp(ln2(x + msa(ln1(x))))``;
* relation matrices are stored per head with the 1/sqrt(head_dim) scale
  already folded in, and attention is exactly ``softmax`` of the stored
  relation;
* learned absolute positional embeddings; a masked forward selects the
  positional rows together with the token rows;
* no dropout / stochastic depth anywhere.
"""

from __future__ import annotations

import json
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, FormatError, ShapeError
from .util import rng

CHECKPOINT_VERSION = 1

DECODER_KINDS = ("none", "linear", "attn")
HEAD_KINDS = ("none", "classify", "reconstruct")


@dataclass(frozen=True)
class ViTConfig:
    """Architecture description; parameter shapes are a pure function of it."""

    image_size: int = 32
    patch_size: int = 4
    channels: int = 1
    depth: int = 6
    heads: int = 4
    dim: int = 96
    mlp_ratio: int = 4
    decoder: str = "none"        # none | linear | attn (attn uses decoder_depth blocks)
    decoder_depth: int = 0
    head: str = "none"           # none | classify | reconstruct
    n_classes: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ContractError(f"image_size {self.image_size} not divisible by patch {self.patch_size}")
        if self.dim % self.heads != 0:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.decoder not in DECODER_KINDS:
            raise ContractError(f"decoder must be one of {DECODER_KINDS}, got {self.decoder!r}")
        if self.decoder == "attn" and self.decoder_depth < 1:
            raise ContractError("attn decoder needs decoder_depth >= 1")
        if self.head not in HEAD_KINDS:
            raise ContractError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        if self.head == "classify" and self.n_classes < 2:
            raise ContractError("classify head needs n_classes >= 2")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "patch_size": self.patch_size,
            "channels": self.channels, "depth": self.depth, "heads": self.heads,
            "dim": self.dim, "mlp_ratio": self.mlp_ratio,
            "decoder": self.decoder, "decoder_depth": self.decoder_depth,
            "head": self.head, "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**d)

    def same_structure(self, other: "ViTConfig") -> bool:
        """Teachers and student must agree on token geometry, width, heads, depth."""
        return (self.image_size, self.patch_size, self.channels,
                self.depth, self.heads, self.dim, self.mlp_ratio) == \
               (other.image_size, other.patch_size, other.channels,
                other.depth, other.heads, other.dim, other.mlp_ratio)


@dataclass
class LayerTrace:
    """Per-layer capture: q/k per head, scaled relation, attention, block output.

    Shapes are [H, N', head_dim] / [H, N', N'] / [N', dim] for a single image,
    with a leading batch axis when the forward was batched.
    """

    q: T.Tensor
    k: T.Tensor
    r: T.Tensor
    a: T.Tensor
    f: T.Tensor
    decoder: bool = False


@dataclass
class ForwardResult:
    tokens0: T.Tensor                 # embedded input incl. positions, [.., N', dim]
    features: T.Tensor                # final encoder block output
    traces: list[LayerTrace] = field(default_factory=list)
    decoder_traces: list[LayerTrace] = field(default_factory=list)
    decoder_features: T.Tensor | None = None
    head_out: T.Tensor | None = None

    @property
    def distill_features(self) -> T.Tensor:
        """Where the feature loss attaches: decoder output if present."""
        return self.decoder_features if self.decoder_features is not None else self.features


class ViTParams:
    """Named parameter set; ordering is fixed and drives the checkpoint manifest."""

    def __init__(self, config: ViTConfig, tensors: dict[str, T.Tensor]):
        self.config = config
        self.tensors = tensors
        self.frozen = False

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def block(self, i: int, decoder: bool = False) -> dict[str, T.Tensor]:
        prefix = f"decoder.{i}." if decoder else f"blocks.{i}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def no_decay_names(self) -> frozenset[str]:
        """Biases and layernorm parameters, excluded from weight decay."""
        out = set()
        for name in self.tensors:
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2") or ".ln" in name:
                out.add(name)
        return frozenset(out)

    def freeze(self) -> "ViTParams":
        """Mark immutable: gradient tracking off, buffers write-protected."""
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False
        self.frozen = True
        return self

    def clone(self, requires_grad: bool = True) -> "ViTParams":
        out = ViTParams(self.config, {
            n: T.Tensor(t.data.copy(), requires_grad=requires_grad)
            for n, t in self.tensors.items()
        })
        return out

    def grads(self) -> dict[str, np.ndarray]:
        return {n: t.grad for n, t in self.tensors.items() if t.grad is not None}

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()


def _trunc_normal(gen: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations, by resampling."""
    out = gen.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _block_shapes(cfg: ViTConfig) -> list[tuple[str, tuple, str]]:
    d, md = cfg.dim, cfg.dim * cfg.mlp_ratio
    return [
        ("ln1.g", (d,), "ones"), ("ln1.b", (d,), "zeros"),
        ("wq", (d, d), "tn"), ("bq", (d,), "zeros"),
        ("wk", (d, d), "tn"), ("bk", (d,), "zeros"),
        ("wv", (d, d), "tn"), ("bv", (d,), "zeros"),
        ("wo", (d, d), "tn"), ("bo", (d,), "zeros"),
        ("ln2.g", (d,), "ones"), ("ln2.b", (d,), "zeros"),
        ("mlp.w1", (d, md), "tn"), ("mlp.b1", (md,), "zeros"),
        ("mlp.w2", (md, d), "tn"), ("mlp.b2", (d,), "zeros"),
    ]


def param_shapes(cfg: ViTConfig) -> list[tuple[str, tuple, str]]:
    """Ordered (name, shape, init kind) for every parameter of a config."""
    out = [
        ("patch_embed.w", (cfg.patch_dim, cfg.dim), "tn"),
        ("patch_embed.b", (cfg.dim,), "zeros"),
        ("pos_embed", (cfg.tokens, cfg.dim), "tn"),
    ]
    for i in range(cfg.depth):
        out.extend((f"blocks.{i}.{n}", s, k) for n, s, k in _block_shapes(cfg))
    if cfg.decoder == "linear":
        out.append(("decoder.w", (cfg.dim, cfg.dim), "tn"))
        out.append(("decoder.b", (cfg.dim,), "zeros"))
    elif cfg.decoder == "attn":
        for i in range(cfg.decoder_depth):
            out.extend((f"decoder.{i}.{n}", s, k) for n, s, k in _block_shapes(cfg))
    if cfg.head == "classify":
        out.append(("head.w", (cfg.dim, cfg.n_classes), "tn"))
        out.append(("head.b", (cfg.n_classes,), "zeros"))
    elif cfg.head == "reconstruct":
        out.append(("head.w", (cfg.dim, cfg.patch_dim), "tn"))
        out.append(("head.b", (cfg.patch_dim,), "zeros"))
        out.append(("mask_token", (cfg.dim,), "tn"))
    return out


def init_params(cfg: ViTConfig, seed: int) -> ViTParams:
    """Fresh parameters: truncated-normal weights (std 0.02), zero biases,
    unit layernorm gains. Bit-reproducible from the seed."""
    gen = rng(seed, "vit-init")
    tensors: dict[str, T.Tensor] = {}
    for name, shape, kind in param_shapes(cfg):
        if kind == "tn":
            data = _trunc_normal(gen, shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = T.Tensor(data, requires_grad=True)
    return ViTParams(cfg, tensors)


# ---------------------------------------------------------------------------
# forward pass


def patchify(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """Split images into flattened patches, [B, N, patch_dim].

    Accepts u8 or float input of shape [B, C, H, W]; pixels are mapped to
    [-1, 1]. Token t covers grid cell (t // grid, t % grid); its vector is
    the (channel, y, x) row-major flatten of that cell.
    """
    if images.ndim == 3:
        images = images[None]
    b, c, h, w = images.shape
    if (c, h, w) != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ShapeError(f"image dims {(c, h, w)} do not match config "
                         f"{(cfg.channels, cfg.image_size, cfg.image_size)}")
    p, g = cfg.patch_size, cfg.grid
    x = images.astype(np.float64) / 127.5 - 1.0
    x = x.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, cfg.patch_dim))


def patch_embed(params: ViTParams, images: np.ndarray,
                mask_indices: np.ndarray | None = None) -> T.Tensor:
    """Project patches and add positional embeddings -> tokens [B, N', dim].

    ``mask_indices`` ([B, k] kept token ids) restricts both the patch rows
    and the positional rows before anything enters layer 0.
    """
    cfg = params.config
    patches = patchify(images, cfg)
    b = patches.shape[0]
    if mask_indices is not None:
        mask_indices = np.asarray(mask_indices, dtype=np.intp)
        if mask_indices.ndim == 1:
            mask_indices = np.broadcast_to(mask_indices, (b, mask_indices.shape[0]))
        if mask_indices.shape[1] == 0:
            raise ContractError("mask selects zero tokens")
        patches = patches[np.arange(b)[:, None], mask_indices]
        pos = T.gather_rows(params["pos_embed"], mask_indices)
    else:
        idx = np.broadcast_to(np.arange(cfg.tokens), (b, cfg.tokens))
        pos = T.gather_rows(params["pos_embed"], idx)
    proj = T.add_bias(T.matmul(T.Tensor(patches), params["patch_embed.w"]),
                      params["patch_embed.b"])
    return T.add(proj, pos)


def _split_heads(x: T.Tensor, heads: int) -> T.Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: T.Tensor) -> T.Tensor:
    b, h, n, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * hd))


def block_forward(x: T.Tensor, bp: dict[str, T.Tensor], heads: int,
                  keep_trace: bool = True, decoder: bool = False
                  ) -> tuple[T.Tensor, LayerTrace | None]:
    """One transformer block on tokens [B, N', dim].

    Residual wiring: u = x + msa(ln1(x)); out = x + mlp(ln2(u)). The stored
    relation r is q @ k^T scaled by 1/sqrt(head_dim), and a = softmax(r).
    """
    d = x.shape[-1]
    hd = d // heads
    h1 = T.layer_norm(x, bp["ln1.g"], bp["ln1.b"])
    q = _split_heads(T.add_bias(T.matmul(h1, bp["wq"]), bp["bq"]), heads)
    k = _split_heads(T.add_bias(T.matmul(h1, bp["wk"]), bp["bk"]), heads)
    v = _split_heads(T.add_bias(T.matmul(h1, bp["wv"]), bp["bv"]), heads)
    r = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(hd))
    a = T.softmax(r, axis=-1)
    msa = T.add_bias(T.matmul(_merge_heads(T.matmul(a, v)), bp["wo"]), bp["bo"])
    u = T.add(x, msa)
    h2 = T.layer_norm(u, bp["ln2.g"], bp["ln2.b"])
    mlp = T.add_bias(T.matmul(T.gelu(T.add_bias(T.matmul(h2, bp["mlp.w1"]), bp["mlp.b1"])),
                              bp["mlp.w2"]), bp["mlp.b2"])
    out = T.add(x, mlp)
    trace = LayerTrace(q=q, k=k, r=r, a=a, f=out, decoder=decoder) if keep_trace else None
    return out, trace


def encode(params: ViTParams, tokens: T.Tensor, keep_trace: bool = False
           ) -> tuple[T.Tensor, list[LayerTrace]]:
    """Run the encoder blocks over embedded tokens."""
    cfg = params.config
    traces: list[LayerTrace] = []
    x = tokens
    for i in range(cfg.depth):
        x, tr = block_forward(x, params.block(i), cfg.heads, keep_trace)
        if tr is not None:
            traces.append(tr)
    return x, traces


def decoder_forward(params: ViTParams, features: T.Tensor, keep_trace: bool = False
                    ) -> tuple[T.Tensor, list[LayerTrace]]:
    """Apply the optional student decoder; traces are tagged as decoder layers."""
    cfg = params.config
    if cfg.decoder == "none":
        raise ContractError("decoder_forward called with decoder kind 'none'")
    if cfg.decoder == "linear":
        out = T.add_bias(T.matmul(features, params["decoder.w"]), params["decoder.b"])
        return out, []
    traces: list[LayerTrace] = []
    x = features
    for i in range(cfg.decoder_depth):
        x, tr = block_forward(x, params.block(i, decoder=True), cfg.heads,
                              keep_trace, decoder=True)
        if tr is not None:
            traces.append(tr)
    return x, traces


def _head_forward(params: ViTParams, features: T.Tensor) -> T.Tensor | None:
    cfg = params.config
    if cfg.head == "classify":
        pooled = T.reduce_mean(features, axis=-2)
        if pooled.ndim == 1:
            pooled = T.reshape(pooled, (1, cfg.dim))
        return T.add_bias(T.matmul(pooled, params["head.w"]), params["head.b"])
    if cfg.head == "reconstruct":
        return T.add_bias(T.matmul(features, params["head.w"]), params["head.b"])
    return None


def forward(params: ViTParams, images: np.ndarray | None = None,
            mask_indices: np.ndarray | None = None,
            keep_trace: bool = False,
            run_head: bool = False,
            run_decoder: bool = True,
            tokens: T.Tensor | None = None) -> ForwardResult:
    """Full forward pass from images (or pre-embedded ``tokens``).

    Frozen parameter sets run without gradient recording. Single-image input
    ([C, H, W]) yields unbatched traces/features; batched input keeps the
    leading axis. Per-image masks are passed as kept-index arrays [B, k].
    """
    if images is None and tokens is None:
        raise ContractError("forward needs images or tokens")
    squeeze = tokens is None and np.asarray(images).ndim == 3
    ctx = T.no_grad() if params.frozen else nullcontext()
    with ctx:
        if tokens is None:
            tokens = patch_embed(params, np.asarray(images), mask_indices)
        x, traces = encode(params, tokens, keep_trace)
        result = ForwardResult(tokens0=tokens, features=x, traces=traces)
        if params.config.decoder != "none" and run_decoder:
            dec, dtraces = decoder_forward(params, x, keep_trace)
            result.decoder_features = dec
            result.decoder_traces = dtraces
        if run_head:
            result.head_out = _head_forward(params, result.distill_features)
    if squeeze:
        result = _squeeze_result(result)
    return result


def _squeeze_t(t: T.Tensor | None) -> T.Tensor | None:
    if t is None:
        return None
    return T.reshape(t, t.shape[1:])


def _squeeze_result(res: ForwardResult) -> ForwardResult:
    def sq_trace(tr: LayerTrace) -> LayerTrace:
        return LayerTrace(q=_squeeze_t(tr.q), k=_squeeze_t(tr.k), r=_squeeze_t(tr.r),
                          a=_squeeze_t(tr.a), f=_squeeze_t(tr.f), decoder=tr.decoder)
    return ForwardResult(
        tokens0=_squeeze_t(res.tokens0),
        features=_squeeze_t(res.features),
        traces=[sq_trace(t) for t in res.traces],
        decoder_traces=[sq_trace(t) for t in res.decoder_traces],
        decoder_features=_squeeze_t(res.decoder_features),
        head_out=_squeeze_t(res.head_out),
    )


# ---------------------------------------------------------------------------
# checkpoint format: one JSON header line {format_version, config, manifest},
# a newline, then the raw little-endian float64 arrays in manifest order.


def save_checkpoint(path: str, params: ViTParams, meta: dict | None = None) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name, t in params.tensors.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(t.data.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "manifest": manifest,
    }
    if meta:
        header["meta"] = meta
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str, frozen: bool = False) -> tuple[ViTParams, dict]:
    """Read a checkpoint; rejects unknown format versions."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        body = fh.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid checkpoint header") from e
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unknown format_version {header.get('format_version')!r}")
    cfg = ViTConfig.from_dict(header["config"])
    tensors: dict[str, T.Tensor] = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=start).reshape(shape)
        tensors[entry["name"]] = T.Tensor(arr.copy(), requires_grad=not frozen)
    params = ViTParams(cfg, tensors)
    expected = [name for name, _, _ in param_shapes(cfg)]
    if list(tensors) != expected:
        raise FormatError(f"{path}: manifest does not match config parameter set")
    if frozen:
        params.freeze()
    return params, header.get("meta", {})
