"""Synthetic dataset generation, dataset file I/O, and teacher pretraining.

The dataset is procedural: eight grayscale motif classes (stripe fields at
four orientations, one large blob vs three small blobs, checkerboards,
concentric rings) with jittered position, scale, phase and additive noise.
Every image is standardized to the same mean/spread so raw-pixel statistics
carry no class signal; stripe phases and blob positions are random, so
separating the classes requires spatial structure (orientation energy,
counting, periodicity), which is what makes the tiny ViT materially better
than a linear probe on raw pixels.

Two proxy teachers are trained here: a supervised classifier (mean-pooled
cross-entropy) standing in for a discriminative teacher, and a masked-
reconstruction model (full sequence with learned mask tokens, linear head
predicting per-patch-normalized pixels of masked patches only) standing in
for a masked-image-modeling teacher.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import optim, tensor as T, vit
from .errors import ContractError, FormatError, NumericError
from .util import rng

DATASET_VERSION = 1
MOTIF_CLASSES = 8


@dataclass
class Dataset:
    images: np.ndarray          # u8, [n, c, h, w]
    labels: np.ndarray          # u16, [n]
    class_count: int
    split: str = "train"
    seed: int = 0

    def __post_init__(self):
        if self.labels.size and int(self.labels.max()) >= self.class_count:
            raise ContractError("labels must be < class_count")

    @property
    def n(self) -> int:
        return int(self.images.shape[0])


def _coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    ax = np.arange(size, dtype=np.float64)
    return np.meshgrid(ax, ax, indexing="ij")


def _blob(yy, xx, cy, cx, sigma):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))


def _draw_motif(gen: np.random.Generator, cls: int, size: int) -> np.ndarray:
    """One [size, size] float image for a class, with per-image jitter."""
    yy, xx = _coords(size)
    phase = gen.uniform(0.0, 2.0 * np.pi)
    freq = gen.uniform(2.0, 4.5) * 2.0 * np.pi / size
    if cls == 0:                      # horizontal stripes
        img = np.sin(freq * yy + phase)
    elif cls == 1:                    # vertical stripes
        img = np.sin(freq * xx + phase)
    elif cls == 2:                    # diagonal stripes, one orientation
        img = np.sin(freq * (yy + xx) / np.sqrt(2.0) + phase)
    elif cls == 3:                    # diagonal stripes, other orientation
        img = np.sin(freq * (yy - xx) / np.sqrt(2.0) + phase)
    elif cls == 4:                    # one large blob
        cy, cx = gen.uniform(size * 0.25, size * 0.75, size=2)
        img = _blob(yy, xx, cy, cx, gen.uniform(size * 0.12, size * 0.2))
    elif cls == 5:                    # three small blobs
        img = np.zeros_like(yy)
        for _ in range(3):
            cy, cx = gen.uniform(size * 0.1, size * 0.9, size=2)
            img += _blob(yy, xx, cy, cx, gen.uniform(size * 0.045, size * 0.08))
    elif cls == 6:                    # checkerboard
        cell = gen.uniform(3.0, 6.0)
        oy, ox = gen.uniform(0.0, cell, size=2)
        img = np.sign(np.sin(np.pi * (yy + oy) / cell) * np.sin(np.pi * (xx + ox) / cell))
    elif cls == 7:                    # concentric rings
        cy, cx = gen.uniform(size * 0.3, size * 0.7, size=2)
        rad = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        img = np.sin(2.0 * np.pi * rad / gen.uniform(5.0, 9.0) + phase)
    else:
        raise ContractError(f"class_count beyond {MOTIF_CLASSES} motifs (got class {cls})")
    img = img + gen.normal(0.0, 0.35, img.shape)
    # same first-order statistics for every class: standardize, then re-center
    img = (img - img.mean()) / max(img.std(), 1e-6)
    return np.clip(0.5 + 0.22 * img, 0.0, 1.0)


def generate(seed: int, n: int, image_size: int = 32, class_count: int = 8,
             split: str = "train") -> Dataset:
    """Balanced procedural dataset, bit-reproducible from the seed."""
    if class_count < 2 or class_count > MOTIF_CLASSES:
        raise ContractError(f"class_count must be in 2..{MOTIF_CLASSES}")
    if n < class_count:
        raise ContractError("need at least one image per class")
    gen = rng(seed, "dataset", split)
    labels = (np.arange(n) % class_count).astype(np.uint16)
    labels = labels[gen.permutation(n)]
    images = np.empty((n, 1, image_size, image_size), dtype=np.uint8)
    for i in range(n):
        img = _draw_motif(gen, int(labels[i]), image_size)
        images[i, 0] = np.round(img * 255.0).astype(np.uint8)
    return Dataset(images=images, labels=labels, class_count=class_count,
                   split=split, seed=seed)


def save_dataset(path: str, ds: Dataset, extra_header: dict | None = None) -> None:
    """Header JSON line + raw u8 image bytes + little-endian u16 labels."""
    n, c, h, w = ds.images.shape
    header = {"format_version": DATASET_VERSION, "n": n, "c": c, "h": h, "w": w,
              "class_count": ds.class_count, "seed": ds.seed}
    if extra_header:
        header.update(extra_header)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(ds.images, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())


def load_dataset(path: str, split: str | None = None) -> Dataset:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        body = fh.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid dataset header") from e
    if header.get("format_version") != DATASET_VERSION:
        raise FormatError(f"{path}: unknown format_version {header.get('format_version')!r}")
    n, c, h, w = header["n"], header["c"], header["h"], header["w"]
    nbytes = n * c * h * w
    if len(body) != nbytes + 2 * n:
        raise FormatError(f"{path}: payload size mismatch")
    images = np.frombuffer(body, dtype=np.uint8, count=nbytes).reshape(n, c, h, w).copy()
    labels = np.frombuffer(body, dtype="<u2", count=n, offset=nbytes).copy()
    if split is None:
        split = "train"
    return Dataset(images=images, labels=labels, class_count=header["class_count"],
                   split=split, seed=header["seed"])


# ---------------------------------------------------------------------------
# teacher pretraining


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1.5e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class ReconTask:
    """Masked-reconstruction objective: per-patch-normalized raw pixels."""

    mask_ratio: float = 0.6

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ContractError("mask_ratio must be in (0, 1)")


def _make_optimizer(params: vit.ViTParams, train: TrainConfig, steps_per_epoch: int
                    ) -> optim.AdamWState:
    total = max(train.epochs * steps_per_epoch, 1)
    return optim.AdamWState(
        lr_base=train.lr, lr_min=train.lr_min, total_steps=total,
        warmup_steps=int(round(train.warmup_frac * total)),
        weight_decay=train.weight_decay, no_decay=params.no_decay_names())


def epoch_batches(n: int, batch_size: int, gen: np.random.Generator):
    order = gen.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def pretrain_supervised_teacher(cfg: vit.ViTConfig, ds: Dataset,
                                train: TrainConfig) -> tuple[vit.ViTParams, list[dict]]:
    """Cross-entropy on mean-pooled features; returns frozen weights + log."""
    if cfg.head != "classify" or cfg.n_classes != ds.class_count:
        cfg = vit.ViTConfig(**{**cfg.to_dict(), "head": "classify",
                               "n_classes": ds.class_count})
    params = vit.init_params(cfg, train.seed)
    steps_per_epoch = max(1, -(-ds.n // train.batch_size))
    state = _make_optimizer(params, train, steps_per_epoch)
    log: list[dict] = []
    for epoch in range(train.epochs):
        gen = rng(train.seed, "sup-shuffle", epoch)
        losses, hits, seen = [], 0, 0
        for idx in epoch_batches(ds.n, train.batch_size, gen):
            images, labels = ds.images[idx], ds.labels[idx]
            res = vit.forward(params, images, run_head=True)
            loss = T.softmax_cross_entropy(res.head_out, labels)
            if not np.isfinite(loss.data):
                raise NumericError(f"supervised teacher diverged at epoch {epoch}")
            params.zero_grads()
            T.backward(loss)
            optim.adamw_step(params.tensors, params.grads(), state)
            losses.append(float(loss.data))
            hits += int((res.head_out.data.argmax(axis=1) == labels).sum())
            seen += len(idx)
        log.append({"epoch": epoch, "loss": float(np.mean(losses)), "acc": hits / seen})
    return params.freeze(), log


def normalized_patch_targets(images: np.ndarray, cfg: vit.ViTConfig) -> np.ndarray:
    """Per-patch zero-mean/unit-variance pixel targets, [B, N, patch_dim]."""
    patches = vit.patchify(images, cfg)
    mean = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mean) / np.sqrt(var + 1e-6)


def _mim_forward(params: vit.ViTParams, images: np.ndarray,
                 masked_idx: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
    """SimMIM-style forward: masked patch embeddings are swapped for the
    learned mask token (positions stay), the full sequence runs through the
    encoder, and the head predicts pixels; returns (loss, predictions)."""
    cfg = params.config
    b = images.shape[0]
    n = cfg.tokens
    patches = vit.patchify(images, cfg)
    proj = T.add_bias(T.matmul(T.Tensor(patches), params["patch_embed.w"]),
                      params["patch_embed.b"])
    visible = np.ones((b, n, 1))
    visible[np.arange(b)[:, None], masked_idx] = 0.0
    visible = np.broadcast_to(visible, (b, n, cfg.dim)).copy()
    token_field = T.add_bias(T.Tensor(np.zeros((b, n, cfg.dim))), params["mask_token"])
    mixed = T.add(T.mul(proj, T.Tensor(visible)),
                  T.mul(token_field, T.Tensor(1.0 - visible)))
    pos = T.gather_rows(params["pos_embed"], np.broadcast_to(np.arange(n), (b, n)))
    tokens = T.add(mixed, pos)
    feats, _ = vit.encode(params, tokens)
    pred = T.add_bias(T.matmul(feats, params["head.w"]), params["head.b"])
    pred_masked = T.gather_tokens(pred, masked_idx)
    targets = normalized_patch_targets(images, cfg)
    tgt_masked = targets[np.arange(b)[:, None], masked_idx]
    diff = T.add(pred_masked, T.scale(T.Tensor(tgt_masked), -1.0))
    loss = T.reduce_mean(T.mul(diff, diff))
    return loss, pred


def sample_mim_mask(gen: np.random.Generator, batch: int, tokens: int,
                    mask_ratio: float) -> np.ndarray:
    """Masked token ids per image, fixed count round(ratio * N), [B, M]."""
    count = min(max(int(round(mask_ratio * tokens)), 1), tokens - 1)
    return np.stack([np.sort(gen.permutation(tokens)[:count]) for _ in range(batch)])


def pretrain_mim_teacher(cfg: vit.ViTConfig, ds: Dataset, recon: ReconTask,
                         train: TrainConfig) -> tuple[vit.ViTParams, list[dict]]:
    """Masked-patch reconstruction; returns frozen weights + log."""
    if cfg.head != "reconstruct":
        cfg = vit.ViTConfig(**{**cfg.to_dict(), "head": "reconstruct", "n_classes": 0})
    params = vit.init_params(cfg, train.seed)
    steps_per_epoch = max(1, -(-ds.n // train.batch_size))
    state = _make_optimizer(params, train, steps_per_epoch)
    log: list[dict] = []
    for epoch in range(train.epochs):
        gen = rng(train.seed, "mim-shuffle", epoch)
        mask_gen = rng(train.seed, "mim-mask", epoch)
        losses = []
        for idx in epoch_batches(ds.n, train.batch_size, gen):
            images = ds.images[idx]
            masked_idx = sample_mim_mask(mask_gen, len(idx), cfg.tokens, recon.mask_ratio)
            loss, _ = _mim_forward(params, images, masked_idx)
            if not np.isfinite(loss.data):
                raise NumericError(f"mim teacher diverged at epoch {epoch}")
            params.zero_grads()
            T.backward(loss)
            optim.adamw_step(params.tensors, params.grads(), state)
            losses.append(float(loss.data))
        log.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return params.freeze(), log
