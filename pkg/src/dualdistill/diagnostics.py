"""Attention diagnostics: average head distance and normalized mutual information.

Average head distance is the attention-weighted mean Euclidean distance
between each query token's grid position and the positions of the keys it
attends to, averaged over queries — small for local attention, large for
global attention. NMI treats a head's row-normalized attention matrix as a
conditional distribution pi(k|q) under uniform p(q) = 1/N and reports
I(q, k) / sqrt(H(q) H(k)): 0 for uniform (query-independent) attention,
1 for a permutation (every query locked to its own key).

Both are computed per head, per layer; reports retain per-head values and
layer means, as plot-ready CSV/JSON rather than rendered figures.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import vit
from .errors import ContractError, ShapeError


def token_positions(grid: int) -> np.ndarray:
    """Grid positions of tokens in patch units, [N, 2] rows of (row, col)."""
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    return np.stack([rows, cols], axis=1).astype(np.float64)


def avg_head_distance(attn: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Attention-weighted mean query-key distance, in patch units.

    ``attn`` is [.., N, N] with rows summing to 1 (any leading head/batch
    axes); returns one value per leading slice.
    """
    attn = np.asarray(attn, dtype=np.float64)
    n = positions.shape[0]
    if attn.shape[-1] != n or attn.shape[-2] != n:
        raise ShapeError(f"attention {attn.shape} does not match {n} grid positions")
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    return (attn * dist).sum(axis=(-1, -2)) / n


def nmi(attn: np.ndarray) -> np.ndarray:
    """Normalized mutual information of each [N, N] attention matrix.

    Conventions: p(q) uniform so H(q) = log N exactly; 0 log 0 = 0; if the
    key marginal has zero entropy (all mass on one key) the mutual
    information is itself 0, and the value is defined as 0.
    """
    attn = np.asarray(attn, dtype=np.float64)
    n = attn.shape[-1]
    if attn.shape[-2] != n:
        raise ShapeError(f"nmi needs square attention matrices, got {attn.shape}")
    rowsums = attn.sum(axis=-1)
    if np.abs(rowsums - 1.0).max() > 1e-6:
        raise ContractError("attention rows must sum to 1 within 1e-6")
    joint = attn / n                               # p(q, k) = pi(k|q) p(q)
    pk = joint.sum(axis=-2)                        # key marginal
    hq = np.log(n)
    plogp = np.where(pk > 0, pk * np.log(np.maximum(pk, 1e-300)), 0.0)
    hk = -plogp.sum(axis=-1)
    outer = pk[..., None, :] / n                   # p(q) p(k); > 0 wherever joint > 0
    ratio = np.where(joint > 0, joint / np.maximum(outer, 1e-300), 1.0)
    mi = np.where(joint > 0, joint * np.log(ratio), 0.0).sum(axis=(-1, -2))
    denom = np.sqrt(hq * hk)
    return np.asarray(np.where(denom > 0, mi / np.where(denom > 0, denom, 1.0), 0.0))


@dataclass
class LayerStats:
    layer: int                   # 1-based; decoder layers continue after L
    dist_patch: np.ndarray       # [H], probe-averaged
    dist_px: np.ndarray          # [H]
    nmi: np.ndarray              # [H]
    decoder: bool = False

    @property
    def mean_dist_patch(self) -> float:
        return float(self.dist_patch.mean())

    @property
    def mean_dist_px(self) -> float:
        return float(self.dist_px.mean())

    @property
    def mean_nmi(self) -> float:
        return float(self.nmi.mean())


@dataclass
class AttentionStats:
    """Per-layer, per-head diagnostics averaged over a probe set."""

    layers: list[LayerStats]
    grid: int
    patch_size: int
    probes: int

    def layer(self, idx: int) -> LayerStats:
        for ls in self.layers:
            if ls.layer == idx:
                return ls
        raise KeyError(idx)

    def per_layer_means(self) -> list[dict]:
        return [{"layer": ls.layer, "decoder": ls.decoder,
                 "avg_dist_patch": ls.mean_dist_patch,
                 "avg_dist_px": ls.mean_dist_px,
                 "nmi": ls.mean_nmi} for ls in self.layers]


def model_report(params: vit.ViTParams, probes: np.ndarray,
                 include_decoder: bool = False) -> AttentionStats:
    """Diagnostics for every layer, averaged over probe images.

    ``probes`` is [P, C, H, W]; per-head values are means over probes of the
    per-image diagnostics, so probe order does not matter.
    """
    probes = np.asarray(probes)
    if probes.ndim == 3:
        probes = probes[None]
    if probes.shape[0] < 1:
        raise ContractError("probe set must be non-empty")
    cfg = params.config
    res = vit.forward(params, probes, keep_trace=True,
                      run_decoder=include_decoder and cfg.decoder != "none")
    positions = token_positions(cfg.grid)
    traces = list(res.traces)
    if include_decoder:
        traces += list(res.decoder_traces)
    layers = []
    for i, tr in enumerate(traces):
        a = tr.a.data                            # [P, H, N, N]
        dist = avg_head_distance(a, positions).mean(axis=0)
        nm = nmi(a).mean(axis=0)
        layers.append(LayerStats(layer=i + 1, dist_patch=dist,
                                 dist_px=dist * cfg.patch_size, nmi=nm,
                                 decoder=tr.decoder))
    return AttentionStats(layers=layers, grid=cfg.grid,
                          patch_size=cfg.patch_size, probes=probes.shape[0])


def attention_query_map(params: vit.ViTParams, image: np.ndarray,
                        layer: int, query: int) -> np.ndarray:
    """Mean-over-heads attention row for one query token, [N'] summing to 1."""
    res = vit.forward(params, np.asarray(image)[None], keep_trace=True)
    if not 1 <= layer <= len(res.traces):
        raise IndexError(f"layer {layer} outside 1..{len(res.traces)}")
    a = res.traces[layer - 1].a.data[0]          # [H, N, N]
    if not 0 <= query < a.shape[-2]:
        raise IndexError(f"query {query} outside 0..{a.shape[-2] - 1}")
    return a[:, query, :].mean(axis=0)


def write_report_csv(stats: AttentionStats, path: str) -> None:
    """Per-head rows: (layer, head, avg_dist_patch, avg_dist_px, nmi)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "avg_dist_patch", "avg_dist_px", "nmi"])
        for ls in stats.layers:
            for h in range(ls.dist_patch.shape[0]):
                w.writerow([ls.layer, h, f"{ls.dist_patch[h]:.12g}",
                            f"{ls.dist_px[h]:.12g}", f"{ls.nmi[h]:.12g}"])


def write_report_json(stats: AttentionStats, path: str, config_digest: str,
                      probe_seed: int, model_config: dict | None = None) -> None:
    doc = {
        "config_digest": config_digest,
        "probe_seed": probe_seed,
        "grid": stats.grid,
        "patch_size": stats.patch_size,
        "probes": stats.probes,
        "per_layer_means": stats.per_layer_means(),
        "per_head": [{
            "layer": ls.layer, "decoder": ls.decoder,
            "avg_dist_patch": ls.dist_patch.tolist(),
            "avg_dist_px": ls.dist_px.tolist(),
            "nmi": ls.nmi.tolist(),
        } for ls in stats.layers],
    }
    if model_config is not None:
        doc["model_config"] = model_config
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
