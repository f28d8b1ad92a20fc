"""Forward a small ViT and inspect per-layer traces (Q/K, relations, attention).

Run: python demos/02_vit_traces.py
"""

import numpy as np

from dualdistill import data, vit

cfg = vit.ViTConfig(image_size=32, patch_size=4, channels=1, depth=4, heads=4, dim=64)
params = vit.init_params(cfg, seed=1)
print(f"model: {cfg.depth} layers, {cfg.heads} heads, dim {cfg.dim}, "
      f"{cfg.tokens} tokens, {params.num_params()} parameters")

ds = data.generate(seed=0, n=8, image_size=32, class_count=8)
res = vit.forward(params, ds.images[:2], keep_trace=True)

print(f"features: {res.features.shape}")
for i, tr in enumerate(res.traces, start=1):
    a = tr.a.data
    print(f"layer {i}: q {tr.q.shape} r {tr.r.shape} "
          f"attn rows sum to {a.sum(-1).mean():.6f}")

# the stored relation r is q k^T / sqrt(head_dim), and a = softmax(r)
tr = res.traces[0]
recomputed = np.exp(tr.r.data - tr.r.data.max(-1, keepdims=True))
recomputed /= recomputed.sum(-1, keepdims=True)
print(f"max |softmax(r) - a| = {np.abs(recomputed - tr.a.data).max():.2e}")

# a masked forward processes only the kept tokens
kept = np.array([0, 3, 9, 17, 33, 60])
masked = vit.forward(params, ds.images[:2], mask_indices=np.tile(kept, (2, 1)),
                     keep_trace=True)
print(f"masked forward: features {masked.features.shape}, "
      f"relations {masked.traces[0].r.shape}")

# checkpoints round-trip bit-exactly
vit.save_checkpoint("/tmp/demo_vit.ckpt", params)
loaded, _ = vit.load_checkpoint("/tmp/demo_vit.ckpt")
same = all(np.array_equal(loaded[n].data, params[n].data) for n in params.names())
print(f"checkpoint round-trip exact: {same}")
