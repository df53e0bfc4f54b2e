"""Four attention paths on one set of inputs, with FLOP accounting.

Compares full softmax attention against the quantized variant (int8 QK
with mean-smoothed keys) and sparse-linear attention (exact softmax on
the top-k key/value blocks, kernel attention on the rest). Run:

    python demos/02_attention_variants.py
"""

import numpy as np

from turbobench.attention import (
    AttnInputs,
    SLAConfig,
    attention_flop_report,
    error_metrics,
    quantized_attention,
    reference_attention,
    sla_attention,
)

h, s, d = 4, 512, 64
rng = np.random.default_rng(9)

# block-coherent inputs: keys cluster per block and each query block
# aims at one cluster, the regime block-sparse selection exists for
blk = 64
nb = s // blk
centers = (3.0 * rng.standard_normal((h, nb, d))).astype(np.float32)
k = np.repeat(centers, blk, axis=1) + 0.3 * rng.standard_normal((h, s, d)).astype(np.float32)
target = np.repeat(rng.integers(0, nb, (h, nb)), blk, axis=1)
q = centers[np.arange(h)[:, None], target] + 0.3 * rng.standard_normal((h, s, d)).astype(np.float32)
v = rng.standard_normal((h, s, d)).astype(np.float32)
inputs = AttnInputs(q, k, v)

ref = reference_attention(inputs)

print("vs full softmax attention (cosine, rel_l2):")
out = quantized_attention(inputs)
print("  quantized QK:            %.6f  %.2e" % error_metrics(out, ref))

for ratio in (1.0, 0.25, 0.1):
    cfg = SLAConfig(topk_ratio=ratio, quantized_sparse_branch=False)
    out = sla_attention(inputs, cfg)
    cos, rel = error_metrics(out, ref)
    print(f"  sla top-k {ratio:>4}:          {cos:.6f}  {rel:.2e}")

# the composed form: quantized logits inside the sparse branch
cfg = SLAConfig(topk_ratio=0.1, quantized_sparse_branch=True)
out = sla_attention(inputs, cfg)
print("  sla 0.1 + quantized:     %.6f  %.2e" % error_metrics(out, ref))

# attention cost decomposition: at top-k 0.1 the sparse softmax does a
# tenth of the dense work ("90% attention sparsity")
rep = attention_flop_report(s, d, h, SLAConfig(topk_ratio=0.1))
print("\nflop report at top-k 0.1:")
for key, val in rep.to_dict().items():
    print(f"  {key}: {val:,}" if isinstance(val, int) else f"  {key}: {val}")
