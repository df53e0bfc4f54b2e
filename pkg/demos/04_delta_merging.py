"""Weight-delta extraction and merging, then quantize for deployment.

Two training branches (sparsity adaptation, step distillation) each
produce a delta against the shared base; summing both deltas onto the
base yields the single deployable model, which is then block-quantized.
Run:

    python demos/04_delta_merging.py
"""

import tempfile
from pathlib import Path

import numpy as np

from turbobench.blockquant import compression_ratio, quantize_blockwise
from turbobench.merge import extract_delta, merge_deltas
from turbobench.sampler import make_random_weights, model_to_tensors
from turbobench.tensor_store import write_manifest

work = Path(tempfile.mkdtemp(prefix="merge_demo_"))
rng = np.random.default_rng(0)

# a shared base checkpoint plus two independently finetuned variants
base_t = model_to_tensors(make_random_weights(64, num_layers=1, seed=10))
sparsity_t = {k: v + 0.01 * rng.standard_normal(v.shape).astype(np.float32)
              for k, v in base_t.items()}
distill_t = {k: v + 0.01 * rng.standard_normal(v.shape).astype(np.float32)
             for k, v in base_t.items()}

base = write_manifest(work / "base", base_t, name="base")
sparsity = write_manifest(work / "sparsity", sparsity_t, name="sparsity")
distill = write_manifest(work / "distill", distill_t, name="distill")

d_sparsity = extract_delta(sparsity, base)
d_distill = extract_delta(distill, base)
print("delta norms:",
      {k: round(float(np.linalg.norm(v)), 4) for k, v in list(d_sparsity.entries.items())[:2]})

# merge both updates onto the base in one pass
merged = merge_deltas(base, [d_sparsity, d_distill], work / "merged")
name = "layers.0.qkv"
want = base_t[name] + d_sparsity.entries[name] + d_distill.entries[name]
print("merged == base + d1 + d2 (within float rounding):",
      bool(np.allclose(merged.load(name), want, atol=1e-6)))

# quantize-then-deploy: the merged float32 weights become int8 + scales
bq = quantize_blockwise(merged.load(name))
print(f"deployed {name}: codes {bq.q.shape} int8, "
      f"{bq.num_blocks} block scales, "
      f"{compression_ratio(bq, 2.0):.4f} of the fp16 footprint")
print("artifacts in", work)
