"""Block-wise INT8 quantization and the W8A8 matrix multiply.

A float32 matrix is cut into 128x128 tiles; each tile stores signed
8-bit codes plus one float32 scale (absmax/127). The W8A8 product sums
code products exactly per k-segment, then rescales. Run:

    python demos/01_blockwise_int8_quantization.py
"""

import numpy as np

from turbobench.blockquant import (
    compression_ratio,
    dequantize_blockwise,
    quantize_blockwise,
    quantized_linear_forward,
    w8a8_matmul,
)

rng = np.random.default_rng(0)

# quantize a 256x256 Gaussian matrix: 2x2 grid of 128-blocks
m = rng.standard_normal((256, 256), dtype=np.float32)
bq = quantize_blockwise(m)
print("codes dtype:", bq.q.dtype, "| scale grid:", bq.scales.shape)
print("scales:", np.array2string(bq.scales, precision=5))

# reconstruction error is bounded by half the block scale
err = np.abs(m - dequantize_blockwise(bq))
print(f"max |x - dequant(quant(x))| = {err.max():.5f}"
      f"  (worst block scale/2 = {bq.scales.max() / 2:.5f})")

# requantizing the reconstructed grid is a fixed point, bit for bit
again = quantize_blockwise(dequantize_blockwise(bq))
print("requantize idempotent:", np.array_equal(again.q, bq.q),
      np.array_equal(again.scales, bq.scales))

# the stored size: 1 byte/element + 4 bytes/block scale,
# about half of a 2-byte-per-element half-precision checkpoint
print(f"compression vs fp16 baseline: {compression_ratio(bq, 2.0):.5f}")
print(f"compression vs fp32 baseline: {compression_ratio(bq, 4.0):.5f}")

# W8A8 product: integer-exact segment sums, then per-block rescale
a = quantize_blockwise(rng.standard_normal((256, 256), dtype=np.float32))
b = quantize_blockwise(rng.standard_normal((256, 256), dtype=np.float32))
y = w8a8_matmul(a, b)
oracle = dequantize_blockwise(a) @ dequantize_blockwise(b)
print(f"w8a8 vs float GEMM of dequantized operands: max err {np.abs(y - oracle).max():.2e}")

# a linear layer quantizes its activations on the fly
x = rng.standard_normal((64, 256), dtype=np.float32)
w = rng.standard_normal((256, 128), dtype=np.float32)
y_quant = quantized_linear_forward(x, quantize_blockwise(w))
y_dense = x @ w
rel = np.linalg.norm(y_quant - y_dense) / np.linalg.norm(y_dense)
print(f"quantized linear forward, relative error vs dense: {rel:.4f}")
