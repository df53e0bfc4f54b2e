"""Block-wise symmetric INT8 quantization and the W8A8 matrix multiply.

A matrix is quantized one 128x128 block at a time (edge blocks use their
actual extent): each block stores signed 8-bit codes in [-127, 127] plus
one float32 scale ``absmax/127``. An all-zero block gets scale 0 and
codes 0, so it round-trips exactly.

The W8A8 product accumulates code products over each k-block segment in
exact integer arithmetic, rescales the segment by the two block scales,
and sums segments in float32 in ascending k-block order. Segment sums
are bounded by ``block * 127**2``, so for block <= 1040 they stay below
2**24 and a float32 GEMM over the integer codes is bit-exact integer
accumulation; larger blocks fall back to a 64-bit integer path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_store import ModelManifest, read_tensor

# largest block edge for which every partial sum of int8 products fits
# the 24-bit float32 integer window: 1040 * 127**2 <= 2**24 - 1
_F32_EXACT_BLOCK = 1040


@dataclass
class BlockQuantConfig:
    """Quantization granularity: one scale per ``block`` x ``block`` tile."""

    block: int = 128

    def __post_init__(self):
        if self.block < 1:
            raise ValueError(f"block must be >= 1, got {self.block}")


@dataclass
class BlockQuantized:
    """Signed 8-bit codes plus one float32 scale per block.

    ``scales`` has shape ``(ceil(rows/block), ceil(cols/block))``. A
    scale is 0 exactly when every source element of its block was 0.
    """

    rows: int
    cols: int
    block: int
    q: np.ndarray       # int8, (rows, cols)
    scales: np.ndarray  # float32, (nblocks_r, nblocks_c)

    @property
    def num_blocks(self) -> int:
        return int(self.scales.size)

    def codes_f32(self) -> np.ndarray:
        """Codes as float32 (cached); exact, since codes are in [-127, 127]."""
        cached = getattr(self, "_codes_f32", None)
        if cached is None:
            cached = self.q.astype(np.float32)
            object.__setattr__(self, "_codes_f32", cached)
        return cached


def _block_extents(n: int, block: int) -> list[int]:
    nb = -(-n // block)
    return [min(block, n - i * block) for i in range(nb)]


def _expand_scales(scales: np.ndarray, block: int, rows: int, cols: int) -> np.ndarray:
    """Broadcast per-block scales to a full (rows, cols) float32 map."""
    r = np.repeat(scales, _block_extents(rows, block), axis=0)
    return np.repeat(r, _block_extents(cols, block), axis=1)


def _block_absmax(m: np.ndarray, block: int) -> np.ndarray:
    rows, cols = m.shape
    nr, nc = -(-rows // block), -(-cols // block)
    if rows % block == 0 and cols % block == 0:
        return np.abs(m.reshape(nr, block, nc, block)).max(axis=(1, 3))
    out = np.empty((nr, nc), dtype=np.float32)
    for i in range(nr):
        for j in range(nc):
            tile = m[i * block:(i + 1) * block, j * block:(j + 1) * block]
            out[i, j] = np.abs(tile).max()
    return out


def quantize_blockwise(m: np.ndarray, cfg: BlockQuantConfig | None = None) -> BlockQuantized:
    """Quantize a float32 matrix block by block with symmetric absmax scales.

    Codes are round-to-nearest-even of ``x / scale`` clamped to
    [-127, 127]. The scale division runs through float64 so that
    requantizing a dequantized grid reproduces codes and scales
    bit-exactly.
    """
    cfg = cfg or BlockQuantConfig()
    m = np.asarray(m, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("input contains non-finite values")
    absmax = _block_absmax(m, cfg.block)
    scales = (absmax.astype(np.float64) / 127.0).astype(np.float32)
    smap = _expand_scales(scales, cfg.block, *m.shape)
    safe = np.where(smap == 0.0, np.float32(1.0), smap)
    q = np.clip(np.rint(m / safe), -127, 127).astype(np.int8)
    return BlockQuantized(rows=m.shape[0], cols=m.shape[1], block=cfg.block, q=q, scales=scales)


def dequantize_blockwise(bq: BlockQuantized) -> np.ndarray:
    """Reconstruct the float32 matrix ``code * scale of containing block``."""
    smap = _expand_scales(bq.scales, bq.block, bq.rows, bq.cols)
    return bq.q.astype(np.float32) * smap


def _exact_int_matmul(a8: np.ndarray, b8: np.ndarray) -> np.ndarray:
    """Product of two int8-code matrices with exact integer accumulation.

    Returns float32 holding exact integers. Uses BLAS on float32 codes
    when the inner dimension keeps all partial sums below 2**24,
    otherwise a 64-bit integer matmul.
    """
    inner = a8.shape[1]
    if inner <= _F32_EXACT_BLOCK:
        return a8.astype(np.float32) @ b8.astype(np.float32)
    return (a8.astype(np.int64) @ b8.astype(np.int64)).astype(np.float32)


def w8a8_matmul(a: BlockQuantized, b: BlockQuantized) -> np.ndarray:
    """Multiply two block-quantized matrices into a float32 result.

    Per k-block segment the int8 code products are summed exactly, the
    segment sum is scaled by ``scaleA_block * scaleB_block``, and the
    scaled segments are accumulated in float32 in ascending k order.
    """
    if a.cols != b.rows:
        raise ValueError(f"inner dims differ: {a.cols} vs {b.rows}")
    if a.block != b.block:
        raise ValueError(f"block edges differ: {a.block} vs {b.block}")
    block = a.block
    fast = block <= _F32_EXACT_BLOCK
    aq = a.codes_f32() if fast else a.q
    bq = b.codes_f32() if fast else b.q
    row_ext = _block_extents(a.rows, block)
    col_ext = _block_extents(b.cols, block)
    out = np.zeros((a.rows, b.cols), dtype=np.float32)
    for bk in range(a.scales.shape[1]):
        lo, hi = bk * block, min((bk + 1) * block, a.cols)
        if fast:
            seg = aq[:, lo:hi] @ bq[lo:hi, :]
        else:
            seg = _exact_int_matmul(aq[:, lo:hi], bq[lo:hi, :])
        row_scale = np.repeat(a.scales[:, bk], row_ext)
        col_scale = np.repeat(b.scales[bk, :], col_ext)
        np.multiply(seg, row_scale[:, None], out=seg)
        np.multiply(seg, col_scale[None, :], out=seg)
        out += seg
    return out


def quantized_linear_forward(
    x: np.ndarray,
    w: BlockQuantized,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """Linear layer with on-the-fly activation quantization.

    Activations are quantized with the same block granularity as the
    weights, multiplied via :func:`w8a8_matmul`, and the bias (if any)
    is broadcast-added in float32.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != w.rows:
        raise ValueError(f"activation shape {x.shape} does not match weight rows {w.rows}")
    qx = quantize_blockwise(x, BlockQuantConfig(block=w.block))
    y = w8a8_matmul(qx, w)
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float32)
    return y


def compression_ratio(bq: BlockQuantized, baseline_bytes_per_element: float) -> float:
    """Stored bytes (codes + scales) over baseline bytes for the same matrix."""
    if baseline_bytes_per_element <= 0:
        raise ValueError("baseline_bytes_per_element must be positive")
    n = bq.rows * bq.cols
    return (1 * n + 4 * bq.num_blocks) / (baseline_bytes_per_element * n)


def pack_blockquantized(bq: BlockQuantized, name: str) -> dict[str, np.ndarray]:
    """Tensor entries ``<name>.q`` / ``<name>.scales`` for a manifest."""
    return {f"{name}.q": bq.q, f"{name}.scales": bq.scales}


def unpack_blockquantized(manifest: ModelManifest, name: str, block: int) -> BlockQuantized:
    """Rebuild a BlockQuantized from its two manifest tensor entries."""
    q = read_tensor(manifest.tensors[f"{name}.q"])
    scales = read_tensor(manifest.tensors[f"{name}.scales"])
    return BlockQuantized(rows=q.shape[0], cols=q.shape[1], block=block, q=q, scales=scales)
