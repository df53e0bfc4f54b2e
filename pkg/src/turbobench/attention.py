"""Softmax attention baselines and their accelerated variants.

Four attention paths live here:

* :func:`reference_attention` -- numerically stable full softmax
  attention in float32, the baseline every other path is judged
  against.
* :func:`quantized_attention` -- Q and mean-smoothed K quantized to
  signed 8-bit codes per token block, logits recovered through exact
  integer accumulation plus a rank-1 mean correction, softmax and the
  PV product kept in float32.
* :func:`linear_attention` -- positive-feature-map kernel attention,
  returned as unreduced numerator/denominator so it can share one
  normalization with a sparse branch.
* :func:`sla_attention` -- per query block, exact (optionally
  quantized) softmax over the top-k highest scoring key/value blocks,
  with the linear branch covering the complement, combined under a
  single normalization.

Block selection scores query/key blocks by mean pooling; ties break
toward the lower block index so selections are reproducible bit for
bit. FLOP accounting for all branches lives in
:func:`attention_flop_report`, with an instrumented counter
(:func:`instrumented_sparse_macs`) that tallies the multiply-
accumulates a brute-force sparse run actually performs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blockquant import _F32_EXACT_BLOCK


@dataclass
class AttnInputs:
    """Query/key/value arrays of shape [heads, seq, head_dim] plus logit scale."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    scale: float | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float32)
        self.k = np.asarray(self.k, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if not (self.q.shape == self.k.shape == self.v.shape) or self.q.ndim != 3:
            raise ValueError(
                f"q/k/v must share shape [heads, seq, head_dim], got "
                f"{self.q.shape}, {self.k.shape}, {self.v.shape}"
            )
        if self.q.shape[1] < 1 or self.q.shape[2] < 1:
            raise ValueError(f"seq and head_dim must be >= 1, got {self.q.shape}")
        if self.scale is None:
            self.scale = 1.0 / math.sqrt(self.q.shape[2])

    @property
    def heads(self) -> int:
        return self.q.shape[0]

    @property
    def seq(self) -> int:
        return self.q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.q.shape[2]


@dataclass
class QuantAttnConfig:
    token_block: int = 64   # rows per quantization block along the sequence axis
    smooth_k: bool = True

    def __post_init__(self):
        if self.token_block < 1:
            raise ValueError("token_block must be >= 1")


@dataclass
class SLAConfig:
    q_block: int = 64
    kv_block: int = 64
    topk_ratio: float = 0.1
    linear_mix: float = 1.0
    quantized_sparse_branch: bool = True

    def __post_init__(self):
        if not (0.0 < self.topk_ratio <= 1.0):
            raise ValueError(f"topk_ratio must be in (0, 1], got {self.topk_ratio}")
        if self.q_block < 1 or self.kv_block < 1:
            raise ValueError("block sizes must be >= 1")
        if self.linear_mix < 0:
            raise ValueError("linear_mix must be >= 0")


@dataclass
class BlockMask:
    """Selected kv-block indices per (head, query block), sorted ascending."""

    q_block: int
    kv_block: int
    num_kv_blocks: int
    indices: np.ndarray  # int64, [heads, num_q_blocks, count]

    @property
    def count(self) -> int:
        return self.indices.shape[2]

    def coverage(self) -> np.ndarray:
        """Boolean [heads, num_q_blocks, num_kv_blocks] coverage map."""
        h, nq, _ = self.indices.shape
        cov = np.zeros((h, nq, self.num_kv_blocks), dtype=bool)
        if self.count:
            np.put_along_axis(cov, self.indices, True, axis=-1)
        return cov

    def complement(self) -> "BlockMask":
        cov = self.coverage()
        m = self.num_kv_blocks - self.count
        # stable argsort puts uncovered (False) indices first, ascending
        idx = np.argsort(cov, axis=-1, kind="stable")[..., :m]
        return BlockMask(
            q_block=self.q_block,
            kv_block=self.kv_block,
            num_kv_blocks=self.num_kv_blocks,
            indices=idx.astype(np.int64),
        )


@dataclass
class FlopReport:
    """Analytic FLOP decomposition of one attention configuration."""

    dense_flops: int
    sparse_softmax_flops: int | None = None
    linear_branch_flops: int | None = None
    selection_overhead_flops: int | None = None
    dense_to_sparse_ratio: float | None = None

    def to_dict(self) -> dict:
        d = {"dense_flops": self.dense_flops}
        for key in ("sparse_softmax_flops", "linear_branch_flops",
                    "selection_overhead_flops", "dense_to_sparse_ratio"):
            val = getattr(self, key)
            if val is not None:
                d[key] = val
        return d


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    p = np.exp(logits - m)
    return p / p.sum(axis=-1, keepdims=True)


def reference_attention(inputs: AttnInputs, return_probs: bool = False):
    """Full softmax attention per head, float32, max-subtracted softmax.

    Normalization is applied after the PV product (identical math,
    fewer full-matrix passes). With ``return_probs`` the row-stochastic
    probability matrix is also returned (debug hook for invariant
    checks at desk scale).
    """
    logits = np.float32(inputs.scale) * np.matmul(inputs.q, inputs.k.transpose(0, 2, 1))
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    den = e.sum(axis=-1, keepdims=True)
    out = np.matmul(e, inputs.v) / den
    if return_probs:
        return out, e / den
    return out


def smooth_keys(k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Center keys over the sequence axis per (head, channel).

    Returns ``(k_centered, k_mean)`` with ``k_mean`` of shape
    [heads, head_dim]. In exact arithmetic
    ``Q @ K^T == Q @ k_centered^T + (Q @ k_mean^T broadcast per row)``.
    """
    k = np.asarray(k, dtype=np.float32)
    k_mean = k.mean(axis=1)
    return k - k_mean[:, None, :], k_mean


def _block_starts(seq: int, block: int) -> np.ndarray:
    return np.arange(0, seq, block)


def _block_extents(seq: int, block: int) -> np.ndarray:
    starts = _block_starts(seq, block)
    ends = np.minimum(starts + block, seq)
    return ends - starts


def _quantize_token_blocks(x: np.ndarray, block: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric absmax int8 codes per [token_block, head_dim] tile.

    Returns the codes as int8 and one float32 scale per (head, block).
    Zero tiles get scale 0 with all-zero codes.
    """
    h, s, d = x.shape
    starts = _block_starts(s, block)
    nb = len(starts)
    codes = np.empty((h, s, d), dtype=np.int8)
    scales = np.empty((h, nb), dtype=np.float32)
    for b, lo in enumerate(starts):
        hi = min(lo + block, s)
        tile = x[:, lo:hi, :]
        am = np.abs(tile).max(axis=(1, 2))
        sc = (am.astype(np.float64) / 127.0).astype(np.float32)
        scales[:, b] = sc
        safe = np.where(sc == 0.0, np.float32(1.0), sc)[:, None, None]
        codes[:, lo:hi, :] = np.clip(np.rint(tile / safe), -127, 127).astype(np.int8)
    return codes, scales


def _exact_int_matmul_batched(a: np.ndarray, b_t: np.ndarray) -> np.ndarray:
    """Batched code product with exact integer accumulation (see blockquant)."""
    if a.shape[-1] <= _F32_EXACT_BLOCK:
        return np.matmul(a.astype(np.float32), b_t.astype(np.float32))
    return np.matmul(a.astype(np.int64), b_t.astype(np.int64)).astype(np.float32)


def quantized_attention(inputs: AttnInputs, cfg: QuantAttnConfig | None = None) -> np.ndarray:
    """Softmax attention with int8-quantized QK logits.

    Keys are mean-smoothed first (when ``cfg.smooth_k``), Q and the
    centered K are quantized per token block, the code product is
    accumulated exactly, rescaled, and the rank-1 mean term is added
    back in float32 before the float32 softmax and PV product.
    """
    cfg = cfg or QuantAttnConfig()
    q, k, v = inputs.q, inputs.k, inputs.v
    if cfg.smooth_k:
        kc, k_mean = smooth_keys(k)
    else:
        kc, k_mean = k, np.zeros((inputs.heads, inputs.head_dim), dtype=np.float32)
    qq, sq = _quantize_token_blocks(q, cfg.token_block)
    kq, sk = _quantize_token_blocks(kc, cfg.token_block)
    prod = _exact_int_matmul_batched(qq, kq.transpose(0, 2, 1))
    ext = _block_extents(inputs.seq, cfg.token_block)
    sq_full = np.repeat(sq, ext, axis=1)
    sk_full = np.repeat(sk, ext, axis=1)
    approx = prod * sq_full[:, :, None] * sk_full[:, None, :]
    corr = np.matmul(q, k_mean[:, :, None])  # [h, s, 1], constant per row
    logits = np.float32(inputs.scale) * (approx + corr)
    return np.matmul(_softmax_rows(logits), v)


def pool_block_means(x: np.ndarray, block: int) -> np.ndarray:
    """Mean over consecutive token blocks; the final partial block is
    averaged over its actual extent."""
    if block < 1:
        raise ValueError("block must be >= 1")
    x = np.asarray(x, dtype=np.float32)
    h, s, d = x.shape
    starts = _block_starts(s, block)
    sums = np.add.reduceat(x, starts, axis=1)
    ext = _block_extents(s, block).astype(np.float32)
    return sums / ext[None, :, None]


def select_topk_blocks(qp: np.ndarray, kp: np.ndarray, cfg: SLAConfig) -> BlockMask:
    """Pick the highest-scoring kv blocks per (head, query block).

    Scores are ``qp @ kp^T`` per head; each query block keeps the
    ``ceil(topk_ratio * num_kv_blocks)`` best kv blocks. Ties break
    toward the lower kv-block index; indices come back sorted.
    """
    qp = np.asarray(qp, dtype=np.float32)
    kp = np.asarray(kp, dtype=np.float32)
    num_kv = kp.shape[1]
    count = math.ceil(cfg.topk_ratio * num_kv)
    scores = np.matmul(qp, kp.transpose(0, 2, 1))
    order = np.argsort(-scores, axis=-1, kind="stable")  # stable: low index wins ties
    sel = np.sort(order[..., :count], axis=-1)
    return BlockMask(q_block=cfg.q_block, kv_block=cfg.kv_block,
                     num_kv_blocks=num_kv, indices=sel.astype(np.int64))


def _feature_map(x: np.ndarray) -> np.ndarray:
    """Strictly positive map: x + 1 for x >= 0, exp(x) for x < 0."""
    return np.where(x >= 0.0, x + np.float32(1.0),
                    np.exp(np.minimum(x, np.float32(0.0)))).astype(np.float32)


def linear_attention(
    inputs: AttnInputs,
    mask_complement: BlockMask | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Kernel attention numerator and denominator, left unreduced.

    ``numerator = phi(Q) @ (phi(K)^T V)`` and
    ``denominator = phi(Q) @ (phi(K)^T 1)``, restricted per query block
    to the kv blocks named in ``mask_complement`` when given. An empty
    mask yields exact zeros.
    """
    q, k, v = inputs.q, inputs.k, inputs.v
    h, s, d = q.shape
    phi_q = _feature_map(q)
    phi_k = _feature_map(k)
    if mask_complement is None:
        kv = np.matmul(phi_k.transpose(0, 2, 1), v)       # [h, d, d]
        k1 = phi_k.sum(axis=1)                            # [h, d]
        num = np.matmul(phi_q, kv)
        den = np.matmul(phi_q, k1[:, :, None])[..., 0]
        return num, den

    kb, qb = mask_complement.kv_block, mask_complement.q_block
    kv_starts = _block_starts(s, kb)
    nkv = len(kv_starts)
    if nkv != mask_complement.num_kv_blocks:
        raise ValueError("mask block count does not match the sequence")
    kv_part = np.empty((h, nkv, d, d), dtype=np.float32)
    k1_part = np.empty((h, nkv, d), dtype=np.float32)
    for b, lo in enumerate(kv_starts):
        hi = min(lo + kb, s)
        kv_part[:, b] = np.matmul(phi_k[:, lo:hi].transpose(0, 2, 1), v[:, lo:hi])
        k1_part[:, b] = phi_k[:, lo:hi].sum(axis=1)
    cov = mask_complement.coverage().astype(np.float32)   # [h, nq, nkv]
    kv_sel = np.matmul(cov, kv_part.reshape(h, nkv, d * d)).reshape(h, -1, d, d)
    k1_sel = np.matmul(cov, k1_part)                      # [h, nq, d]
    num = np.empty((h, s, d), dtype=np.float32)
    den = np.empty((h, s), dtype=np.float32)
    for n, lo in enumerate(_block_starts(s, qb)):
        hi = min(lo + qb, s)
        num[:, lo:hi] = np.matmul(phi_q[:, lo:hi], kv_sel[:, n])
        den[:, lo:hi] = np.matmul(phi_q[:, lo:hi], k1_sel[:, n, :, None])[..., 0]
    return num, den


def _gather_positions(sel_blocks: np.ndarray, seq: int, block: int) -> np.ndarray:
    """Token indices covered by the selected kv blocks (true extents)."""
    parts = []
    for b in sel_blocks:
        lo = int(b) * block
        parts.append(np.arange(lo, min(lo + block, seq)))
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def _sparse_branch(
    inputs: AttnInputs,
    mask: BlockMask,
    cfg: SLAConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Softmax numerator/denominator over the selected kv blocks only.

    Returns ``(num, den, row_max)`` where ``num/den`` carry a stable
    ``exp(-row_max)`` factor; combining with other branches must apply
    the same factor. The quantized variant reproduces the
    quantized_attention logit construction on the selected blocks.
    """
    q, k, v = inputs.q, inputs.k, inputs.v
    h, s, d = q.shape
    scale = np.float32(inputs.scale)
    if cfg.quantized_sparse_branch:
        kc, k_mean = smooth_keys(k)
        qq, sq = _quantize_token_blocks(q, cfg.q_block)
        kq, sk = _quantize_token_blocks(kc, cfg.kv_block)
    num = np.empty((h, s, d), dtype=np.float32)
    den = np.empty((h, s), dtype=np.float32)
    row_max = np.empty((h, s), dtype=np.float32)
    q_starts = _block_starts(s, cfg.q_block)
    for hh in range(h):
        for n, lo in enumerate(q_starts):
            hi = min(lo + cfg.q_block, s)
            pos = _gather_positions(mask.indices[hh, n], s, cfg.kv_block)
            if cfg.quantized_sparse_branch:
                prod = _exact_int_matmul_batched(qq[hh, lo:hi], kq[hh, pos].T)
                sk_pos = np.repeat(sk[hh, mask.indices[hh, n]],
                                   np.minimum((mask.indices[hh, n] + 1) * cfg.kv_block, s)
                                   - mask.indices[hh, n] * cfg.kv_block)
                approx = prod * sq[hh, n] * sk_pos[None, :]
                corr = q[hh, lo:hi] @ k_mean[hh]
                logits = scale * (approx + corr[:, None])
            else:
                logits = scale * (q[hh, lo:hi] @ k[hh, pos].T)
            m = logits.max(axis=1)
            e = np.exp(logits - m[:, None])
            num[hh, lo:hi] = e @ v[hh, pos]
            den[hh, lo:hi] = e.sum(axis=1)
            row_max[hh, lo:hi] = m
    return num, den, row_max


def sla_attention(inputs: AttnInputs, cfg: SLAConfig | None = None) -> np.ndarray:
    """Top-k block-sparse softmax plus kernel attention on the complement.

    The two branches share one normalization:
    ``O = (num_sparse + mix * num_linear) / (den_sparse + mix * den_linear)``
    evaluated per row, with the linear terms brought into the sparse
    branch's stable scaling. With ``topk_ratio == 1`` the complement is
    empty and the result reduces to full softmax attention.
    """
    cfg = cfg or SLAConfig()
    s = inputs.seq
    if cfg.q_block > s or cfg.kv_block > s:
        raise ValueError(f"block sizes {cfg.q_block}/{cfg.kv_block} exceed seq {s}")
    qp = pool_block_means(inputs.q, cfg.q_block)
    kp = pool_block_means(inputs.k, cfg.kv_block)
    mask = select_topk_blocks(qp, kp, cfg)
    num_s, den_s, row_max = _sparse_branch(inputs, mask, cfg)
    comp = mask.complement()
    if comp.count == 0 or cfg.linear_mix == 0.0:
        return num_s / den_s[..., None]
    num_l, den_l = linear_attention(inputs, comp)
    # bring both branches onto one stable scale exp(-ref) with
    # ref = max(row_max, 0): never overflows, and whichever branch is
    # negligible underflows to zero exactly as it should
    ref = np.maximum(row_max, np.float32(0.0))
    sparse_scale = np.exp(row_max - ref)
    shrink = np.exp(-ref) * np.float32(cfg.linear_mix)
    num = num_s * sparse_scale[..., None] + shrink[..., None] * num_l
    den = den_s * sparse_scale + shrink * den_l
    return num / den[..., None]


def attention_flop_report(
    seq: int,
    head_dim: int,
    heads: int,
    cfg: SLAConfig | None = None,
) -> FlopReport:
    """Analytic FLOP terms for dense attention and, with a config, the
    sparse/linear/selection decomposition.

    The sparse term counts the kv positions actually covered by the
    selected blocks (capped at seq), so it equals
    ``topk_ratio * dense`` exactly whenever
    ``topk_ratio * num_kv_blocks`` is an integer and seq divides evenly
    into kv blocks.
    """
    if seq < 1 or head_dim < 1 or heads < 1:
        raise ValueError("dimensions must be positive")
    dense = 4 * heads * seq * seq * head_dim
    if cfg is None:
        return FlopReport(dense_flops=dense)
    nq = -(-seq // cfg.q_block)
    nkv = -(-seq // cfg.kv_block)
    count = math.ceil(cfg.topk_ratio * nkv)
    covered = min(count * cfg.kv_block, seq)
    sparse = 4 * heads * seq * covered * head_dim
    linear = 4 * heads * seq * head_dim * head_dim
    selection = 2 * heads * nq * nkv * head_dim
    return FlopReport(
        dense_flops=dense,
        sparse_softmax_flops=sparse,
        linear_branch_flops=linear,
        selection_overhead_flops=selection,
        dense_to_sparse_ratio=dense / sparse,
    )


def instrumented_sparse_macs(inputs: AttnInputs, cfg: SLAConfig) -> dict[str, int]:
    """Run the sparse softmax branch brute-force and tally its
    multiply-accumulates (QK and PV over the selected positions)."""
    qp = pool_block_means(inputs.q, cfg.q_block)
    kp = pool_block_means(inputs.k, cfg.kv_block)
    mask = select_topk_blocks(qp, kp, cfg)
    s, d = inputs.seq, inputs.head_dim
    qk = pv = 0
    for hh in range(inputs.heads):
        for n, lo in enumerate(_block_starts(s, cfg.q_block)):
            hi = min(lo + cfg.q_block, s)
            pos = _gather_positions(mask.indices[hh, n], s, cfg.kv_block)
            logits = inputs.q[hh, lo:hi] @ inputs.k[hh, pos].T
            qk += logits.shape[0] * logits.shape[1] * d
            e = np.exp(np.float32(inputs.scale) * logits
                       - (np.float32(inputs.scale) * logits).max(axis=1, keepdims=True))
            _ = e @ inputs.v[hh, pos]
            pv += e.shape[0] * e.shape[1] * d
    dense = 2 * inputs.heads * s * s * d
    return {"qk_macs": qk, "pv_macs": pv, "total_macs": qk + pv, "dense_macs": dense}


def error_metrics(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Cosine similarity and relative L2 error of ``a`` against ``b``."""
    a = np.asarray(a, dtype=np.float32).ravel().astype(np.float64)
    b = np.asarray(b, dtype=np.float32).ravel().astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    daa, dbb = float(np.dot(a, a)), float(np.dot(b, b))
    if daa == 0.0 or dbb == 0.0:
        raise ValueError("error metrics are undefined for zero-norm inputs")
    # sqrt(daa * dbb) rather than sqrt(daa) * sqrt(dbb): identical and
    # negated inputs then land on exactly +/-1
    cosine = float(np.dot(a, b) / math.sqrt(daa * dbb))
    rel_l2 = float(np.linalg.norm(a - b) / math.sqrt(dbb))
    return cosine, rel_l2
