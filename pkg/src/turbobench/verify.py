"""Executable invariant suite covering every module's contracts.

Each check runs a self-contained experiment against an independent
bound and reports the measured value next to it. The registry is the
documented inventory; ``run_verify_suite`` filters it by scope and
returns per-check results plus an overall verdict.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as A
from . import blockquant as Q
from . import merge as M
from . import sampler as S

# documented number of checks per scope; scope "all" runs the union
INVENTORY = {"quant": 4, "attention": 7, "sampler": 5, "merge": 4}


@dataclass
class CheckResult:
    scope: str
    name: str
    passed: bool
    measured: str
    bound: str


@dataclass
class VerifySummary:
    results: list[CheckResult]

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def num_passed(self) -> int:
        return sum(r.passed for r in self.results)

    @property
    def num_failed(self) -> int:
        return len(self.results) - self.num_passed


def _ulp(x: np.ndarray) -> np.ndarray:
    return np.spacing(np.abs(x).astype(np.float32))


# ---------------------------------------------------------------- quant

def _check_quant_roundtrip():
    rng = np.random.default_rng(7)
    m = rng.standard_normal((256, 256), dtype=np.float32)
    bq = Q.quantize_blockwise(m)
    err = np.abs(m - Q.dequantize_blockwise(bq))
    bound = Q._expand_scales(bq.scales, bq.block, 256, 256) / 2 + _ulp(m)
    excess = float((err - bound).max())
    return excess <= 0.0, f"max(err - bound) = {excess:.3e}", "<= 0"


def _check_quant_idempotent():
    rng = np.random.default_rng(21)
    m = rng.standard_normal((200, 300), dtype=np.float32) * 3.0
    first = Q.quantize_blockwise(m)
    again = Q.quantize_blockwise(Q.dequantize_blockwise(first))
    same = np.array_equal(first.q, again.q) and np.array_equal(first.scales, again.scales)
    return same, f"codes+scales identical = {same}", "bit-exact"


def _check_quant_segment_bound():
    worst = 128 * 127 * 127
    rng = np.random.default_rng(3)
    a8 = rng.integers(-127, 128, (64, 128)).astype(np.int8)
    b8 = rng.integers(-127, 128, (128, 64)).astype(np.int8)
    f32 = Q._exact_int_matmul(a8, b8)
    i64 = (a8.astype(np.int64) @ b8.astype(np.int64)).astype(np.float32)
    exact = np.array_equal(f32, i64)
    return (worst < 2**31) and exact, \
        f"worst |segment sum| = {worst}, f32 path exact = {exact}", "< 2^31 and bit-exact"


def _check_quant_scaling_invariance():
    # power-of-two scalings commute exactly with float rounding
    rng = np.random.default_rng(5)
    m = rng.standard_normal((130, 120), dtype=np.float32)
    base = Q.quantize_blockwise(m)
    ok = True
    for c in (2.0, 0.25, 8.0):
        scaled = Q.quantize_blockwise(np.float32(c) * m)
        ok &= np.array_equal(scaled.q, base.q)
        ok &= np.array_equal(scaled.scales, np.float32(c) * base.scales)
    return ok, f"q unchanged and scales scaled = {ok}", "bit-exact for c in {2, 1/4, 8}"


# ------------------------------------------------------------ attention

def _gaussian_inputs(seed, h=2, s=96, d=16):
    rng = np.random.default_rng(seed)
    return A.AttnInputs(*(rng.standard_normal((h, s, d), dtype=np.float32) for _ in range(3)))


def _check_attn_softmax_rows():
    _, probs = A.reference_attention(_gaussian_inputs(11), return_probs=True)
    dev = float(np.abs(probs.sum(-1) - 1.0).max())
    return dev <= 1e-6, f"max |rowsum - 1| = {dev:.2e}", "<= 1e-6"


def _check_attn_topk1_exact():
    worst = 0.0
    for seed, s, mix in ((1, 96, 1.0), (2, 100, 0.0), (3, 64, 7.5)):
        inputs = _gaussian_inputs(seed, s=s)
        cfg = A.SLAConfig(q_block=32, kv_block=32, topk_ratio=1.0,
                          linear_mix=mix, quantized_sparse_branch=False)
        got = A.sla_attention(inputs, cfg)
        ref = A.reference_attention(inputs)
        worst = max(worst, A.error_metrics(got, ref)[1])
    return worst <= 1e-5, f"max rel_l2 = {worst:.2e}", "<= 1e-5"


def _check_attn_topk_scale_invariance():
    rng = np.random.default_rng(13)
    qp = rng.standard_normal((2, 8, 16), dtype=np.float32)
    kp = rng.standard_normal((2, 10, 16), dtype=np.float32)
    cfg = A.SLAConfig(q_block=8, kv_block=8, topk_ratio=0.3)
    base = A.select_topk_blocks(qp, kp, cfg).indices
    ok = True
    for cq, ck in ((4.0, 1.0), (1.0, 0.5), (2.0, 8.0)):
        got = A.select_topk_blocks(np.float32(cq) * qp, np.float32(ck) * kp, cfg).indices
        ok &= np.array_equal(base, got)
    return ok, f"selection identical = {ok}", "bit-exact under power-of-two scaling"


def _check_attn_quantized_seq1():
    rng = np.random.default_rng(17)
    inputs = A.AttnInputs(*(rng.standard_normal((3, 1, 8), dtype=np.float32) for _ in range(3)))
    out = A.quantized_attention(inputs)
    same = np.array_equal(out, inputs.v)
    return same, f"output == V = {same}", "bit-exact at seq 1"


def _check_attn_linear_den_positive():
    inputs = _gaussian_inputs(19, s=128)
    cfg = A.SLAConfig(q_block=32, kv_block=32, topk_ratio=0.25)
    qp = A.pool_block_means(inputs.q, 32)
    kp = A.pool_block_means(inputs.k, 32)
    comp = A.select_topk_blocks(qp, kp, cfg).complement()
    _, den = A.linear_attention(inputs, comp)
    dmin = float(den.min())
    return dmin > 0.0, f"min denominator = {dmin:.3e}", "> 0"


def _check_attn_flop_sparse_le_dense():
    ok = True
    for ratio in (0.1, 0.25, 0.5, 1.0):
        rep = A.attention_flop_report(640, 64, 2, A.SLAConfig(topk_ratio=ratio))
        ok &= rep.sparse_softmax_flops <= rep.dense_flops
        if ratio == 1.0:
            ok &= rep.sparse_softmax_flops == rep.dense_flops
    return ok, f"sparse <= dense with equality at ratio 1 = {ok}", "holds"


def _check_attn_instrumented_matches_analytic():
    inputs = _gaussian_inputs(23, h=2, s=640, d=32)
    cfg = A.SLAConfig(q_block=64, kv_block=64, topk_ratio=0.1)
    macs = A.instrumented_sparse_macs(inputs, cfg)
    rep = A.attention_flop_report(640, 32, 2, cfg)
    measured = 2 * macs["total_macs"]
    return measured == rep.sparse_softmax_flops, \
        f"measured {measured} vs analytic {rep.sparse_softmax_flops}", "exactly equal"


# -------------------------------------------------------------- sampler

def _check_sampler_call_count():
    ok = True
    for n in (1, 3, 4, 100):
        calls = 0

        def model(x, sigma):
            nonlocal calls
            calls += 1
            return x * np.float32(0.5)

        S.consistency_sample(model, S.make_schedule(n), (4, 4), seed=1)
        ok &= calls == n
    return ok, f"call counts match for N in (1,3,4,100) = {ok}", "exactly N"


def _check_sampler_determinism():
    model = lambda x, s: np.tanh(x)
    sched = S.make_schedule(4)
    a = S.consistency_sample(model, sched, (8, 8), seed=42)
    b = S.consistency_sample(model, sched, (8, 8), seed=42)
    same = np.array_equal(a, b)
    return same, f"two runs bit-identical = {same}", "bit-exact"


def _check_sampler_schedule_shape():
    ok = True
    for n, smax, smin in ((1, 80.0, 0.5), (3, 80.0, 0.5), (100, 10.0, 0.01)):
        sched = S.make_schedule(n, smax, smin)
        ok &= sched.sigmas.size == n + 1
        ok &= bool(np.all(np.diff(sched.sigmas) < 0)) and sched.sigmas[-1] == 0.0
    return ok, f"length/monotone/terminal-zero = {ok}", "holds"


def _check_sampler_zero_weight_identity():
    rng = np.random.default_rng(31)
    d = 32
    zeros = S.ToyBlockWeights(
        rms_gain=np.zeros(d, np.float32), ln_gain=np.zeros(d, np.float32),
        ln_offset=np.zeros(d, np.float32), qkv=np.zeros((d, 3 * d), np.float32),
        out_proj=np.zeros((d, d), np.float32), mlp_in=np.zeros((d, 4 * d), np.float32),
        mlp_out=np.zeros((4 * d, d), np.float32), sigma_emb=np.zeros(d, np.float32))
    x = rng.standard_normal((16, d), dtype=np.float32)
    out = S.toy_block_forward(x, 3.0, zeros, heads=4)
    same = np.array_equal(out, x)
    return same, f"zero-weight block is identity = {same}", "bit-exact"


def _check_sampler_switch_count():
    sched = S.make_schedule(3, 80.0, 0.5)
    hi = lambda x, s: np.full_like(x, 2.0)
    lo = lambda x, s: np.full_like(x, -1.0)
    mid = float(np.sqrt(sched.sigmas[0] * sched.sigmas[1]))
    _, c_mid = S.two_expert_sample(S.TwoExpertConfig(mid, hi, lo), sched, (4,), 0)
    _, c_above = S.two_expert_sample(S.TwoExpertConfig(1000.0, hi, lo), sched, (4,), 0)
    _, c_below = S.two_expert_sample(S.TwoExpertConfig(0.01, hi, lo), sched, (4,), 0)
    ok = c_mid == 1 and c_above == 0 and c_below == 0
    return ok, f"switches mid/above/below = {c_mid}/{c_above}/{c_below}", "1/0/0"


# ---------------------------------------------------------------- merge

def _random_manifest(tmp, seed, name="m"):
    from .tensor_store import write_manifest
    rng = np.random.default_rng(seed)
    tensors = {
        "w.a": rng.standard_normal((12, 8), dtype=np.float32),
        "w.b": rng.standard_normal((5,), dtype=np.float32),
    }
    return write_manifest(tmp / name, tensors, name=name), tensors


def _with_tmpdir(fn):
    import tempfile
    from pathlib import Path
    with tempfile.TemporaryDirectory() as td:
        return fn(Path(td))


def _check_merge_roundtrip():
    # one subtraction plus one addition: error <= 1 ulp of the larger
    # of the reconstructed value and the delta magnitude
    def run(tmp):
        base, _ = _random_manifest(tmp, 1, "base")
        tuned, tuned_t = _random_manifest(tmp, 2, "tuned")
        delta = M.extract_delta(tuned, base)
        merged = M.merge_deltas(base, [delta], tmp / "merged")
        worst = 0.0
        for name, want in tuned_t.items():
            got = merged.load(name)
            tol = _ulp(np.maximum(np.abs(want), np.abs(delta.entries[name])))
            worst = max(worst, float((np.abs(got - want) - tol).max()))
        return worst <= 0.0, f"max(err - 1ulp) = {worst:.3e}", "<= 0"
    return _with_tmpdir(run)


def _check_merge_empty_identity():
    def run(tmp):
        base, base_t = _random_manifest(tmp, 3, "base")
        merged = M.merge_deltas(base, [], tmp / "merged")
        same = all(np.array_equal(merged.load(n), t) for n, t in base_t.items())
        return same, f"empty merge bit-exact = {same}", "bit-exact"
    return _with_tmpdir(run)


def _check_merge_permutation():
    # two orders of two additions each: difference <= 2 ulp of the
    # magnitude sum |base| + |d1| + |d2| (float associativity bound)
    def run(tmp):
        base, base_t = _random_manifest(tmp, 4, "base")
        rng = np.random.default_rng(5)
        deltas = [M.WeightDelta({"w.a": rng.standard_normal((12, 8), dtype=np.float32),
                                 "w.b": rng.standard_normal((5,), dtype=np.float32)})
                  for _ in range(2)]
        fwd = M.apply_deltas(base.load_all(), deltas)
        rev = M.apply_deltas(base.load_all(), deltas[::-1])
        worst = 0.0
        for name in fwd:
            mag = np.abs(base_t[name]) + np.abs(deltas[0].entries[name]) \
                + np.abs(deltas[1].entries[name])
            worst = max(worst, float((np.abs(fwd[name] - rev[name]) - 2 * _ulp(mag)).max()))
        return worst <= 0.0, f"max(err - 2ulp) = {worst:.3e}", "<= 0"
    return _with_tmpdir(run)


def _check_merge_quantize_commutes():
    def run(tmp):
        base, base_t = _random_manifest(tmp, 6, "base")
        rng = np.random.default_rng(7)
        delta = M.WeightDelta({"w.a": rng.standard_normal((12, 8), dtype=np.float32),
                               "w.b": rng.standard_normal((5,), dtype=np.float32)})
        merged = M.merge_deltas(base, [delta], tmp / "merged")
        direct = base_t["w.a"] + np.float32(1.0) * delta.entries["w.a"]
        qa = Q.quantize_blockwise(merged.load("w.a"))
        qb = Q.quantize_blockwise(direct)
        same = np.array_equal(qa.q, qb.q) and np.array_equal(qa.scales, qb.scales)
        return same, f"quantized merge == quantized direct sum = {same}", "bit-exact"
    return _with_tmpdir(run)


CHECKS: list[tuple[str, str, callable]] = [
    ("quant", "roundtrip-error-bound", _check_quant_roundtrip),
    ("quant", "requantize-idempotent", _check_quant_idempotent),
    ("quant", "segment-sum-exactness", _check_quant_segment_bound),
    ("quant", "scaling-invariance", _check_quant_scaling_invariance),
    ("attention", "softmax-rows-sum-to-one", _check_attn_softmax_rows),
    ("attention", "topk1-equals-reference", _check_attn_topk1_exact),
    ("attention", "topk-selection-scale-invariance", _check_attn_topk_scale_invariance),
    ("attention", "quantized-seq1-identity", _check_attn_quantized_seq1),
    ("attention", "linear-denominator-positive", _check_attn_linear_den_positive),
    ("attention", "flop-sparse-bounded-by-dense", _check_attn_flop_sparse_le_dense),
    ("attention", "instrumented-flops-match-analytic", _check_attn_instrumented_matches_analytic),
    ("sampler", "model-call-count", _check_sampler_call_count),
    ("sampler", "fixed-seed-determinism", _check_sampler_determinism),
    ("sampler", "schedule-monotone-terminal-zero", _check_sampler_schedule_shape),
    ("sampler", "zero-weight-identity", _check_sampler_zero_weight_identity),
    ("sampler", "two-expert-switch-count", _check_sampler_switch_count),
    ("merge", "extract-merge-roundtrip", _check_merge_roundtrip),
    ("merge", "empty-merge-identity", _check_merge_empty_identity),
    ("merge", "permutation-tolerance", _check_merge_permutation),
    ("merge", "merge-quantize-commutes", _check_merge_quantize_commutes),
]


def run_verify_suite(scope: str = "all") -> VerifySummary:
    """Run the invariant checks for one scope (or all of them).

    Failures are reported in the summary, never raised.
    """
    valid = set(INVENTORY) | {"all"}
    if scope not in valid:
        raise ValueError(f"scope must be one of {sorted(valid)}, got {scope!r}")
    results = []
    for chk_scope, name, fn in CHECKS:
        if scope != "all" and chk_scope != scope:
            continue
        try:
            passed, measured, bound = fn()
        except Exception as e:  # a crash is a failure, not an abort
            passed, measured, bound = False, f"raised {type(e).__name__}: {e}", "no exception"
        results.append(CheckResult(scope=chk_scope, name=name, passed=bool(passed),
                                   measured=measured, bound=bound))
    return VerifySummary(results=results)
