"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see every
criterion's line and measured values.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from turbobench.attention import (
    AttnInputs,
    SLAConfig,
    error_metrics,
    instrumented_sparse_macs,
    quantized_attention,
    reference_attention,
    sla_attention,
)
from turbobench.bench import REFERENCE_LATENCIES_S, BenchConfig, run_e2e_bench, speedup_ratio
from turbobench.blockquant import (
    _expand_scales,
    compression_ratio,
    dequantize_blockwise,
    quantize_blockwise,
)
from turbobench.merge import WeightDelta, apply_deltas, extract_delta, merge_deltas
from turbobench.sampler import TwoExpertConfig, consistency_sample, make_schedule, two_expert_sample
from turbobench.tensor_store import write_manifest


def _report(criterion: int, detail: str):
    print(f"\nACCEPTANCE {criterion}: PASS  ({detail})")


def gaussian_inputs(seed, h, s, d):
    rng = np.random.default_rng(seed)
    return AttnInputs(*(rng.standard_normal((h, s, d), dtype=np.float32) for _ in range(3)))


def test_criterion_01_published_latency_quotients():
    t0 = time.monotonic()
    lat = REFERENCE_LATENCIES_S
    cases = [
        ("wan2.1-t2v-1.3b-480p", "original", "turbo", 96.84),
        ("wan2.2-i2v-a14b-720p", "original", "turbo", 119.71),
        ("wan2.1-t2v-14b-720p", "original", "turbo", 198.63),
        ("wan2.1-t2v-14b-480p", "original", "turbo", 169.29),
        ("wan2.1-t2v-14b-720p", "original", "fastvideo", 65.66),
        ("wan2.1-t2v-14b-480p", "original", "fastvideo", 63.73),
        ("wan2.1-t2v-1.3b-480p", "original", "fastvideo", 34.72),
    ]
    for model, base_key, fast_key, want in cases:
        got = speedup_ratio(lat[model][base_key], lat[model][fast_key])
        assert abs(got - want) / want < 0.005, (model, got, want)
    elapsed = time.monotonic() - t0
    assert elapsed < 1.0
    _report(1, f"7 quotients within 0.5%, {elapsed:.3f}s")


def test_criterion_02_gpu_headline_replaced_by_property_suite():
    # the published 200x single-GPU figures are not desk-reproducible;
    # this suite substitutes the property checks below, so the fixture
    # quotients are asserted (criterion 1) but never compared against
    # wall-clock measurements from this machine
    from turbobench.verify import INVENTORY
    assert sum(INVENTORY.values()) == 20
    _report(2, "GPU headline excluded; 20-invariant property suite stands in")


def test_criterion_03_quantization_roundtrip_100_matrices():
    t0 = time.monotonic()
    rng = np.random.default_rng(2024)
    for _ in range(98):
        m = (rng.standard_normal((256, 256)) * rng.uniform(0.1, 10)).astype(np.float32)
        bq = quantize_blockwise(m)
        err = np.abs(m - dequantize_blockwise(bq))
        bound = _expand_scales(bq.scales, 128, 256, 256) / 2 + np.spacing(np.abs(m))
        assert np.all(err <= bound)
    # zero and constant blocks round-trip exactly
    z = quantize_blockwise(np.zeros((256, 256), np.float32))
    assert np.array_equal(dequantize_blockwise(z), np.zeros((256, 256), np.float32))
    c = np.full((256, 256), 127 * np.float32(0.5), dtype=np.float32)
    assert np.array_equal(dequantize_blockwise(quantize_blockwise(c)), c)
    elapsed = time.monotonic() - t0
    assert elapsed < 5.0
    _report(3, f"100 matrices within scale/2 + 1 ulp, {elapsed:.2f}s")


def test_criterion_04_w8a8_matches_float_gemm_of_dequantized():
    t0 = time.monotonic()
    from turbobench.blockquant import w8a8_matmul

    rng = np.random.default_rng(11)
    worst = 0.0
    for seed in range(5):
        a = quantize_blockwise(rng.standard_normal((256, 256)).astype(np.float32))
        b = quantize_blockwise(rng.standard_normal((256, 256)).astype(np.float32))
        got = w8a8_matmul(a, b)
        oracle = dequantize_blockwise(a) @ dequantize_blockwise(b)
        worst = max(worst, float(np.abs(got - oracle).max()))
    assert worst <= 1e-3
    elapsed = time.monotonic() - t0
    assert elapsed < 5.0
    _report(4, f"max |w8a8 - float GEMM| = {worst:.2e} <= 1e-3, {elapsed:.2f}s")


def test_criterion_05_compression_roughly_half_of_fp16():
    rng = np.random.default_rng(3)
    ratios = []
    for shape in ((128, 128), (256, 128), (512, 384), (1024, 1024)):
        bq = quantize_blockwise(rng.standard_normal(shape).astype(np.float32))
        ratio = compression_ratio(bq, 2.0)
        assert 0.499 <= ratio <= 0.501, (shape, ratio)
        ratios.append(ratio)
    farthest = max(ratios, key=lambda r: abs(r - 0.5))
    _report(5, f"ratios within [0.499, 0.501], farthest {farthest:.5f}")


def test_criterion_06_sla_exactness_limit_20_shapes():
    t0 = time.monotonic()
    rng = np.random.default_rng(99)
    worst = 0.0
    for i in range(20):
        h = int(rng.integers(1, 5))
        s = int(rng.integers(40, 280))
        d = int(rng.integers(8, 72))
        block = int(min(32, s))
        inputs = gaussian_inputs(1000 + i, h, s, d)
        cfg = SLAConfig(q_block=block, kv_block=block, topk_ratio=1.0,
                        linear_mix=float(rng.uniform(0, 3)), quantized_sparse_branch=False)
        _, rel = error_metrics(sla_attention(inputs, cfg), reference_attention(inputs))
        worst = max(worst, rel)
    assert worst <= 1e-5
    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    _report(6, f"20 shapes, max rel_l2 = {worst:.2e} <= 1e-5, {elapsed:.1f}s")


def test_criterion_07_quantized_attention_fidelity():
    # oracle run before pinning measured min cosine 0.999921 over these
    # ten seeds; criterion threshold 0.98, regression guard 0.999
    worst = 1.0
    for seed in range(5, 15):
        inputs = gaussian_inputs(seed, 4, 256, 64)
        cos, _ = error_metrics(quantized_attention(inputs), reference_attention(inputs))
        worst = min(worst, cos)
    assert worst >= 0.98
    assert worst >= 0.999
    _report(7, f"min cosine over 10 seeds = {worst:.6f} >= 0.98")


def test_criterion_08_sparsity_accounting_exact():
    # divisible shapes: ratio * num_kv_blocks integral and seq % kv_block == 0
    for h, s, d, blk in ((1, 640, 64, 64), (2, 2560, 32, 64), (4, 1280, 16, 64)):
        inputs = gaussian_inputs(s + d, h, s, d)
        cfg = SLAConfig(q_block=blk, kv_block=blk, topk_ratio=0.1)
        macs = instrumented_sparse_macs(inputs, cfg)
        assert macs["total_macs"] * 10 == macs["dense_macs"], (h, s, d)
    _report(8, "instrumented sparse MACs == 0.1 x dense MACs exactly on 3 shapes")


def test_criterion_09_step_count_and_switch_contract():
    for n in (1, 3, 4, 100):
        calls = []
        model = lambda x, s: (calls.append(1), x * np.float32(0.5))[1]
        consistency_sample(model, make_schedule(n), (4,), seed=0)
        assert len(calls) == n
    sched = make_schedule(3)
    boundary = float(np.sqrt(sched.sigmas[1] * sched.sigmas[2]))
    cfg = TwoExpertConfig(boundary,
                          lambda x, s: np.zeros_like(x), lambda x, s: np.ones_like(x))
    _, switches = two_expert_sample(cfg, sched, (4,), seed=0)
    assert switches == 1
    _report(9, "exactly N model calls for N in {1,3,4,100}; mid-boundary switch_count == 1")


def test_criterion_10_desk_scale_e2e_speedup():
    t0 = time.monotonic()
    cfg = BenchConfig(seq=1024, model_dim=256, heads=4, head_dim=64, num_layers=2,
                      steps_baseline=100, steps_fast=3, topk_ratio=0.1,
                      quantize_linear=True, quantize_attention=True, seed=0)
    baseline, fast = run_e2e_bench(cfg)
    elapsed = time.monotonic() - t0
    speedup = fast.speedup_vs_baseline
    step_ratio = cfg.steps_baseline / cfg.steps_fast
    base_attn_per_step = baseline.stages["attention"] / cfg.steps_baseline
    fast_attn_per_step = fast.stages["attention"] / cfg.steps_fast
    assert speedup >= 30.0, speedup
    assert speedup >= 0.8 * step_ratio, speedup
    assert fast_attn_per_step < base_attn_per_step
    assert elapsed < 180.0
    _report(10, f"speedup {speedup:.1f}x (>=30), attention/step "
                f"{fast_attn_per_step * 1e3:.1f}ms < {base_attn_per_step * 1e3:.1f}ms, "
                f"bench took {elapsed:.0f}s")


def test_criterion_11_merge_algebra(tmp_path):
    rng = np.random.default_rng(41)
    shapes = {"a.w": (64, 48), "b.w": (32,)}
    base_t = {k: rng.standard_normal(v).astype(np.float32) for k, v in shapes.items()}
    tuned_t = {k: rng.standard_normal(v).astype(np.float32) for k, v in shapes.items()}
    base = write_manifest(tmp_path / "base", base_t, name="base")
    tuned = write_manifest(tmp_path / "tuned", tuned_t, name="tuned")
    delta = extract_delta(tuned, base)
    merged = merge_deltas(base, [delta], tmp_path / "merged")
    for name, want in tuned_t.items():
        got = merged.load(name)
        tol = np.spacing(np.maximum(np.abs(want), np.abs(delta.entries[name])))
        assert np.all(np.abs(got - want) <= tol)
    empty = merge_deltas(base, [], tmp_path / "empty")
    assert all(np.array_equal(empty.load(n), t) for n, t in base_t.items())
    d2 = WeightDelta({k: rng.standard_normal(v).astype(np.float32) for k, v in shapes.items()})
    fwd = apply_deltas(base_t, [delta, d2])
    rev = apply_deltas(base_t, [d2, delta])
    for name in base_t:
        mag = np.abs(base_t[name]) + np.abs(delta.entries[name]) + np.abs(d2.entries[name])
        assert np.all(np.abs(fwd[name] - rev[name]) <= 2 * np.spacing(mag))
    _report(11, "roundtrip <= 1 ulp, empty merge bit-exact, permutations <= 2 ulp")


def test_criterion_12_cli_determinism_across_thread_counts(tmp_path):
    t0 = time.monotonic()
    outs = []
    for threads in ("1", "2"):
        out = tmp_path / f"e2e_t{threads}.json"
        env = dict(os.environ, TURBOBENCH_THREADS=threads)
        res = subprocess.run(
            [sys.executable, "-m", "turbobench.cli", "bench", "e2e",
             "--seed", "17", "--out", str(out)],
            env=env, capture_output=True, text=True, timeout=570)
        assert res.returncode == 0, res.stderr
        outs.append(json.loads(out.read_text())["reports"])
    for ra, rb in zip(*outs):
        assert ra["report_hash"] == rb["report_hash"], ra["label"]
        assert ra["sample_sha256"] == rb["sample_sha256"], ra["label"]
    elapsed = time.monotonic() - t0
    _report(12, f"hashes and sampled outputs identical for "
                f"TURBOBENCH_THREADS in (1, 2), {elapsed:.0f}s")
