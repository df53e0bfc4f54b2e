"""Latency decomposition: component benches, an end-to-end run, reports.

Times dense float32 against the accelerated variants, then samples the
toy model end to end (many-step dense baseline vs few-step sparse +
quantized run) and writes the stage decomposition as json, csv, and an
svg stacked bar. Run:

    python demos/05_latency_reports.py
"""

import tempfile
from pathlib import Path

from turbobench.bench import (
    REFERENCE_LATENCIES_S,
    BenchConfig,
    emit_report,
    run_component_bench,
    run_e2e_bench,
    speedup_ratio,
)

work = Path(tempfile.mkdtemp(prefix="bench_demo_"))

# published single-GPU latency quotients reproduce from the fixture
lat = REFERENCE_LATENCIES_S["wan2.1-t2v-14b-720p"]
print(f"published 14b-720p: {lat['original']}s -> {lat['turbo']}s, "
      f"speedup {speedup_ratio(lat['original'], lat['turbo']):.1f}x (around 200x)")

# component benches at a modest desk shape
cfg = BenchConfig(seq=512, model_dim=256, heads=4, head_dim=64,
                  num_layers=1, steps_baseline=8, steps_fast=2, repeats=3, seed=0)
for component in ("attention", "linear", "norms"):
    r = run_component_bench(cfg, component)
    print(f"{component:>9}: accelerated {r.stages[component] * 1e3:7.2f} ms, "
          f"speedup {r.speedup_vs_baseline:5.2f}x, cosine {r.errors['cosine']:.5f}")

# a small end-to-end pair: 20-step dense baseline vs 2-step accelerated
e2e = BenchConfig(seq=512, model_dim=256, heads=4, head_dim=64, num_layers=2,
                  steps_baseline=20, steps_fast=2, topk_ratio=0.1, repeats=3, seed=0)
baseline, fast = run_e2e_bench(e2e)
print(f"\nbaseline {baseline.total_s:.2f}s vs fast {fast.total_s:.2f}s "
      f"-> {fast.speedup_vs_baseline:.1f}x "
      f"(step ratio {fast.decomposition['step_ratio']:.0f} x "
      f"per-step {fast.decomposition['per_step_ratio']:.2f})")
for r in (baseline, fast):
    shares = {k: f"{v / r.total_s:.0%}" for k, v in r.stages.items() if v > 0}
    print(f"  {r.label}: {shares}")

emit_report([baseline, fast], "json", work / "e2e.json")
emit_report([baseline, fast], "csv", work / "e2e.csv")
emit_report([baseline, fast], "svg", work / "e2e.svg")
print("\nreports written to", work)
print("report hash (stable across reruns):", fast.report_hash[:24])
