"""turbobench command line interface.

Subcommands: quantize a manifest's matrices, merge delta checkpoints,
run component or end-to-end latency benches, execute the invariant
suite, and re-render a saved report. Exit codes: 0 success, 1
verification failure, 2 usage error (argparse default).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import verify as verify_mod
from .blockquant import BlockQuantConfig, pack_blockquantized, quantize_blockwise
from .merge import WeightDelta, merge_deltas
from .tensor_store import load_manifest, write_manifest


def _cmd_quantize(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = BlockQuantConfig(block=args.block)
    tensors: dict[str, np.ndarray] = {}
    quantized = 0
    for name, arr in manifest.load_all().items():
        if arr.ndim == 2 and arr.dtype == np.float32 and not _excluded(name, args.exclude):
            tensors.update(pack_blockquantized(quantize_blockwise(arr, cfg), name))
            quantized += 1
        else:
            tensors[name] = arr
    meta = dict(manifest.metadata)
    meta.update({"quantized": True, "block": args.block})
    out = write_manifest(args.out, tensors, metadata=meta, name=manifest.name)
    print(f"quantized {quantized} matrices into {out.base_dir}")
    return 0


def _excluded(name: str, patterns: list[str]) -> bool:
    return any(p in name for p in patterns)


def _cmd_merge(args) -> int:
    base = load_manifest(args.base)
    deltas = [WeightDelta(load_manifest(p).load_all()) for p in args.delta]
    coeffs = args.coeff
    if coeffs and len(coeffs) != len(deltas):
        print(f"error: {len(deltas)} deltas but {len(coeffs)} --coeff values", file=sys.stderr)
        return 2
    merged = merge_deltas(base, deltas, args.out, coefficients=coeffs or None)
    print(f"merged {len(deltas)} delta(s) into {merged.base_dir}")
    return 0


def _bench_config(args) -> bench_mod.BenchConfig:
    return bench_mod.BenchConfig(
        seq=args.seq,
        model_dim=args.dim,
        heads=args.heads,
        head_dim=args.dim // args.heads,
        num_layers=args.layers,
        steps_baseline=args.steps_baseline,
        steps_fast=args.steps_fast,
        topk_ratio=args.topk,
        quantize_linear=not args.no_quant_linear,
        quantize_attention=not args.no_quant_attn,
        repeats=args.repeats,
        seed=args.seed,
        switch_latency_s=args.switch_latency,
        two_expert=args.two_expert,
        boundary_sigma=args.boundary_sigma,
    )


def _cmd_bench(args) -> int:
    cfg = _bench_config(args)
    if args.what == "e2e":
        baseline, fast = bench_mod.run_e2e_bench(cfg)
        reports = [baseline, fast]
        print(f"baseline: {baseline.total_s:.3f}s over {baseline.counts['steps']} steps "
              f"(hash {baseline.report_hash[:16]})")
        print(f"fast:     {fast.total_s:.3f}s over {fast.counts['steps']} steps "
              f"(hash {fast.report_hash[:16]})")
        print(f"speedup:  {fast.speedup_vs_baseline:.2f}x "
              f"(step ratio {fast.decomposition['step_ratio']:.2f} x "
              f"per-step {fast.decomposition['per_step_ratio']:.2f})")
    else:
        component = {"attn": "attention", "linear": "linear", "norms": "norms"}[args.what]
        report = bench_mod.run_component_bench(cfg, component)
        reports = [report]
        print(f"{component}: accelerated {report.stages[component] * 1e3:.2f} ms, "
              f"speedup {report.speedup_vs_baseline:.2f}x, "
              f"cosine {report.errors['cosine']:.5f} (hash {report.report_hash[:16]})")
    out = Path(args.out) if args.out else Path(f"bench_{args.what}.json")
    bench_mod.emit_report(reports, "json", out)
    print(f"report written to {out}")
    return 0


def _cmd_verify(args) -> int:
    summary = verify_mod.run_verify_suite(args.scope)
    for r in summary.results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.scope}/{r.name}: {r.measured} (bound: {r.bound})")
    print(f"{summary.num_passed}/{len(summary.results)} invariants passed")
    return 0 if summary.ok else 1


def _cmd_report(args) -> int:
    dicts = bench_mod.load_report_json(args.input)
    out = Path(args.out) if args.out else Path(args.input).with_suffix(f".{args.format}")
    bench_mod.emit_report(dicts, args.format, out)
    print(f"wrote {out}")
    return 0


def _add_bench_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seq", type=int, default=1024)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--steps-baseline", type=int, default=100)
    p.add_argument("--steps-fast", type=int, default=3)
    p.add_argument("--topk", type=float, default=0.1)
    p.add_argument("--no-quant-linear", action="store_true")
    p.add_argument("--no-quant-attn", action="store_true")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--switch-latency", type=float, default=0.0)
    p.add_argument("--two-expert", action="store_true")
    p.add_argument("--boundary-sigma", type=float, default=None)
    p.add_argument("--out", default=None, help="report json path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="turbobench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="block-quantize a manifest's matrices")
    p.add_argument("manifest")
    p.add_argument("--block", type=int, default=128)
    p.add_argument("--exclude", action="append", default=[],
                   help="skip parameters whose name contains this substring")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_quantize)

    p = sub.add_parser("merge", help="apply delta checkpoints to a base manifest")
    p.add_argument("base")
    p.add_argument("delta", nargs="+")
    p.add_argument("--coeff", type=float, action="append", default=[])
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_merge)

    p = sub.add_parser("bench", help="run latency benchmarks")
    p.add_argument("what", choices=["attn", "linear", "norms", "e2e"])
    _add_bench_flags(p)
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--scope", default="all",
                   choices=["quant", "attention", "sampler", "merge", "all"])
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("report", help="re-render a saved report")
    p.add_argument("input")
    p.add_argument("--format", default="svg", choices=["json", "csv", "svg"])
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
