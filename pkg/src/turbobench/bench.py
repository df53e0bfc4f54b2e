"""Latency benchmarks, speedup accounting, and report emission.

Component benches time one primitive (attention, linear, norms) in its
dense-float32 form against the accelerated variant, median of several
repeats with a discarded warm-up. The end-to-end bench samples the toy
model twice, a many-step dense baseline against a few-step run with
sparse-linear attention, quantized attention, and W8A8 linears, and
decomposes wall-clock time per stage.

Reports hash only their deterministic fields (config, FLOPs, error
metrics, counts, sample digest), never timings, so a fixed seed yields
a stable hash across runs and thread counts.

Published single-RTX-5090 latencies for the Wan video models ship as a
read-only fixture so the headline speedup quotients can be reproduced
exactly from the quoted numbers.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from xml.etree import ElementTree as ET

import numpy as np

from . import attention as attn_mod
from . import sampler as sampler_mod
from .attention import AttnInputs, SLAConfig, attention_flop_report, error_metrics
from .blockquant import BlockQuantConfig, quantize_blockwise, quantized_linear_forward
from .sampler import (
    Schedule,
    ToyModel,
    TwoExpertConfig,
    consistency_sample,
    make_random_weights,
    make_schedule,
    quantize_weights,
    two_expert_sample,
)

STAGES = ("attention", "linear", "norms", "sampler_overhead", "expert_switch", "other")

# Published end-to-end diffusion latencies (seconds, text encoding and
# VAE decoding excluded) on a single RTX 5090: original implementation,
# the sparse-attention few-step baseline, and the accelerated stack.
REFERENCE_LATENCIES_S = {
    "wan2.1-t2v-1.3b-480p": {"original": 184.0, "fastvideo": 5.3, "turbo": 1.9},
    "wan2.2-i2v-a14b-720p": {"original": 4549.0, "fastvideo": None, "turbo": 38.0},
    "wan2.1-t2v-14b-720p": {"original": 4767.0, "fastvideo": 72.6, "turbo": 24.0},
    "wan2.1-t2v-14b-480p": {"original": 1676.0, "fastvideo": 26.3, "turbo": 9.9},
}


def speedup_ratio(baseline_s: float, fast_s: float) -> float:
    """Plain latency quotient; both inputs must be positive."""
    if baseline_s <= 0 or fast_s <= 0:
        raise ValueError(f"latencies must be positive, got {baseline_s}, {fast_s}")
    return baseline_s / fast_s


class StageTimer:
    """Accumulates wall-clock seconds into named stages."""

    def __init__(self):
        self.stages = {name: 0.0 for name in STAGES}

    @contextmanager
    def section(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] += time.perf_counter() - t0


@dataclass
class BenchConfig:
    seq: int = 1024
    model_dim: int = 256
    heads: int = 4
    head_dim: int = 64
    num_layers: int = 2
    steps_baseline: int = 100
    steps_fast: int = 3
    topk_ratio: float = 0.1
    quantize_linear: bool = True
    quantize_attention: bool = True
    repeats: int = 5
    seed: int = 0
    switch_latency_s: float = 0.0
    two_expert: bool = False
    boundary_sigma: float | None = None
    quant_block: int = 128

    def __post_init__(self):
        for name in ("seq", "model_dim", "heads", "head_dim", "num_layers",
                     "steps_baseline", "steps_fast"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.model_dim != self.heads * self.head_dim:
            raise ValueError("model_dim must equal heads * head_dim")
        if self.steps_fast > self.steps_baseline:
            raise ValueError("steps_fast must be <= steps_baseline")
        if self.repeats < 3:
            raise ValueError("repeats must be >= 3")
        if self.switch_latency_s < 0:
            raise ValueError("switch_latency_s must be >= 0")

    def to_dict(self) -> dict:
        return {
            "seq": self.seq, "model_dim": self.model_dim, "heads": self.heads,
            "head_dim": self.head_dim, "num_layers": self.num_layers,
            "steps_baseline": self.steps_baseline, "steps_fast": self.steps_fast,
            "topk_ratio": self.topk_ratio,
            "quantize_linear": self.quantize_linear,
            "quantize_attention": self.quantize_attention,
            "repeats": self.repeats, "seed": self.seed,
            "switch_latency_s": self.switch_latency_s,
            "two_expert": self.two_expert,
            "boundary_sigma": self.boundary_sigma,
            "quant_block": self.quant_block,
            "threads": os.environ.get("TURBOBENCH_THREADS", "default"),
        }

    def sla_config(self) -> SLAConfig:
        return SLAConfig(topk_ratio=self.topk_ratio,
                         quantized_sparse_branch=self.quantize_attention)


@dataclass
class LatencyReport:
    """Per-stage wall-clock decomposition of one benchmark configuration."""

    label: str
    stages: dict[str, float]
    flops: dict[str, float] = field(default_factory=dict)
    errors: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int = 0
    sample_sha256: str = ""
    speedup_vs_baseline: float | None = None
    decomposition: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        full = {name: 0.0 for name in STAGES}
        full.update(self.stages)
        self.stages = full

    @property
    def total_s(self) -> float:
        return sum(self.stages.values())

    @property
    def report_hash(self) -> str:
        # timings and the thread-count echo stay out of the hash; only
        # fields that are reproducible from config+seed go in
        config = {k: v for k, v in self.config.items() if k != "threads"}
        deterministic = {
            "label": self.label,
            "config": config,
            "flops": self.flops,
            "errors": self.errors,
            "counts": self.counts,
            "seed": self.seed,
            "sample_sha256": self.sample_sha256,
        }
        blob = json.dumps(deterministic, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "stages": self.stages,
            "total_s": self.total_s,
            "flops": self.flops,
            "errors": self.errors,
            "counts": self.counts,
            "config": self.config,
            "seed": self.seed,
            "sample_sha256": self.sample_sha256,
            "speedup_vs_baseline": self.speedup_vs_baseline,
            "decomposition": self.decomposition,
            "report_hash": self.report_hash,
        }


def _median_time(fn, repeats: int) -> float:
    fn()  # warm-up, discarded
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def run_component_bench(cfg: BenchConfig, component: str) -> LatencyReport:
    """Time dense float32 against the accelerated variant of one primitive.

    The report's stage slot carries the accelerated median;
    ``speedup_vs_baseline`` holds dense_median / accelerated_median.
    Error metrics compare the accelerated output to the dense one.
    """
    if component not in ("attention", "linear", "norms"):
        raise ValueError(f"unknown component {component!r}")
    rng = np.random.default_rng(cfg.seed)
    flops: dict[str, float] = {}

    if component == "attention":
        shape = (cfg.heads, cfg.seq, cfg.head_dim)
        inputs = AttnInputs(*(rng.standard_normal(shape, dtype=np.float32) for _ in range(3)))
        sla = cfg.sla_config()
        baseline = lambda: attn_mod.reference_attention(inputs)
        accelerated = lambda: attn_mod.sla_attention(inputs, sla)
        flops = attention_flop_report(cfg.seq, cfg.head_dim, cfg.heads, sla).to_dict()
    elif component == "linear":
        x = rng.standard_normal((cfg.seq, cfg.model_dim), dtype=np.float32)
        w = rng.standard_normal((cfg.model_dim, cfg.model_dim), dtype=np.float32)
        wq = quantize_blockwise(w, BlockQuantConfig(block=cfg.quant_block))
        baseline = lambda: x @ w
        accelerated = lambda: quantized_linear_forward(x, wq)
        flops = {"linear_flops": 2.0 * cfg.seq * cfg.model_dim * cfg.model_dim}
    else:
        x = rng.standard_normal((cfg.seq, cfg.model_dim), dtype=np.float32)
        gain = rng.standard_normal(cfg.model_dim, dtype=np.float32)
        offset = rng.standard_normal(cfg.model_dim, dtype=np.float32)

        def norms_f64():
            x64 = x.astype(np.float64)
            r = x64 / np.sqrt(np.mean(x64 ** 2, -1, keepdims=True) + 1e-6) * gain
            mu = x64.mean(-1, keepdims=True)
            l = (x64 - mu) / np.sqrt(np.mean((x64 - mu) ** 2, -1, keepdims=True) + 1e-6)
            return np.concatenate([r, l * gain + offset], axis=1).astype(np.float32)

        def norms_f32():
            return np.concatenate([sampler_mod.rmsnorm(x, gain),
                                   sampler_mod.layernorm(x, gain, offset)], axis=1)

        baseline, accelerated = norms_f64, norms_f32
        flops = {"norm_elements": float(2 * x.size)}

    base_med = _median_time(baseline, cfg.repeats)
    accel_med = _median_time(accelerated, cfg.repeats)
    cosine, rel_l2 = error_metrics(accelerated(), baseline())
    return LatencyReport(
        label=f"component:{component}",
        stages={component: accel_med},
        flops=flops,
        errors={"cosine": cosine, "rel_l2": rel_l2},
        counts={"repeats": cfg.repeats},
        config=cfg.to_dict(),
        seed=cfg.seed,
        speedup_vs_baseline=speedup_ratio(base_med, accel_med),
    )


def _timed_sample(cfg: BenchConfig, model: ToyModel, steps: int):
    """Sample the toy model once, decomposing wall-clock into stages.

    "other" is model-forward time not attributed to a primitive;
    "sampler_overhead" is loop time outside the model (noise, bookkeeping).
    """
    timer = StageTimer()
    sched = make_schedule(steps)
    shape = (cfg.seq, cfg.model_dim)
    model.calls = 0
    switch_count = 0
    model_s = 0.0

    def timed_model(x, sigma):
        nonlocal model_s
        t0 = time.perf_counter()
        out = model(x, sigma, timer=timer)
        model_s += time.perf_counter() - t0
        return out

    t0 = time.perf_counter()
    if cfg.two_expert:
        boundary = cfg.boundary_sigma
        if boundary is None:
            boundary = float(np.sqrt(sched.sigmas[0] * max(sched.sigmas[-2], 1e-6)))
        te = TwoExpertConfig(
            boundary_sigma=boundary,
            high_noise_model=timed_model,
            low_noise_model=timed_model,
        )
        sample, switch_count = two_expert_sample(te, sched, shape, cfg.seed)
    else:
        sample = consistency_sample(timed_model, sched, shape, cfg.seed)
    loop_s = time.perf_counter() - t0

    inner = sum(timer.stages.values())
    timer.stages["other"] = max(model_s - inner, 0.0)
    timer.stages["sampler_overhead"] = max(loop_s - model_s, 0.0)
    timer.stages["expert_switch"] = switch_count * cfg.switch_latency_s
    return sample, timer.stages, model.calls, switch_count


def run_e2e_bench(cfg: BenchConfig) -> tuple[LatencyReport, LatencyReport]:
    """Many-step dense baseline vs few-step accelerated run, same seed.

    Returns ``(baseline, fast)``; the fast report carries the measured
    speedup and the multiplicative decomposition estimate
    (step ratio x per-step ratio).
    """
    weights = make_random_weights(cfg.model_dim, cfg.num_layers, seed=cfg.seed)
    baseline_model = ToyModel(layers=weights, heads=cfg.heads, attn_mode="dense")
    fast_layers = quantize_weights(weights, cfg.quant_block) if cfg.quantize_linear else weights
    fast_model = ToyModel(layers=fast_layers, heads=cfg.heads, attn_mode="sla",
                          sla_cfg=cfg.sla_config())

    base_sample, base_stages, base_calls, _ = _timed_sample(cfg, baseline_model, cfg.steps_baseline)
    fast_sample, fast_stages, fast_calls, switches = _timed_sample(cfg, fast_model, cfg.steps_fast)

    dense_flops = attention_flop_report(cfg.seq, cfg.head_dim, cfg.heads).to_dict()
    sla_flops = attention_flop_report(cfg.seq, cfg.head_dim, cfg.heads, cfg.sla_config()).to_dict()
    per_call = cfg.num_layers

    baseline = LatencyReport(
        label="e2e:baseline",
        stages=base_stages,
        flops={k: v * per_call * cfg.steps_baseline for k, v in dense_flops.items()},
        counts={"model_calls": base_calls, "steps": cfg.steps_baseline, "switch_count": 0},
        config=cfg.to_dict(),
        seed=cfg.seed,
        sample_sha256=hashlib.sha256(base_sample.tobytes()).hexdigest(),
    )
    fast = LatencyReport(
        label="e2e:fast",
        stages=fast_stages,
        flops={k: v * per_call * cfg.steps_fast for k, v in sla_flops.items()
               if k != "dense_to_sparse_ratio"},
        counts={"model_calls": fast_calls, "steps": cfg.steps_fast,
                "switch_count": switches},
        config=cfg.to_dict(),
        seed=cfg.seed,
        sample_sha256=hashlib.sha256(fast_sample.tobytes()).hexdigest(),
    )
    fast.speedup_vs_baseline = speedup_ratio(baseline.total_s, fast.total_s)
    step_ratio = cfg.steps_baseline / cfg.steps_fast
    per_step_ratio = (baseline.total_s / cfg.steps_baseline) / (fast.total_s / cfg.steps_fast)
    fast.decomposition = {
        "step_ratio": step_ratio,
        "per_step_ratio": per_step_ratio,
        "product": step_ratio * per_step_ratio,
    }
    return baseline, fast


def _as_dicts(reports) -> list[dict]:
    if isinstance(reports, LatencyReport):
        reports = [reports]
    return [r.to_dict() if isinstance(r, LatencyReport) else dict(r) for r in reports]


_STAGE_COLORS = {
    "attention": "#4c72b0", "linear": "#dd8452", "norms": "#55a868",
    "sampler_overhead": "#c44e52", "expert_switch": "#8172b3", "other": "#937860",
}


def render_svg(reports) -> str:
    """One horizontal stacked bar per report, one rect per nonzero stage."""
    dicts = _as_dicts(reports)
    width, bar_h, gap, left, top = 900, 48, 36, 170, 30
    plot_w = width - left - 60
    max_total = max(max(d["total_s"] for d in dicts), 1e-12)
    height = top * 2 + len(dicts) * (bar_h + gap) + 20
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                     width=str(width), height=str(height))
    for i, d in enumerate(dicts):
        y = top + i * (bar_h + gap)
        label = ET.SubElement(svg, "text", x="10", y=str(y + bar_h // 2 + 5),
                              attrib={"font-size": "14", "font-family": "sans-serif"})
        label.text = d["label"]
        x = float(left)
        for stage in STAGES:
            seconds = d["stages"].get(stage, 0.0)
            if seconds <= 0:
                continue
            w = seconds / max_total * plot_w
            ET.SubElement(svg, "rect", x=f"{x:.2f}", y=str(y),
                          width=f"{max(w, 0.5):.2f}", height=str(bar_h),
                          fill=_STAGE_COLORS[stage],
                          attrib={"data-stage": stage})
            x += w
        total = ET.SubElement(svg, "text", x=f"{x + 8:.2f}", y=str(y + bar_h // 2 + 5),
                              attrib={"font-size": "13", "font-family": "sans-serif"})
        total.text = f"{d['total_s']:.3f}s"
    lx = left
    for stage in STAGES:
        key = ET.SubElement(svg, "rect", x=str(lx), y=str(height - 24),
                            width="12", height="12", fill=_STAGE_COLORS[stage])
        key.set("data-legend", stage)
        txt = ET.SubElement(svg, "text", x=str(lx + 16), y=str(height - 13),
                            attrib={"font-size": "11", "font-family": "sans-serif"})
        txt.text = stage
        lx += 16 + 8 * len(stage) + 24
    return ET.tostring(svg, encoding="unicode")


def emit_report(report, fmt: str, path: str | Path) -> Path:
    """Write one report (or a list) as canonical json, per-stage csv, or svg."""
    path = Path(path)
    dicts = _as_dicts(report)
    if fmt == "json":
        payload = {"reports": dicts}
        path.write_bytes(json.dumps(payload, sort_keys=True, indent=2).encode() + b"\n")
    elif fmt == "csv":
        lines = ["label,stage,seconds"]
        for d in dicts:
            for stage in STAGES:
                lines.append(f"{d['label']},{stage},{d['stages'].get(stage, 0.0):.9f}")
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "svg":
        path.write_text(render_svg(dicts))
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def load_report_json(path: str | Path) -> list[dict]:
    payload = json.loads(Path(path).read_text())
    if isinstance(payload, dict) and "reports" in payload:
        return payload["reports"]
    if isinstance(payload, list):
        return payload
    return [payload]
