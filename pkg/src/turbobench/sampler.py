"""Toy diffusion-transformer block and few-step consistency sampling.

The block is a standard pre-norm transformer layer built from the
accelerated primitives: RMS-normed attention sublayer, layer-normed MLP
sublayer, residual connections, and a scalar noise-level embedding
added to the stream before the norms. Projection and MLP weights may be
plain float32 matrices or block-quantized, in which case the forward
pass routes through the W8A8 linear.

Sampling follows the multistep consistency recipe: start from pure
noise at the largest noise level, repeatedly predict the clean sample,
and re-noise down to the next level. Noise comes from a counter-based
stream keyed by (seed, step index), so samples are bit-identical across
runs and thread counts. Two-expert sampling dispatches to a high-noise
model above a boundary level and a low-noise model below it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import attention as attn_mod
from .attention import AttnInputs, QuantAttnConfig, SLAConfig
from .blockquant import BlockQuantConfig, BlockQuantized, quantize_blockwise, quantized_linear_forward
from .tensor_store import ModelManifest

Denoiser = Callable[[np.ndarray, float], np.ndarray]


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-row ``x / sqrt(mean(x^2) + eps) * gain``."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    x = np.asarray(x, dtype=np.float32)
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + np.float32(eps)) * np.asarray(gain, dtype=np.float32)


def layernorm(x: np.ndarray, gain: np.ndarray, offset: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-row ``(x - mean) / sqrt(var + eps) * gain + offset`` with
    population variance."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    x = np.asarray(x, dtype=np.float32)
    mu = x.mean(axis=-1, keepdims=True)
    var = np.mean(np.square(x - mu), axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + np.float32(eps)) * np.asarray(gain, dtype=np.float32) \
        + np.asarray(offset, dtype=np.float32)


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; exact at 0 so zero weights stay an identity map
    c = np.float32(math.sqrt(2.0 / math.pi))
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


@dataclass
class ToyBlockWeights:
    """One transformer layer's parameters.

    The four matrices may each be float32 arrays or BlockQuantized.
    """

    rms_gain: np.ndarray
    ln_gain: np.ndarray
    ln_offset: np.ndarray
    qkv: np.ndarray | BlockQuantized
    out_proj: np.ndarray | BlockQuantized
    mlp_in: np.ndarray | BlockQuantized
    mlp_out: np.ndarray | BlockQuantized
    sigma_emb: np.ndarray

    MATRIX_NAMES = ("qkv", "out_proj", "mlp_in", "mlp_out")
    VECTOR_NAMES = ("rms_gain", "ln_gain", "ln_offset", "sigma_emb")


@dataclass
class Schedule:
    """Strictly decreasing noise levels ending at exactly 0."""

    sigmas: np.ndarray

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float32)
        if self.sigmas.ndim != 1 or self.sigmas.size < 2:
            raise ValueError("schedule needs at least [sigma_max, 0]")
        if self.sigmas[0] <= 0:
            raise ValueError("sigma_max must be positive")
        if self.sigmas[-1] != 0.0:
            raise ValueError("schedule must end at exactly 0")
        if not np.all(np.diff(self.sigmas) < 0):
            raise ValueError("sigmas must be strictly decreasing")

    @property
    def num_steps(self) -> int:
        return self.sigmas.size - 1


def make_schedule(num_steps: int, sigma_max: float = 80.0, sigma_min: float = 0.5) -> Schedule:
    """Geometric noise levels from sigma_max down to sigma_min, then 0."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if not (sigma_max > sigma_min > 0):
        raise ValueError(f"need sigma_max > sigma_min > 0, got {sigma_max}, {sigma_min}")
    if num_steps == 1:
        levels = np.array([sigma_max], dtype=np.float64)
    else:
        levels = np.geomspace(sigma_max, sigma_min, num_steps)
    return Schedule(np.append(levels, 0.0).astype(np.float32))


def step_noise(seed: int, step: int, shape: tuple[int, ...]) -> np.ndarray:
    """Unit Gaussian noise from a stream keyed by (seed, step).

    Indexing by step rather than draw order keeps sampling
    deterministic regardless of execution interleaving.
    """
    rng = np.random.default_rng([int(seed), int(step)])
    return rng.standard_normal(shape, dtype=np.float32)


def _linear(x: np.ndarray, w: np.ndarray | BlockQuantized) -> np.ndarray:
    if isinstance(w, BlockQuantized):
        return quantized_linear_forward(x, w)
    return x @ w


def toy_block_forward(
    x: np.ndarray,
    sigma: float,
    w: ToyBlockWeights,
    heads: int,
    attn_mode: str = "dense",
    sla_cfg: SLAConfig | None = None,
    quant_cfg: QuantAttnConfig | None = None,
    timer=None,
) -> np.ndarray:
    """One pre-norm transformer block over ``x`` of shape [seq, model_dim].

    The noise level enters as ``sigma * sigma_emb`` added to the stream
    before the norms; with all-zero weights the block is exactly the
    identity. ``attn_mode`` picks dense softmax, quantized, or sparse-
    linear attention for the attention sublayer.
    """
    if attn_mode not in ("dense", "quantized", "sla"):
        raise ValueError(f"unknown attn_mode {attn_mode!r}")
    x = np.asarray(x, dtype=np.float32)
    seq, model_dim = x.shape
    if model_dim % heads != 0:
        raise ValueError(f"model_dim {model_dim} not divisible by heads {heads}")
    head_dim = model_dim // heads
    t = _timer_or_null(timer)

    x = x + np.float32(sigma) * np.asarray(w.sigma_emb, dtype=np.float32)

    with t.section("norms"):
        a = rmsnorm(x, w.rms_gain)
    with t.section("linear"):
        qkv = _linear(a, w.qkv)
    with t.section("attention"):
        q, k, v = np.split(qkv, 3, axis=1)
        shaped = [m.reshape(seq, heads, head_dim).transpose(1, 0, 2) for m in (q, k, v)]
        inputs = AttnInputs(*shaped)
        if attn_mode == "dense":
            o = attn_mod.reference_attention(inputs)
        elif attn_mode == "quantized":
            o = attn_mod.quantized_attention(inputs, quant_cfg)
        else:
            o = attn_mod.sla_attention(inputs, sla_cfg)
        o = o.transpose(1, 0, 2).reshape(seq, model_dim)
    with t.section("linear"):
        o = _linear(o, w.out_proj)
    x = x + o

    with t.section("norms"):
        b = layernorm(x, w.ln_gain, w.ln_offset)
    with t.section("linear"):
        h1 = _linear(b, w.mlp_in)
    h1 = _gelu(h1)
    with t.section("linear"):
        h2 = _linear(h1, w.mlp_out)
    return x + h2


class _NullTimer:
    class _Section:
        def __enter__(self):
            return self

        def __exit__(self, *exc):
            return False

    _SECTION = _Section()

    def section(self, name):
        return self._SECTION


_NULL_TIMER = _NullTimer()


def _timer_or_null(timer):
    return timer if timer is not None else _NULL_TIMER


@dataclass
class ToyModel:
    """Stack of toy blocks acting as an x0-predicting denoiser."""

    layers: list[ToyBlockWeights]
    heads: int
    attn_mode: str = "dense"
    sla_cfg: SLAConfig | None = None
    quant_cfg: QuantAttnConfig | None = None
    calls: int = field(default=0, compare=False)

    def __call__(self, x: np.ndarray, sigma: float, timer=None) -> np.ndarray:
        self.calls += 1
        for w in self.layers:
            x = toy_block_forward(x, sigma, w, self.heads, self.attn_mode,
                                  self.sla_cfg, self.quant_cfg, timer)
        return x

    @property
    def model_dim(self) -> int:
        return int(self.layers[0].rms_gain.size)


def make_random_weights(
    model_dim: int,
    num_layers: int,
    seed: int,
    hidden_mult: int = 4,
    fan_scaled: bool = True,
) -> list[ToyBlockWeights]:
    """Gaussian toy weights; fan-in scaling keeps long sampling runs bounded."""
    rng = np.random.default_rng(seed)
    hidden = hidden_mult * model_dim

    def mat(rows, cols):
        m = rng.standard_normal((rows, cols), dtype=np.float32)
        return m / np.float32(math.sqrt(rows)) if fan_scaled else m

    layers = []
    for _ in range(num_layers):
        layers.append(ToyBlockWeights(
            rms_gain=rng.standard_normal(model_dim, dtype=np.float32) * np.float32(0.1)
            + np.float32(1.0),
            ln_gain=rng.standard_normal(model_dim, dtype=np.float32) * np.float32(0.1)
            + np.float32(1.0),
            ln_offset=rng.standard_normal(model_dim, dtype=np.float32) * np.float32(0.1),
            qkv=mat(model_dim, 3 * model_dim),
            out_proj=mat(model_dim, model_dim),
            mlp_in=mat(model_dim, hidden),
            mlp_out=mat(hidden, model_dim),
            sigma_emb=rng.standard_normal(model_dim, dtype=np.float32) * np.float32(0.01),
        ))
    return layers


def quantize_weights(layers: list[ToyBlockWeights], block: int = 128) -> list[ToyBlockWeights]:
    """Block-quantize every projection/MLP matrix; vectors stay float32."""
    cfg = BlockQuantConfig(block=block)
    out = []
    for w in layers:
        out.append(ToyBlockWeights(
            rms_gain=w.rms_gain, ln_gain=w.ln_gain, ln_offset=w.ln_offset,
            qkv=quantize_blockwise(w.qkv, cfg),
            out_proj=quantize_blockwise(w.out_proj, cfg),
            mlp_in=quantize_blockwise(w.mlp_in, cfg),
            mlp_out=quantize_blockwise(w.mlp_out, cfg),
            sigma_emb=w.sigma_emb,
        ))
    return out


def consistency_sample(
    model: Denoiser,
    sched: Schedule,
    shape: tuple[int, ...],
    seed: int,
) -> np.ndarray:
    """Multistep consistency sampling: exactly ``sched.num_steps`` model calls.

    Starts from ``sigma_max * noise``, predicts the clean sample at each
    level, and re-noises to the next level until the terminal 0.
    """
    x = np.float32(sched.sigmas[0]) * step_noise(seed, 0, shape)
    for i in range(sched.num_steps):
        x0 = model(x, float(sched.sigmas[i]))
        if x0.shape != x.shape:
            raise ValueError(f"model returned shape {x0.shape}, expected {x.shape}")
        nxt = sched.sigmas[i + 1]
        if nxt > 0:
            x = x0 + np.float32(nxt) * step_noise(seed, i + 1, shape)
        else:
            return x0
    return x0


@dataclass
class TwoExpertConfig:
    """High/low-noise denoisers split at a boundary noise level."""

    boundary_sigma: float
    high_noise_model: Denoiser
    low_noise_model: Denoiser

    def __post_init__(self):
        if self.boundary_sigma <= 0:
            raise ValueError("boundary_sigma must be positive")


def two_expert_sample(
    cfg: TwoExpertConfig,
    sched: Schedule,
    shape: tuple[int, ...],
    seed: int,
) -> tuple[np.ndarray, int]:
    """Consistency sampling that dispatches on the noise level.

    The high-noise model handles levels above ``boundary_sigma``, the
    low-noise model the rest. Returns the sample and the number of
    expert switches (1 for a boundary inside the schedule, else 0).
    """
    x = np.float32(sched.sigmas[0]) * step_noise(seed, 0, shape)
    switch_count = 0
    prev_high: bool | None = None
    x0 = x
    for i in range(sched.num_steps):
        sigma = float(sched.sigmas[i])
        use_high = sigma > cfg.boundary_sigma
        if prev_high is not None and use_high != prev_high:
            switch_count += 1
        prev_high = use_high
        model = cfg.high_noise_model if use_high else cfg.low_noise_model
        x0 = model(x, sigma)
        nxt = sched.sigmas[i + 1]
        if nxt > 0:
            x = x0 + np.float32(nxt) * step_noise(seed, i + 1, shape)
    return x0, switch_count


def schedule_from_manifest(manifest: ModelManifest) -> Schedule:
    """Build the deployment schedule from ``meta.num_steps`` (and the
    optional ``meta.sigma_max`` / ``meta.sigma_min`` overrides)."""
    meta = manifest.metadata
    if "num_steps" not in meta:
        raise ValueError("manifest metadata must carry num_steps")
    return make_schedule(int(meta["num_steps"]),
                         float(meta.get("sigma_max", 80.0)),
                         float(meta.get("sigma_min", 0.5)))


def boundary_from_manifest(manifest: ModelManifest, sched: Schedule) -> float:
    """``meta.boundary_sigma`` when present, else the geometric midpoint
    of the schedule's nonzero range."""
    meta = manifest.metadata
    if "boundary_sigma" in meta:
        return float(meta["boundary_sigma"])
    return float(np.sqrt(sched.sigmas[0] * sched.sigmas[-2]))


def _layer_params(i: int) -> dict[str, str]:
    return {name: f"layers.{i}.{name}"
            for name in ToyBlockWeights.MATRIX_NAMES + ToyBlockWeights.VECTOR_NAMES}


def model_to_tensors(layers: list[ToyBlockWeights]) -> dict[str, np.ndarray]:
    """Flatten float32 toy weights into manifest tensor entries."""
    out: dict[str, np.ndarray] = {}
    for i, w in enumerate(layers):
        names = _layer_params(i)
        for attr, pname in names.items():
            m = getattr(w, attr)
            if isinstance(m, BlockQuantized):
                raise TypeError("serialize quantized models via the quantize CLI")
            out[pname] = np.asarray(m, dtype=np.float32)
    return out


def model_from_manifest(manifest: ModelManifest) -> ToyModel:
    """Rebuild a ToyModel from a manifest written by :func:`model_to_tensors`.

    Quantized manifests (``meta.quantized = true``) carry ``.q`` and
    ``.scales`` entries per matrix and a ``meta.block`` edge.
    """
    from .blockquant import unpack_blockquantized

    meta = manifest.metadata
    heads = int(meta.get("heads", 4))
    num_layers = int(meta.get("num_layers", 0))
    if num_layers == 0:
        raise ValueError("manifest metadata must carry num_layers")
    quantized = bool(meta.get("quantized", False))
    block = int(meta.get("block", 128))
    layers = []
    for i in range(num_layers):
        names = _layer_params(i)
        kwargs = {}
        for attr in ToyBlockWeights.VECTOR_NAMES:
            kwargs[attr] = manifest.load(names[attr])
        for attr in ToyBlockWeights.MATRIX_NAMES:
            if quantized:
                kwargs[attr] = unpack_blockquantized(manifest, names[attr], block)
            else:
                kwargs[attr] = manifest.load(names[attr])
        layers.append(ToyBlockWeights(**kwargs))
    return ToyModel(layers=layers, heads=heads)
