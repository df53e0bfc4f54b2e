"""Parameter-delta extraction and merging.

A delta is the elementwise float32 difference between a finetuned and a
base checkpoint. Merging adds any number of deltas (optionally scaled)
onto the base in fixed list order, producing a single deployable set of
weights that can then be quantized.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_store import ModelManifest, write_manifest


class MergeError(Exception):
    pass


@dataclass
class WeightDelta:
    """Per-parameter float32 update tensors, shape-matched to the base."""

    entries: dict[str, np.ndarray]


def _check_same_params(a: dict, b: dict, what: str) -> None:
    if a.keys() != b.keys():
        only_a = sorted(a.keys() - b.keys())
        only_b = sorted(b.keys() - a.keys())
        raise MergeError(f"{what}: parameter sets differ (extra: {only_a}, missing: {only_b})")
    for name in a:
        if a[name].shape != b[name].shape:
            raise MergeError(
                f"{what}: shape mismatch for {name!r}: {a[name].shape} vs {b[name].shape}"
            )


def extract_delta(finetuned: ModelManifest, base: ModelManifest) -> WeightDelta:
    """Elementwise ``finetuned - base`` over identical parameter sets."""
    ft = finetuned.load_all()
    bs = base.load_all()
    _check_same_params(ft, bs, "extract_delta")
    return WeightDelta(entries={
        name: np.asarray(ft[name], dtype=np.float32) - np.asarray(bs[name], dtype=np.float32)
        for name in sorted(ft)
    })


def apply_deltas(
    base: dict[str, np.ndarray],
    deltas: list[WeightDelta],
    coefficients: list[float] | None = None,
) -> dict[str, np.ndarray]:
    """Pure in-memory merge: ``base + sum(coeff * delta)`` in list order."""
    if coefficients is None:
        coefficients = [1.0] * len(deltas)
    if len(coefficients) != len(deltas):
        raise MergeError(f"{len(deltas)} deltas but {len(coefficients)} coefficients")
    merged = {name: np.asarray(t, dtype=np.float32).copy() for name, t in base.items()}
    for d, c in zip(deltas, coefficients):
        _check_same_params(merged, d.entries, "merge_deltas")
        cf = np.float32(c)
        for name in merged:
            merged[name] = merged[name] + cf * d.entries[name]
    return merged


def merge_deltas(
    base: ModelManifest,
    deltas: list[WeightDelta],
    out_dir: str | Path,
    coefficients: list[float] | None = None,
) -> ModelManifest:
    """Merge deltas onto a base manifest and write the result to ``out_dir``."""
    merged = apply_deltas(base.load_all(), deltas, coefficients)
    return write_manifest(out_dir, merged, metadata=dict(base.metadata), name=base.name)
