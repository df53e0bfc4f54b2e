"""Tensor container, bit-exact file serialization, and model manifests.

File format (little-endian throughout):

    bytes 0..3   magic "TBT1"
    byte  4      dtype code: 0 = float32, 1 = int8
    byte  5      rank (number of axes)
    next 8*rank  axis lengths, unsigned 64-bit
    rest         raw element payload, row-major

A file therefore occupies exactly ``6 + 8*rank + itemsize*prod(dims)``
bytes.

Manifests are line-oriented text files. ``tensor.<name> = <relative path>``
binds a parameter to a tensor file, ``meta.<key> = <value>`` carries
metadata, and ``name = <string>`` names the model. Typed metadata keys
(``num_steps``, ``topk_ratio``, ``quantized``, ``boundary_sigma``,
``heads``, ``model_dim``, ``num_layers``, ``block``) are parsed eagerly;
everything else stays a string.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TBT1"

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.int8): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype(np.int8)}


class TensorStoreError(Exception):
    """Base class for tensor file and manifest failures."""


class BadMagicError(TensorStoreError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(TensorStoreError):
    """File ends before the declared header or payload is complete."""


class UnknownDtypeError(TensorStoreError):
    """Header declares a dtype code this format does not define."""


class ManifestError(TensorStoreError):
    """Manifest is malformed or references missing/duplicate entries."""


def _check_tensor(arr: np.ndarray) -> np.ndarray:
    if arr.dtype not in _DTYPE_CODES:
        raise UnknownDtypeError(f"unsupported dtype {arr.dtype}; use float32 or int8")
    if arr.ndim == 0:
        raise TensorStoreError("rank-0 tensors are not supported; use shape (1,)")
    if any(n < 1 for n in arr.shape):
        raise TensorStoreError(f"every axis must have length >= 1, got {arr.shape}")
    return np.ascontiguousarray(arr)


def write_tensor(t: np.ndarray, path: str | Path) -> None:
    """Serialize ``t`` (float32 or int8 ndarray) to ``path``.

    The whole file is assembled in memory and written with a single
    call, so an I/O failure raises without leaving a silently short
    file behind.
    """
    arr = _check_tensor(t)
    header = MAGIC + struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    with open(path, "wb") as f:
        f.write(header + payload)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor file written by :func:`write_tensor`."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a tensor file (bad magic)")
    if len(raw) < 6:
        raise TruncatedFileError(f"{path}: header cut short")
    code, rank = raw[4], raw[5]
    if code not in _CODE_DTYPES:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    if rank < 1:
        raise TruncatedFileError(f"{path}: rank must be >= 1")
    header_end = 6 + 8 * rank
    if len(raw) < header_end:
        raise TruncatedFileError(f"{path}: dims cut short")
    dims = struct.unpack(f"<{rank}Q", raw[6:header_end])
    if any(n < 1 for n in dims):
        raise TruncatedFileError(f"{path}: zero-length axis in header")
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = raw[header_end:]
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload)} bytes, header declares {expected}"
        )
    if len(payload) > expected:
        raise TensorStoreError(f"{path}: {len(payload) - expected} trailing bytes")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


_TYPED_META = {
    "num_steps": int,
    "heads": int,
    "model_dim": int,
    "num_layers": int,
    "block": int,
    "topk_ratio": float,
    "boundary_sigma": float,
    "sigma_max": float,
    "sigma_min": float,
    "quantized": None,  # bool, parsed specially
}


def _parse_meta(key: str, value: str):
    if key == "quantized":
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ManifestError(f"meta.quantized must be a boolean, got {value!r}")
    caster = _TYPED_META.get(key)
    if caster is None:
        return value
    try:
        return caster(value)
    except ValueError as e:
        raise ManifestError(f"meta.{key}: cannot parse {value!r}") from e


@dataclass
class ModelManifest:
    """Named collection of tensor files plus typed metadata."""

    name: str
    tensors: dict[str, Path]
    metadata: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def load(self, param: str) -> np.ndarray:
        if param not in self.tensors:
            raise ManifestError(f"manifest {self.name!r} has no tensor {param!r}")
        return read_tensor(self.tensors[param])

    def load_all(self) -> dict[str, np.ndarray]:
        return {name: read_tensor(p) for name, p in sorted(self.tensors.items())}


def load_manifest(path: str | Path) -> ModelManifest:
    """Parse and eagerly validate a manifest file.

    Every referenced tensor file must exist and parse; duplicate
    parameter names and unparsable metadata are rejected.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    name = path.stem
    tensors: dict[str, Path] = {}
    metadata: dict = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ManifestError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "name":
            name = value
        elif key.startswith("tensor."):
            param = key[len("tensor."):]
            if not param:
                raise ManifestError(f"{path}:{lineno}: empty tensor name")
            if param in tensors:
                raise ManifestError(f"{path}:{lineno}: duplicate tensor {param!r}")
            tensors[param] = base / value
        elif key.startswith("meta."):
            mkey = key[len("meta."):]
            metadata[mkey] = _parse_meta(mkey, value)
        else:
            raise ManifestError(f"{path}:{lineno}: unknown key {key!r}")
    for param, tpath in tensors.items():
        if not tpath.is_file():
            raise ManifestError(f"tensor {param!r}: missing file {tpath}")
        read_tensor(tpath)  # must round-trip
    return ModelManifest(name=name, tensors=tensors, metadata=metadata, base_dir=base)


def write_manifest(
    out_dir: str | Path,
    tensors: dict[str, np.ndarray],
    metadata: dict | None = None,
    name: str = "model",
) -> ModelManifest:
    """Write tensors plus a manifest.txt into ``out_dir`` and reload it."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"name = {name}"]
    for key in sorted(metadata or {}):
        value = (metadata or {})[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"meta.{key} = {value}")
    for param in sorted(tensors):
        fname = param.replace("/", "_") + ".tbt"
        write_tensor(tensors[param], out_dir / fname)
        lines.append(f"tensor.{param} = {fname}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return load_manifest(out_dir / "manifest.txt")
