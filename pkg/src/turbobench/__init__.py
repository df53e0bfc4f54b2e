"""Desk-scale acceleration stack: block-wise W8A8 linears, quantized and
sparse-linear attention, few-step consistency sampling, weight-delta
merging, and a latency benchmark harness."""

import os as _os

# TURBOBENCH_THREADS caps BLAS parallelism; it must land in the
# environment before numpy loads its BLAS, hence before any submodule
# import below.
_threads = _os.environ.get("TURBOBENCH_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from . import attention, bench, blockquant, merge, sampler, tensor_store, verify  # noqa: E402

__all__ = ["attention", "bench", "blockquant", "merge", "sampler", "tensor_store", "verify"]
__version__ = "0.1.0"
