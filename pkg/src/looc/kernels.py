"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``LOOC_PURE_PYTHON=1`` to force the fallback (used by the benchmark and
by the equivalence tests).
"""

import os

from looc import _kernels_py

BACKEND = "python"

if os.environ.get("LOOC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from looc import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
entropy_rows = _impl.entropy_rows
entropy_rows_backward = _impl.entropy_rows_backward
threshold_counts = _impl.threshold_counts

__all__ = [
    "BACKEND",
    "softmax_rows",
    "softmax_rows_backward",
    "entropy_rows",
    "entropy_rows_backward",
    "threshold_counts",
]
