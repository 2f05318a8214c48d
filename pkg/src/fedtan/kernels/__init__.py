"""Batch-normalization kernels with a compiled fast path.

The Cython extension is used when it was built; otherwise the numpy
implementation is selected. Set ``FEDTAN_PURE_PYTHON=1`` to force the
fallback.
"""
import os

from . import _bn_py

if os.environ.get("FEDTAN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _bn_py
else:
    try:
        from . import _bn_ext as _impl
    except ImportError:
        _impl = _bn_py

BACKEND = "cython" if _impl is not _bn_py else "python"

column_mean = _impl.column_mean
centered_variance = _impl.centered_variance
bn_moments = _impl.bn_moments
bn_normalize = _impl.bn_normalize
bn_stat_grads = _impl.bn_stat_grads
bn_input_grad = _impl.bn_input_grad


def available_backends():
    """Map backend name to kernel module for every importable backend."""
    backends = {"python": _bn_py}
    try:
        from . import _bn_ext
    except ImportError:
        pass
    else:
        backends["cython"] = _bn_ext
    return backends

__all__ = [
    "BACKEND", "available_backends", "column_mean", "centered_variance",
    "bn_moments", "bn_normalize", "bn_stat_grads", "bn_input_grad",
]
