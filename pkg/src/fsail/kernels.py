"""Kernel dispatch: compiled Cython core when available, numpy otherwise.

Set ``FSAIL_PURE_PYTHON=1`` before import to force the numpy path.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("FSAIL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

softmax_rows_forward = _impl.softmax_rows_forward
softmax_rows_backward = _impl.softmax_rows_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
# numpy's SIMD tanh beats a scalar loop here even in C, so the forward
# GELU stays on numpy whichever backend is active
gelu_forward = _kernels_py.gelu_forward
gelu_backward = _impl.gelu_backward
log_softmax_rows = _impl.log_softmax_rows


def backends():
    """Map of every importable backend name to its module."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        return out
    out["cython"] = _compiled
    return out
