"""Hot numerical kernels.

The compiled Cython module is used when it was built; otherwise the numpy
implementation is loaded. Set ``DRSTAGE_PURE_PYTHON=1`` to force the
fallback. ``BACKEND`` names the active implementation.
"""
import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("DRSTAGE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

black_row_bounds = _impl.black_row_bounds
resize_bilinear = _impl.resize_bilinear
hue_shift = _impl.hue_shift
rank_sum_null_counts = _impl.rank_sum_null_counts

__all__ = [
    "BACKEND",
    "black_row_bounds",
    "compiled_backend",
    "hue_shift",
    "python_backend",
    "rank_sum_null_counts",
    "resize_bilinear",
]
