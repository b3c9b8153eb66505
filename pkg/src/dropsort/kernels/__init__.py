"""Convolution kernel backends.

The compiled extension is preferred when it imported cleanly; the numpy
implementation is the fallback. DROPSORT_BACKEND forces the choice:
"compiled" (fail hard if unavailable), "python", or unset/"auto".
"""

import os

from . import pyconv

_requested = os.environ.get("DROPSORT_BACKEND", "auto").strip().lower()

if _requested in ("", "auto", "compiled"):
    try:
        from . import _convblas as _impl
        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "DROPSORT_BACKEND=compiled but the _convblas extension "
                "is not built; reinstall the package or unset the variable"
            )
        _impl = pyconv
        BACKEND = "python"
elif _requested == "python":
    _impl = pyconv
    BACKEND = "python"
else:
    raise ValueError(f"unknown DROPSORT_BACKEND value: {_requested!r}")

conv2d = _impl.conv2d
conv2d_dw = _impl.conv2d_dw

__all__ = ["BACKEND", "conv2d", "conv2d_dw", "pyconv"]
