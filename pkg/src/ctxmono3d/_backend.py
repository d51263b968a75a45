"""Select the kernel implementation at import time.

Set ``CTXMONO3D_PURE_PYTHON=1`` to force the pure-Python kernels.
"""
import os

from . import _kernels_py

if os.environ.get("CTXMONO3D_PURE_PYTHON", "").lower() in ("1", "true", "yes"):
    kernels = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels
        BACKEND = "cython"
    except ImportError:
        kernels = _kernels_py
        BACKEND = "python"

__all__ = ["kernels", "BACKEND"]
