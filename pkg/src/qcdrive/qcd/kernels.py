"""Detector inner loops, compiled when available.

The Cython extension ``_ckernels`` is used unless it failed to build or
``QCDRIVE_PURE_PYTHON=1`` is set, in which case the NumPy fallback in
``_pykernels`` is loaded. ``BACKEND`` names the active implementation.
"""

import os

from . import _pykernels as python_kernels

compiled_kernels = None
if os.environ.get("QCDRIVE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_kernels
    except ImportError:  # extension not built
        compiled_kernels = None

_impl = compiled_kernels if compiled_kernels is not None else python_kernels
BACKEND = "cython" if compiled_kernels is not None else "python"

cusum_run = _impl.cusum_run
mcusum_run = _impl.mcusum_run
glrt_run = _impl.glrt_run
glrt_value = _impl.glrt_value
cusum_batch = _impl.cusum_batch
