"""Kernel backend selection.

The compiled Cython core is used when it was built and ``SEGPROP_PURE_PYTHON``
is unset; otherwise the numpy implementation is used. Both expose
``compose_step``, ``bounds_check``, ``gather``, ``splat`` and ``block_match``.
"""
import os

from . import _kernels_py as python_backend

compiled_backend = None
if not os.environ.get("SEGPROP_PURE_PYTHON"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND_NAME = "cython" if backend is compiled_backend else "python"

compose_step = backend.compose_step
bounds_check = backend.bounds_check
gather = backend.gather
splat = backend.splat
block_match = backend.block_match
