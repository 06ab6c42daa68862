"""Kernel backend selection.

The compiled extension is used when it imports; set
``POINTANOM_PURE_PYTHON=1`` to force the numpy fallback.  Both modules are
importable directly (``pyimpl`` always, ``cimpl`` when built) so they can be
compared side by side.
"""
import os

from . import _pyimpl as pyimpl

try:
    from . import _cimpl as cimpl
except ImportError:  # extension not built
    cimpl = None

if cimpl is not None and os.environ.get("POINTANOM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    backend = cimpl
    BACKEND = "cython"
else:
    backend = pyimpl
    BACKEND = "python"

__all__ = ["backend", "BACKEND", "pyimpl", "cimpl"]
