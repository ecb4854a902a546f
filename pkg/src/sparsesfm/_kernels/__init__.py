"""Kernel backend selection.

The compiled extension is preferred when it imports; the numpy fallback is
always available. Selection can be forced with SPARSESFM_BACKEND=cython|numpy
(anything else means auto). SPARSESFM_WORKERS caps the worker count used by
the compiled kernels; both backends produce bit-identical output for any
worker count because every output block is summed in a fixed order by a
single owner.
"""

import os

from . import numpy_backend

try:
    from . import cy_backend
    _HAVE_CYTHON = True
except ImportError:
    cy_backend = None
    _HAVE_CYTHON = False


def available_backends():
    names = ["numpy"]
    if _HAVE_CYTHON:
        names.insert(0, "cython")
    return names


def get_backend(name: str | None = None):
    if name is None:
        name = os.environ.get("SPARSESFM_BACKEND", "auto").lower()
    if name == "numpy":
        return numpy_backend
    if name == "cython":
        if not _HAVE_CYTHON:
            raise ImportError("compiled kernel extension is not available")
        return cy_backend
    return cy_backend if _HAVE_CYTHON else numpy_backend


def backend_name() -> str:
    return "cython" if get_backend() is cy_backend and cy_backend is not None else "numpy"


def worker_count() -> int:
    raw = os.environ.get("SPARSESFM_WORKERS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return n
