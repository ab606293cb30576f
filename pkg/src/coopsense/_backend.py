"""Kernel backend selection.

The compiled ``_kernels`` extension is used when importable; otherwise, or when
``COOPSENSE_PURE_PYTHON`` is set to a non-empty value, the numpy path is used.
"""

import os

from . import _pykernels

python_kernels = _pykernels

try:
    from . import _kernels as compiled_kernels
except ImportError:  # extension not built
    compiled_kernels = None

if compiled_kernels is not None and not os.environ.get("COOPSENSE_PURE_PYTHON"):
    kernels = compiled_kernels
    BACKEND = "cython"
else:
    kernels = _pykernels
    BACKEND = "python"

NO_HIT = _pykernels.NO_HIT
GROUND_HIT = _pykernels.GROUND_HIT


def available_backends():
    out = {"python": _pykernels}
    if compiled_kernels is not None:
        out["cython"] = compiled_kernels
    return out
