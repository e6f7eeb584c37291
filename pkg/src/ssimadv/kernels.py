"""Convolution kernel dispatch.

The compiled extension is used when it imports; otherwise (or when
``SSIMADV_PURE_PYTHON=1`` is set) the numpy implementation is used.  Both are
importable side by side through :func:`get_backend` for benchmarking.
"""

import os
from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def get_backend(name: str) -> ModuleType:
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    return ["cython", "python"] if _ckernels is not None else ["python"]


if _ckernels is not None and os.environ.get("SSIMADV_PURE_PYTHON", "") not in ("1", "true"):
    BACKEND = "cython"
else:
    BACKEND = "python"

_active = get_backend(BACKEND)
conv2d_forward = _active.conv2d_forward
conv2d_backward_input = _active.conv2d_backward_input
conv2d_backward_weight = _active.conv2d_backward_weight
