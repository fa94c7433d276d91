"""Backend selection for the hot convolution/pooling kernels.

The compiled Cython module is used when it imports; otherwise the numpy
implementation takes over. Set ``SRLAB_PURE_PYTHON=1`` to force the fallback.
"""
import os
from contextlib import contextmanager

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if _ckernels is not None and not os.environ.get("SRLAB_PURE_PYTHON"):
    _active = "cython"
else:
    _active = "python"


def available_backends():
    return sorted(_BACKENDS)


def backend():
    return _active


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    _active = name


@contextmanager
def use_backend(name):
    prev = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _c(a):
    return np.ascontiguousarray(a)


def conv2d_forward(x, w, b, pad):
    return _BACKENDS[_active].conv2d_forward(_c(x), _c(w), _c(b), int(pad))


def conv2d_backward(x, w, gout, pad, need_dx=True, need_dw=True):
    return _BACKENDS[_active].conv2d_backward(
        _c(x), _c(w), _c(gout), int(pad), bool(need_dx), bool(need_dw)
    )


def maxpool2_forward(x):
    return _BACKENDS[_active].maxpool2_forward(_c(x))


def maxpool2_backward(gout, idx, H, W):
    return _BACKENDS[_active].maxpool2_backward(_c(gout), _c(idx), int(H), int(W))
