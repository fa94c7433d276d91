"""Frequency-domain analysis of adversarial robustness on a small autodiff core.

Subpackages are imported lazily by the user; the top level only exposes the
version and the kernel backend switch.
"""
__version__ = "0.1.0"

from .kernels import available_backends, backend, set_backend, use_backend  # noqa: E402

__all__ = ["__version__", "available_backends", "backend", "set_backend", "use_backend"]
