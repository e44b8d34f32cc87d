"""Convolution kernel backend selection.

The compiled Cython extension is preferred when it imports cleanly; the
pure-numpy kernels are the fallback. The choice is made once at import
and can be forced with the environment variable ``TILECHANGE_KERNELS``
set to ``numpy``, ``compiled``, or ``auto`` (default).
"""

from __future__ import annotations

import os

from ..errors import DomainError
from . import kernels_np


def _load_compiled():
    from . import _convkern  # noqa: PLC0415  (deferred: optional extension)

    return _convkern


def select_kernels(name: str | None = None):
    """Return the kernel module for `name` ('auto', 'numpy', 'compiled')."""
    name = (name or os.environ.get("TILECHANGE_KERNELS", "auto")).lower()
    if name == "numpy":
        return kernels_np
    if name == "compiled":
        return _load_compiled()
    if name == "auto":
        try:
            return _load_compiled()
        except ImportError:
            return kernels_np
    raise DomainError(f"unknown kernel backend {name!r}")


kernels = select_kernels()


def active_backend() -> str:
    return kernels.NAME
