"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy twins.
Set ``TWMA_KERNELS=python`` to force the fallback (e.g. for benchmarking).
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels

_FUNCS = ("col2im", "maxpool_forward", "maxpool_backward", "lasso_cd", "filter_rule", "rasterize")


def _load_compiled() -> ModuleType | None:
    if os.environ.get("TWMA_KERNELS", "").lower() == "python":
        return None
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()
backend = _compiled if _compiled is not None else _pykernels
BACKEND_NAME = "cython" if _compiled is not None else "python"


def get_backend(name: str | None = None) -> ModuleType:
    """Return a kernel module by name (``"cython"`` / ``"python"``), default the active one."""
    if name is None:
        return backend
    if name == "python":
        return _pykernels
    if name == "cython":
        if _compiled is None:
            from . import _ckernels  # raises ImportError with the real reason
            return _ckernels
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def compiled_available() -> bool:
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


col2im = backend.col2im
maxpool_forward = backend.maxpool_forward
maxpool_backward = backend.maxpool_backward
lasso_cd = backend.lasso_cd
filter_rule = backend.filter_rule
rasterize = backend.rasterize
