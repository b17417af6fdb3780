"""Kernel backend selected at import.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``FLATNMPC_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import os

from flatnmpc import _pykernels


def get_backend(name: str | None = None):
    """Return a kernel module by name (``"cython"`` or ``"python"``)."""
    if name == "python":
        return _pykernels
    try:
        from flatnmpc import _ckernels
    except ImportError:
        if name == "cython":
            raise
        return _pykernels
    return _ckernels


backend = get_backend(os.environ.get("FLATNMPC_BACKEND") or None)
BACKEND = backend.NAME
