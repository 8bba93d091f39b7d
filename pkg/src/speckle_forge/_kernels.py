"""Kernel backend selection.

Imports the compiled extension when available, otherwise falls back to the
pure-NumPy implementation. Set SPECKLE_FORGE_PURE=1 to force the fallback
(used by the benchmark and the backend-agreement tests). Both backends
return bit-identical results.
"""
from __future__ import annotations

import os

from . import _kernels_py

_force_pure = os.environ.get("SPECKLE_FORGE_PURE", "").strip() not in ("", "0")

if _force_pure:
    _impl = _kernels_py
else:
    try:
        from . import _speckle_kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

COMPILED = _impl is not _kernels_py

warp_score = _impl.warp_score
backward_indices = _impl.backward_indices


def backend() -> str:
    return "compiled" if COMPILED else "pure"
