"""Kernel dispatch: compiled Cython core when built, numpy fallback otherwise.

Set ``UCRANK_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

fallback = _fallback

if os.environ.get("UCRANK_PURE_PYTHON"):
    compiled = None
else:
    try:
        from . import _kernels as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else _fallback
BACKEND = "cython" if compiled is not None else "python"

mix64 = _impl.mix64
hash_slots = _impl.hash_slots
stream_key = _impl.stream_key
reservoir_indices = _impl.reservoir_indices
adagrad_rows = _impl.adagrad_rows
local_moves = _impl.local_moves
