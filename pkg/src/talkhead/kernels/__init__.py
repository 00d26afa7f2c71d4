"""Hot-loop kernels with a compiled backend and a pure-Python fallback.

The Cython extension is used when it was built; set ``TALKHEAD_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active implementation.
"""
import os

from . import _pykernels

if os.environ.get("TALKHEAD_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

pitch_track = _impl.pitch_track
draw_segments = _impl.draw_segments

__all__ = ["BACKEND", "pitch_track", "draw_segments"]
