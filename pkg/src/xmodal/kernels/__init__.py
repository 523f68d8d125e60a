"""Hot kernels: k-NN search, nearest-codeword lookup, ray casting.

The compiled core is used when it was built; otherwise the numpy fallback.
``XMODAL_PURE_PYTHON=1`` forces the fallback. ``BACKEND`` names the choice.
"""
import os

from . import _fallback

if os.environ.get("XMODAL_PURE_PYTHON"):
    _impl = _fallback
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _fallback

BACKEND = "compiled" if _impl is not _fallback else "numpy"

knn = _impl.knn
nearest_codeword = _impl.nearest_codeword
raycast = _impl.raycast

__all__ = ["BACKEND", "knn", "nearest_codeword", "raycast"]
