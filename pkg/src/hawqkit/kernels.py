"""Kernel backend selection.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is used. Set ``HAWQKIT_PURE=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("HAWQKIT_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

im2col = _impl.im2col
col2im = _impl.col2im
quantize_symmetric = _impl.quantize_symmetric
quantize_sign = _impl.quantize_sign
clip_mask = _impl.clip_mask
out_size = _pykernels.out_size

__all__ = ["BACKEND", "im2col", "col2im", "quantize_symmetric", "quantize_sign",
           "clip_mask", "out_size"]
