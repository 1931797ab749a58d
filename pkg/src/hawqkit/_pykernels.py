"""Pure numpy implementations of the hot kernels.

These are the reference versions; the Cython module ``_ckernels`` must agree
with them bit-for-bit (same accumulation order in ``col2im``).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """(N, C, H, W) -> (N*OH*OW, C*kh*kw), rows ordered (n, oh, ow)."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    # (n, c, oh, ow, kh, kw) -> (n, oh, ow, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back into an image."""
    n, c, h, w = x_shape
    oh = out_size(h, kh, stride, pad)
    ow = out_size(w, kw, stride, pad)
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def quantize_symmetric(z, scale, levels):
    """clip(round_half_away(z / scale), -levels, levels) * scale."""
    q = z / scale
    q = np.copysign(np.floor(np.abs(q) + 0.5), q)
    np.clip(q, -levels, levels, out=q)
    return q * scale


def quantize_sign(z, scale):
    return np.where(z >= 0, scale, -scale)


def clip_mask(z, clip_max):
    return (np.abs(z) <= clip_max).astype(np.float64)
