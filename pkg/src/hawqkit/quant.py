"""Symmetric uniform k-bit quantization and straight-through fake-quant.

For k >= 2 the level set is {-L..L}·s with L = 2^(k-1) - 1 and
s = clip_max / L; for k = 1 it is {-s, +s} with s = clip_max (a scaled sign
function, sign(0) = +1). Rounding is half away from zero, so Q is odd.
Bit widths of 32 or more bypass quantization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import NonFiniteError
from .tensor import Tensor, _record, mul_const

CLIP_FLOOR = 1e-12
BYPASS_BITS = 32


def levels_for(bits: int) -> int:
    return 1 if bits == 1 else 2 ** (bits - 1) - 1


@dataclass(frozen=True)
class Quantizer:
    bits: int
    clip_max: float

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < 1:
            raise ValueError(f"bits must be a positive integer, got {self.bits}")
        if not self.clip_max > 0:
            raise ValueError(f"clip_max must be positive, got {self.clip_max}")

    @property
    def bypass(self) -> bool:
        return self.bits >= BYPASS_BITS

    @property
    def levels(self) -> int:
        return levels_for(self.bits)

    @property
    def scale(self) -> float:
        return self.clip_max / self.levels

    def grid(self) -> np.ndarray:
        """All representable values, ascending (k < 32 only)."""
        if self.bits == 1:
            return np.array([-self.scale, self.scale])
        return np.arange(-self.levels, self.levels + 1) * self.scale

    def __call__(self, z):
        return quantize(z, self)


def fit_weight_quantizer(w, bits) -> Quantizer:
    """Max-abs range: clip_max = max|w| floored at 1e-12.

    ``w`` may be an array or a sequence of arrays (all tensors of a block
    share one quantizer).
    """
    parts = [np.asarray(w, dtype=np.float64)] if isinstance(w, np.ndarray) or np.isscalar(w) \
        else [np.asarray(a, dtype=np.float64) for a in w]
    flat = np.concatenate([p.ravel() for p in parts]) if parts else np.zeros(0)
    if flat.size == 0:
        raise ValueError("cannot fit a quantizer to an empty tensor")
    finite = flat[np.isfinite(flat)]
    if finite.size == 0:
        raise NonFiniteError("cannot fit a quantizer: no finite values")
    return Quantizer(int(bits), max(float(np.abs(finite).max()), CLIP_FLOOR))


def quantize(z, q: Quantizer) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if q.bypass:
        return z.copy()
    if q.bits == 1:
        return kernels.quantize_sign(z, q.scale)
    return kernels.quantize_symmetric(z, q.scale, float(q.levels))


def quant_perturbation(w, bits=None, quantizer=None) -> float:
    """Σ (Q(w) - w)² with a max-abs quantizer fitted at ``bits`` unless one
    is given."""
    parts = [w] if isinstance(w, np.ndarray) or np.isscalar(w) else list(w)
    parts = [np.asarray(p, dtype=np.float64) for p in parts]
    if quantizer is None:
        quantizer = fit_weight_quantizer(parts, bits)
    return float(sum(np.sum((quantize(p, quantizer) - p) ** 2) for p in parts))


def ste_mask(z, q: Quantizer) -> np.ndarray:
    """1 where the straight-through gradient passes (|z| <= clip_max), else 0."""
    if q.bypass:
        return np.ones(np.shape(z))
    return kernels.clip_mask(np.asarray(z, dtype=np.float64), q.clip_max)


def fake_quant(x: Tensor, q: Quantizer) -> Tensor:
    """Forward Q(x); backward passes the gradient through inside the clip
    range and zeroes it outside."""
    if q.bypass:
        return x
    mask = ste_mask(x.data, q)

    def bw(g, needs):
        return (mul_const(g, mask),)

    return _record(quantize(x.data, q), (x,), "fake_quant", bw)


class ActQuantState:
    """Running min/max of one activation site (EMA, momentum 0.99)."""

    def __init__(self, bits, momentum=0.99):
        self.bits = int(bits)
        self.momentum = momentum
        self.min = None
        self.max = None
        self.numel = 0
        self.calibrated = False

    def observe(self, z):
        lo, hi = float(np.min(z)), float(np.max(z))
        if self.min is None:
            self.min, self.max = lo, hi
        else:
            m = self.momentum
            self.min = m * self.min + (1 - m) * lo
            self.max = m * self.max + (1 - m) * hi
        self.numel = int(np.prod(np.shape(z)[1:]))

    def finish(self):
        if self.min is None:
            raise RuntimeError("activation site saw no data during calibration")
        self.calibrated = True

    def quantizer(self) -> Quantizer:
        if not self.calibrated:
            raise RuntimeError("activation quantizer used before calibration")
        return Quantizer(self.bits, max(abs(self.min), abs(self.max), CLIP_FLOOR))

    def to_dict(self):
        return {"bits": self.bits, "min": self.min, "max": self.max,
                "numel": self.numel, "calibrated": self.calibrated}
