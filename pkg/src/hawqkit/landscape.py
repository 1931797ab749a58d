"""Loss along the dominant Hessian eigenvectors of one block.

Only the chosen block moves: W_i + ε₁·v₁ (+ ε₂·v₂). Directions are used as
unit vectors. Losses are evaluated on the probe batch in full precision and
the block's weights are restored bit-for-bit afterwards. The activation
entering the block's forward unit does not depend on ε, so it is computed
once per scan.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from ._io import csv_text
from .errors import ShapeError

DEFAULT_GRID = np.linspace(-0.5, 0.5, 41)
ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class LandscapeSample:
    block: str
    eps1: float
    eps2: float
    loss: float


def _unit(v, n, what):
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != n:
        raise ShapeError(f"{what} has {v.size} entries, block has {n} parameters")
    norm = np.linalg.norm(v)
    if not norm > 0:
        raise ValueError(f"{what} must be non-zero")
    return v / norm


def _grid(grid):
    g = np.asarray(DEFAULT_GRID if grid is None else grid, dtype=np.float64).ravel()
    if g.size == 0:
        raise ValueError("landscape grid is empty")
    return g


class _Scan:
    """Full-precision loss of ``model`` with one block moved off ``base``."""

    def __init__(self, model, block, x, y):
        self.model, self.block, self.y = model, block, y
        self.base = model.get_flat(block)
        self.saved = [t.data for t in model.block_params(block)]
        self.unit = model.unit_of(block)
        with T.no_grad():
            self.h = model.forward(x, stop=self.unit)

    def loss(self, delta):
        self.model.set_flat(self.block, self.base + delta)
        with T.no_grad():
            out = self.model.forward(self.h, start=self.unit)
            return T.softmax_cross_entropy(out, self.y).item()

    def restore(self):
        for t, d in zip(self.model.block_params(self.block), self.saved):
            t.data = d


@contextlib.contextmanager
def _scan(model, block, batch):
    x, y = batch
    with model.full_precision():
        sc = _Scan(model, block, x, y)
        try:
            yield sc
        finally:
            sc.restore()


def landscape_1d(model, block, v1, batch, grid=None):
    """Loss at W_i + ε·v₁ for each ε in ``grid``."""
    b = model.partition.block(block)
    v1 = _unit(v1, b.size, "v1")
    grid = _grid(grid)
    with _scan(model, block, batch) as sc:
        return [LandscapeSample(b.name, float(e), 0.0, sc.loss(e * v1)) for e in grid]


def landscape_2d(model, block, v1, v2, batch, grid=None, grid2=None):
    """Loss over the ε₁ × ε₂ grid, row-major in ε₁."""
    b = model.partition.block(block)
    v1 = _unit(v1, b.size, "v1")
    v2 = _unit(v2, b.size, "v2")
    if abs(float(v1 @ v2)) > ORTHO_TOL:
        raise ValueError(f"directions are not orthogonal (|v1·v2| = {abs(float(v1 @ v2)):.3g})")
    g1 = _grid(grid)
    g2 = g1 if grid2 is None else _grid(grid2)
    with _scan(model, block, batch) as sc:
        return [LandscapeSample(b.name, float(e1), float(e2), sc.loss(e1 * v1 + e2 * v2))
                for e1 in g1 for e2 in g2]


def curvature_along(model, block, v, batch, h=(1e-6, 5e-7, 2.5e-7)):
    """Central second difference (L(h) - 2L(0) + L(-h)) / h² along unit ``v``.

    ReLU kinks inside the stencil add curvature the autodiff Hessian does not
    see, so with several step sizes the median second difference is returned.
    """
    steps = np.atleast_1d(np.asarray(h, dtype=np.float64))
    if not np.all(steps > 0):
        raise ValueError("finite-difference steps must be positive")
    grid = np.concatenate([-steps, [0.0], steps])
    l = [s.loss for s in landscape_1d(model, block, v, batch, grid)]
    k = steps.size
    l0 = l[k]
    est = [(l[i] - 2.0 * l0 + l[k + 1 + i]) / (steps[i] * steps[i]) for i in range(k)]
    return float(np.median(est))


def to_csv(samples):
    return csv_text(["block", "eps1", "eps2", "loss"],
                    [[s.block, repr(s.eps1), repr(s.eps2), repr(s.loss)] for s in samples])
