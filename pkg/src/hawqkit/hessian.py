"""Matrix-free curvature probing of one parameter block at a time.

Hessian-vector products come from double backprop: with g the block
gradient recorded on a differentiable tape, d(gᵀv)/dW = H v exactly because v
does not depend on W. Power iteration on that product gives the dominant
eigenpair; deflation gives the second one. A row-by-row dense Hessian is
available for small blocks as a test oracle.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConvergenceError, ShapeError
from .models import forward_loss

DEGENERATE_NORM = 1e-30
DENSE_LIMIT = 400
CONFIRM = 2  # consecutive sub-tolerance changes needed to stop


@dataclass
class ProbeConfig:
    max_iters: int = 20
    rel_tol: float = 1e-3
    seed: int = 0
    probe_batch: int = 1000

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.probe_batch < 1:
            raise ValueError("probe_batch must be positive")


@dataclass
class EigenEstimate:
    block: str
    lam: float
    eigenvector: np.ndarray
    iterations: int
    residual: float
    converged: bool = False
    degenerate: bool = False
    history: list = field(default_factory=list)

    def to_record(self):
        return {"block": self.block, "lambda": self.lam, "residual": self.residual,
                "iterations": self.iterations, "converged": self.converged,
                "degenerate": self.degenerate}


def probe_subset(dataset, cfg: ProbeConfig):
    """Fixed seeded subsample (kept in dataset order) used for every probe."""
    n = len(dataset)
    if cfg.probe_batch >= n:
        return dataset
    rng = np.random.default_rng(cfg.seed)
    return dataset.subset(np.sort(rng.choice(n, size=cfg.probe_batch, replace=False)))


def _xy(batch):
    if hasattr(batch, "features"):
        return batch.features, batch.labels
    return batch


def hvp(loss_fn, params, v):
    """H v for an arbitrary scalar ``loss_fn()`` over ``params``; two backprops."""
    loss = loss_fn()
    gm = T.backward(loss, params, create_graph=True)
    return T.grad_dot_v_backward(gm, params, v)


class BlockHessian:
    """The block-diagonal Hessian piece of one block on a fixed batch.

    ``backprops`` counts gradient passes over the batch (two per matvec).
    """

    def __init__(self, model, block, batch):
        self.model = model
        self.block = model.partition.block(block)
        self.params = model.block_params(block)
        self.x, self.y = _xy(batch)
        self.n = self.block.size
        self.backprops = 0

    def _loss(self):
        with self.model.full_precision():
            return forward_loss(self.model, self.x, self.y)

    def matvec(self, v):
        v = np.asarray(v, dtype=np.float64).ravel()
        if v.size != self.n:
            raise ShapeError(f"v has length {v.size}, block {self.block.name} has {self.n}")
        if not np.all(np.isfinite(v)):
            raise ValueError("v must be finite")
        self.backprops += 2
        return hvp(self._loss, self.params, v)

    __call__ = matvec


def hessian_matvec(model, block, v, probe_batch):
    """Exact H_block v on ``probe_batch`` (a Dataset or (features, labels))."""
    return BlockHessian(model, block, probe_batch).matvec(v)


def power_iteration_op(matvec, n, cfg: ProbeConfig, rng=None, start=None, name=""):
    """Power iteration on a symmetric operator given as a matvec callable.

    Stops when the relative change of the Rayleigh quotient stays below
    ``rel_tol`` for ``CONFIRM`` consecutive iterations, or after ``max_iters``
    products. A start nearly orthogonal to the top eigenvector lingers near
    the second eigenvalue, where a single small change looks like
    convergence. The reported eigenvalue is the signed Rayleigh quotient of
    the last iterate.
    """
    if n < 1:
        raise ValueError("empty block")
    if start is None:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        start = rng.standard_normal(n)
    v = np.asarray(start, dtype=np.float64)
    v = v / np.linalg.norm(v)
    history = []
    lam_prev = None
    calm = 0
    converged = False
    for it in range(1, cfg.max_iters + 1):
        hv = matvec(v)
        nrm = float(np.linalg.norm(hv))
        if nrm < DEGENERATE_NORM:
            return EigenEstimate(name, 0.0, v, it, 0.0, converged=True, degenerate=True,
                                 history=history + [0.0])
        lam = float(v @ hv)
        history.append(lam)
        residual = float(np.linalg.norm(hv - lam * v))
        # an exact eigenvector (e.g. an isotropic Hessian) needs no second product
        if residual <= 1e-12 * max(abs(lam), 1.0):
            converged = True
            break
        if lam_prev is not None and abs(lam - lam_prev) / max(abs(lam), 1e-12) < cfg.rel_tol:
            calm += 1
            if calm >= CONFIRM:
                converged = True
                break
        else:
            calm = 0
        if it == cfg.max_iters:
            break
        lam_prev = lam
        v = hv / nrm
    return EigenEstimate(name, lam, v, it, residual, converged=converged, history=history)


def block_seed(cfg: ProbeConfig, index: int):
    return np.random.default_rng([cfg.seed, index])


def power_iteration(model, block, cfg: ProbeConfig, batch):
    """Top eigenpair of the block Hessian on ``batch``."""
    op = BlockHessian(model, block, batch)
    idx = model.partition.index(op.block.name)
    est = power_iteration_op(op.matvec, op.n, cfg, rng=block_seed(cfg, idx), name=op.block.name)
    est.backprops = op.backprops
    return est


def deflate(matvec, top: EigenEstimate):
    v1, lam1 = top.eigenvector, top.lam

    def deflated(v):
        return matvec(v) - lam1 * (v1 @ v) * v1

    return deflated


def second_eigenpair_op(matvec, top: EigenEstimate, cfg: ProbeConfig, rng=None):
    """Second eigenpair by power iteration on v -> Hv - λ₁(v₁ᵀv)v₁.

    Iterates are re-orthogonalized against v₁ to keep rounding from
    reintroducing the top direction.
    """
    if top.degenerate:
        raise ConvergenceError(f"block {top.block}: top eigenpair is degenerate")
    if not top.residual < 1e-2 * abs(top.lam):
        raise ConvergenceError(
            f"block {top.block}: top eigenpair not converged (residual {top.residual:.3g})")
    v1 = top.eigenvector
    base = deflate(matvec, top)

    def op(v):
        v = v - (v1 @ v) * v1
        out = base(v)
        return out - (v1 @ out) * v1

    rng = rng if rng is not None else np.random.default_rng(cfg.seed + 1)
    start = rng.standard_normal(v1.size)
    start -= (v1 @ start) * v1
    est = power_iteration_op(op, v1.size, cfg, start=start, name=top.block)
    v = est.eigenvector - (v1 @ est.eigenvector) * v1
    est.eigenvector = v / np.linalg.norm(v)
    return est


def second_eigenpair(model, block, top: EigenEstimate, cfg: ProbeConfig, batch):
    op = BlockHessian(model, block, batch)
    idx = model.partition.index(op.block.name)
    rng = np.random.default_rng([cfg.seed, idx, 2])
    return second_eigenpair_op(op.matvec, top, cfg, rng=rng)


def dense_hessian_oracle(model, block, probe_batch):
    """Explicit block Hessian, one row per scalar gradient component.

    Differentiates each g_j separately instead of contracting with v, so it
    checks :func:`hessian_matvec` along a different path.
    """
    b = model.partition.block(block)
    if b.size > DENSE_LIMIT:
        raise ValueError(f"block {b.name} has {b.size} parameters; dense oracle limit is {DENSE_LIMIT}")
    params = model.block_params(block)
    x, y = _xy(probe_batch)
    with model.full_precision():
        loss = forward_loss(model, x, y)
    grads = T.grad(loss, params, create_graph=True)
    rows = []
    for g in grads:
        for j in range(g.size):
            if not g.requires_grad:
                rows.append(np.zeros(b.size))
                continue
            hrow = T.grad(T.pick(g, j), params)
            rows.append(np.concatenate([h.data.ravel() for h in hrow]))
    return np.vstack(rows)


def probe_all(model, dataset, cfg: ProbeConfig, second=False):
    """Top (and optionally second) eigenpair of every block on the probe subset."""
    batch = probe_subset(dataset, cfg)
    tops, seconds = [], []
    for i, b in enumerate(model.partition):
        top = power_iteration(model, i, cfg, batch)
        tops.append(top)
        if second:
            seconds.append(second_eigenpair(model, i, top, cfg, batch))
    return (tops, seconds) if second else tops
