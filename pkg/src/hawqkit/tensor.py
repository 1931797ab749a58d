"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every backward rule is written with the same differentiable ops as the
forward pass. With ``create_graph=True`` the gradient computation is
recorded like any other computation and can be differentiated again, which is
what exact Hessian-vector products need.

The graph is define-by-run: each non-leaf tensor keeps the :class:`Node` that
produced it. :class:`Tape` is the topologically ordered trace of that graph.
"""
from __future__ import annotations

import contextlib
from collections.abc import Mapping
from dataclasses import dataclass, field

import math

import numpy as np

from . import kernels
from .errors import NonFiniteError, ShapeError, TapeError

_state = {"grad_enabled": True}


@contextlib.contextmanager
def grad_mode(enabled: bool):
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = enabled
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def no_grad():
    return grad_mode(False)


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


class Node:
    """One recorded op: kind, inputs and a rule mapping the output
    cotangent to input cotangents."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def backward(self, create_graph=False):
        return backward(self, create_graph=create_graph)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


_reduce_add = np.add.reduce


def _record(out_data, inputs, op, backward_fn):
    # one reduction; the elementwise test only runs if the sum is not finite
    if not math.isfinite(_reduce_add(out_data, None)) and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor(out_data)
    if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def _sum_to_array(arr, shape):
    shape = tuple(shape)
    if arr.shape == shape:
        return arr
    lead = arr.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and arr.shape[i + lead] != 1)
    return arr.sum(axis=axes, keepdims=True).reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- primitive ops ----------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return _record(a.data + b.data, (a, b), "add", bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(scale(g, -1.0), b.shape) if needs[1] else None)

    return _record(a.data - b.data, (a, b), "sub", bw)


def mul(a, b):
    """Elementwise product with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return _record(a.data * b.data, (a, b), "mul", bw)


def scale(a, c):
    """Multiply by a Python scalar."""
    c = float(c)

    def bw(g, needs):
        return (scale(g, c),)

    return _record(a.data * c, (a,), "scale", bw)


def mul_const(a, arr):
    """Multiply by a constant array (masks); no gradient flows to ``arr``."""
    arr = np.asarray(arr, dtype=np.float64)

    def bw(g, needs):
        return (sum_to(mul_const(g, arr), a.shape),)

    return _record(a.data * arr, (a,), "mul_const", bw)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g, needs):
        return (matmul(g, transpose(b, None)) if needs[0] else None,
                matmul(transpose(a, None), g) if needs[1] else None)

    return _record(a.data @ b.data, (a, b), "matmul", bw)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g, needs):
        return (transpose(g, inv),)

    return _record(np.transpose(a.data, axes), (a,), "transpose", bw)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    src = a.shape

    def bw(g, needs):
        return (reshape(g, src),)

    return _record(out, (a,), "reshape", bw)


def flatten(a):
    """Batch-flatten: (N, ...) -> (N, prod(...))."""
    return reshape(a, (a.shape[0], -1))


def tsum(a, axis=None, keepdims=False):
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, needs):
        if axis is not None and not keepdims:
            ax = (axis,) if np.isscalar(axis) else tuple(axis)
            ax = tuple(x % len(src) for x in ax)
            kshape = tuple(1 if i in ax else s for i, s in enumerate(src))
            g = reshape(g, kshape)
        return (broadcast_to(g, src),)

    return _record(np.asarray(out), (a,), "sum", bw)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        ax = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[x] for x in ax]))
    if count == 0:
        raise ShapeError("mean of an empty tensor")
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def broadcast_to(a, shape):
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {src} -> {shape}") from None

    def bw(g, needs):
        return (sum_to(g, src),)

    return _record(np.ascontiguousarray(out), (a,), "broadcast_to", bw)


def sum_to(a, shape):
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape

    def bw(g, needs):
        return (broadcast_to(g, src),)

    return _record(_sum_to_array(a.data, shape), (a,), "sum_to", bw)


def pick(a, index):
    """Scalar element ``a.ravel()[index]``."""
    src = a.shape

    def bw(g, needs):
        return (embed(g, src, index),)

    return _record(np.asarray(a.data.ravel()[index]), (a,), "pick", bw)


def embed(g, shape, index):
    """Tensor of ``shape`` that is zero except ``g`` at flat ``index``."""
    out = np.zeros(int(np.prod(shape)))
    out[index] = g.data
    shape = tuple(shape)

    def bw(h, needs):
        return (pick(h, index),)

    return _record(out.reshape(shape), (g,), "embed", bw)


def relu(a):
    # derivative at 0 is 0; second derivative is 0 everywhere
    mask = (a.data > 0).astype(np.float64)

    def bw(g, needs):
        return (mul_const(g, mask),)

    return _record(a.data * mask, (a,), "relu", bw)


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    box = []

    def bw(g, needs):
        out = box[0]
        sg = mul(out, g)
        return (sub(sg, mul(out, tsum(sg, axis=axis, keepdims=True))),)

    out = _record(s, (a,), "softmax", bw)
    box.append(out)
    return out


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross-entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if n == 0:
        raise ShapeError("cross-entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    labels = labels.astype(np.int64)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    loss = np.mean(lse - z[np.arange(n), labels])
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0

    def bw(g, needs):
        d = scale(sub(softmax(logits, axis=1), onehot), 1.0 / n)
        return (mul(g, d),)

    return _record(np.asarray(loss), (logits,), "softmax_cross_entropy", bw)


def im2col(x, kh, kw, stride=1, pad=0):
    xs = x.shape

    def bw(g, needs):
        return (col2im(g, xs, kh, kw, stride, pad),)

    data = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, stride, pad)
    return _record(data, (x,), "im2col", bw)


def col2im(cols, x_shape, kh, kw, stride=1, pad=0):
    x_shape = tuple(x_shape)

    def bw(g, needs):
        return (im2col(g, kh, kw, stride, pad),)

    data = kernels.col2im(np.ascontiguousarray(cols.data), x_shape, kh, kw, stride, pad)
    return _record(data, (cols,), "col2im", bw)


def conv2d(x, w, b=None, stride=1, pad=0):
    """x: (N, C, H, W), w: (F, C, kh, kw), b: (F,)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {w.shape}")
    n, _, h, wd = x.shape
    f, c, kh, kw = w.shape
    oh = kernels.out_size(h, kh, stride, pad)
    ow = kernels.out_size(wd, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    cols = im2col(x, kh, kw, stride, pad)
    out = matmul(cols, transpose(reshape(w, (f, c * kh * kw)), None))
    if b is not None:
        out = add(out, b)
    return transpose(reshape(out, (n, oh, ow, f)), (0, 3, 1, 2))


def global_avg_pool(x):
    return mean(x, axis=(2, 3))


# -- differentiation ----------------------------------------------------------

def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in reversed(t.node.inputs):
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def grad(output, inputs, grad_output=None, create_graph=False):
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    Inputs that ``output`` does not depend on get a zero gradient.
    """
    inputs = list(inputs)
    if not output.requires_grad:
        return [Tensor(np.zeros(t.shape)) for t in inputs]
    if grad_output is None:
        if output.size != 1:
            raise ShapeError("grad of a non-scalar output needs grad_output")
        grad_output = Tensor(np.ones(output.shape))
    order = _topo(output)
    want = {id(t) for t in inputs}
    # only nodes with a path to some requested input need a backward rule
    needed = {}
    for t in order:
        hit = id(t) in want
        if not hit and t.node is not None:
            hit = any(needed.get(id(i), False) for i in t.node.inputs)
        needed[id(t)] = hit

    grads = {id(output): grad_output}
    found = {}
    with grad_mode(create_graph):
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if id(t) in want:
                found[id(t)] = g
            node = t.node
            if node is None or not needed[id(t)]:
                continue
            needs = tuple(i.requires_grad and needed.get(id(i), False) for i in node.inputs)
            for inp, gi, nd in zip(node.inputs, node.backward_fn(g, needs), needs):
                if gi is None or not nd:
                    continue
                k = id(inp)
                grads[k] = add(grads[k], gi) if k in grads else gi
    return [found.get(id(t), Tensor(np.zeros(t.shape))) for t in inputs]


class GradientMap(Mapping):
    """Parameter tensor -> gradient tensor, keyed by tensor identity."""

    def __init__(self, params, grads, differentiable):
        self._params = {id(p): p for p in params}
        self._grads = {id(p): g for p, g in zip(params, grads)}
        self.differentiable = differentiable
        for p, g in zip(params, grads):
            assert g.shape == p.shape

    def __getitem__(self, param):
        return self._grads[id(param)]

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._grads)

    def __contains__(self, param):
        return id(param) in self._grads


def leaves(output):
    """Trainable leaf tensors reachable from ``output`` in graph order."""
    return [t for t in _topo(output) if t.node is None and t.requires_grad]


def backward(loss, params=None, create_graph=False):
    """Gradient of a scalar loss for ``params`` (default: every trainable leaf).

    With ``create_graph=True`` the returned gradients carry their own graph.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise TapeError("loss is not on the tape (nothing requires grad)")
    params = leaves(loss) if params is None else list(params)
    return GradientMap(params, grad(loss, params, create_graph=create_graph), create_graph)


def grad_dot_v_backward(grad_map, block_params, v):
    """H v for the block: differentiate g_blockᵀ v with respect to the block.

    ``v`` is a flat vector over the block's parameters in order. Returns a
    flat numpy array of the same length.
    """
    block_params = list(block_params)
    v = np.asarray(v, dtype=np.float64).ravel()
    n = sum(p.size for p in block_params)
    if v.size != n:
        raise ShapeError(f"v has length {v.size}, block has {n} parameters")
    if not grad_map.differentiable:
        raise TapeError("gradient tape is not differentiable; use create_graph=True")
    gv, off = None, 0
    for p in block_params:
        g = grad_map[p]
        piece = v[off:off + p.size].reshape(p.shape)
        off += p.size
        if not g.requires_grad:
            continue
        term = tsum(mul_const(g, piece))
        gv = term if gv is None else add(gv, term)
    if gv is None:
        return np.zeros(n)
    hv = grad(gv, block_params)
    return np.concatenate([h.data.ravel() for h in hv])


@dataclass
class Tape:
    """Topologically ordered trace of the graph that produced ``outputs``."""

    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    @classmethod
    def trace(cls, *outputs):
        order, seen = [], set()
        for out in outputs:
            for t in _topo(out):
                if t.node is not None and id(t) not in seen:
                    seen.add(id(t))
                    order.append(t)
        return cls(nodes=order, outputs=list(outputs))

    def ops(self):
        return [t.node.op for t in self.nodes]

    def is_topological(self):
        pos = {id(t): i for i, t in enumerate(self.nodes)}
        return all(pos.get(id(i), -1) < pos[id(t)]
                   for t in self.nodes for i in t.node.inputs)
