"""Small classifiers split into quantization blocks.

Two architectures: a ReLU MLP (for dense-Hessian oracle tests) and a
mini-resnet without normalization layers. Every model exposes its
parameters by name and a :class:`BlockPartition` that groups them into
blocks, plus hooks for weight and activation fake-quantization.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .quant import ActQuantState, Quantizer, fake_quant
from .tensor import Tensor


@dataclass(frozen=True)
class Block:
    name: str
    params: tuple
    size: int


@dataclass(frozen=True)
class BlockPartition:
    blocks: tuple

    def __post_init__(self):
        seen = set()
        for b in self.blocks:
            if b.size <= 0:
                raise ValueError(f"block {b.name} is empty")
            for p in b.params:
                if p in seen:
                    raise ValueError(f"parameter {p} appears in two blocks")
                seen.add(p)

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def __getitem__(self, i):
        return self.blocks[i]

    @property
    def names(self):
        return [b.name for b in self.blocks]

    @property
    def sizes(self):
        return [b.size for b in self.blocks]

    @property
    def total(self):
        return sum(self.sizes)

    def index(self, name):
        return self.names.index(name)

    def block(self, key):
        return self.blocks[key] if isinstance(key, (int, np.integer)) else self.blocks[self.index(key)]

    def block_of(self, param):
        for b in self.blocks:
            if param in b.params:
                return b.name
        raise KeyError(param)

    def to_dict(self):
        return [{"name": b.name, "params": list(b.params), "n": b.size} for b in self.blocks]


@dataclass
class ModelSpec:
    """``widths``: for ``mlp`` the layer widths [in, hidden..., classes]; for
    ``mini-resnet`` the channels [stem, stage_1, ..., stage_r]."""

    kind: str = "mlp"
    widths: list = field(default_factory=lambda: [4, 8, 3])
    input_shape: tuple = ()
    num_classes: int = 0
    granularity: str = ""
    strides: list = None

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if self.kind not in ("mlp", "mini-resnet"):
            raise ValueError(f"unsupported architecture {self.kind!r}")
        if any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        if self.kind == "mlp":
            if len(self.widths) < 2:
                raise ValueError("mlp needs at least [in, out] widths")
            self.input_shape = tuple(self.input_shape) or (self.widths[0],)
            self.num_classes = self.num_classes or self.widths[-1]
            self.granularity = self.granularity or "per-layer"
        else:
            if len(self.widths) < 3:
                raise ValueError("mini-resnet needs a stem and at least 2 residual blocks")
            self.input_shape = tuple(self.input_shape) or (1, 8, 8)
            if len(self.input_shape) != 3 or not self.num_classes:
                raise ValueError("mini-resnet needs input_shape (C, H, W) and num_classes")
            self.granularity = self.granularity or "per-residual-block"
            if self.strides is None:
                self.strides, h = [], self.input_shape[1]
                for prev, cur in zip(self.widths[:-1], self.widths[1:]):
                    s = 2 if cur != prev and h >= 4 else 1
                    self.strides.append(s)
                    h = (h + 1) // s if s == 2 else h
            if len(self.strides) != len(self.widths) - 1:
                raise ValueError("one stride per residual block required")
        if self.granularity not in ("per-layer", "per-residual-block"):
            raise ValueError(f"unknown granularity {self.granularity!r}")

    def to_dict(self):
        return {"kind": self.kind, "widths": list(self.widths), "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "granularity": self.granularity,
                "strides": list(self.strides) if self.strides is not None else None}


class Model:
    """Base: parameter store, partition and quantization hooks."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.partition: BlockPartition = None
        self.weight_quant: dict[str, Quantizer] = {}
        self.act_state: dict[str, ActQuantState] = {}
        self.act_quant = False
        self.calibrating = False
        self._param_block = {}

    # -- parameters -------------------------------------------------------
    def _add(self, name, array):
        self.params[name] = Tensor(array, requires_grad=True, name=name)

    def _finish(self, groups):
        blocks = tuple(Block(n, tuple(ps), int(sum(self.params[p].size for p in ps)))
                       for n, ps in groups)
        self.partition = BlockPartition(blocks)
        self._param_block = {p: b.name for b in blocks for p in b.params}

    def block_params(self, block):
        return [self.params[p] for p in self.partition.block(block).params]

    def get_flat(self, block) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.block_params(block)])

    def set_flat(self, block, vec):
        vec = np.asarray(vec, dtype=np.float64)
        off = 0
        for t in self.block_params(block):
            t.data = vec[off:off + t.size].reshape(t.shape).copy()
            off += t.size
        if off != vec.size:
            raise ValueError(f"vector of length {vec.size} for block of {off} parameters")

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            raise ValueError("state dict parameter names do not match the model")
        for k, arr in state.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = arr.copy()

    def clone(self):
        other = build_model(self.spec, seed=0)[0]
        other.load_state_dict(self.state_dict())
        other.weight_quant = dict(self.weight_quant)
        other.act_state = {k: _copy_act(v) for k, v in self.act_state.items()}
        other.act_quant = self.act_quant
        return other

    @property
    def num_params(self):
        return sum(t.size for t in self.params.values())

    # -- quantization hooks -----------------------------------------------
    def w(self, name):
        q = self.weight_quant.get(self._param_block[name])
        p = self.params[name]
        return p if q is None else fake_quant(p, q)

    def act(self, site, x):
        if self.calibrating:
            self.act_state[site].observe(x.data)
            return x
        if self.act_quant:
            return fake_quant(x, self.act_state[site].quantizer())
        return x

    def act_sites(self):
        """Activation site name -> owning block name."""
        raise NotImplementedError

    def effective_weights(self, name):
        q = self.weight_quant.get(self._param_block[name])
        data = self.params[name].data
        return data if q is None else q(data)

    @contextlib.contextmanager
    def full_precision(self):
        """Temporarily disable every weight and activation fake-quant."""
        saved = (self.weight_quant, self.act_quant, self.calibrating)
        self.weight_quant, self.act_quant, self.calibrating = {}, False, False
        try:
            yield self
        finally:
            self.weight_quant, self.act_quant, self.calibrating = saved

    # -- forward ------------------------------------------------------------
    # The forward pass is a chain of units; every block lies inside one unit,
    # so a caller perturbing one block can cache the activation entering it.
    def units(self):
        raise NotImplementedError

    def unit_of(self, block):
        name = self.partition.block(block).name
        for i, u in enumerate(self.units()):
            if name == u or name.startswith(u + "."):
                return i
        raise KeyError(f"block {name} belongs to no forward unit")

    def _unit(self, i, h) -> Tensor:
        raise NotImplementedError

    def forward(self, x, start=0, stop=None) -> Tensor:
        """Run units ``start`` .. ``stop - 1``; ``x`` is the input of unit ``start``."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        stop = len(self.units()) if stop is None else stop
        for i in range(start, stop):
            h = self._unit(i, h)
        return h

    def __call__(self, x):
        return self.forward(x)


def _copy_act(s):
    c = ActQuantState(s.bits, s.momentum)
    c.min, c.max, c.numel, c.calibrated = s.min, s.max, s.numel, s.calibrated
    return c


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class MLP(Model):
    def __init__(self, spec, rng):
        super().__init__(spec)
        widths = spec.widths
        self.depth = len(widths) - 1
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / a)
            self._add(f"fc{i}.w", _uniform(rng, bound, (a, b)))
            self._add(f"fc{i}.b", _uniform(rng, 1.0 / np.sqrt(a), (b,)))
        self._finish([(f"fc{i}", [f"fc{i}.w", f"fc{i}.b"]) for i in range(self.depth)])

    def act_sites(self):
        return {f"fc{i}.in": f"fc{i}" for i in range(self.depth)}

    def units(self):
        return [f"fc{i}" for i in range(self.depth)]

    def _unit(self, i, h):
        if i == 0 and h.ndim > 2:
            h = T.flatten(h)
        h = self.act(f"fc{i}.in", h)
        h = T.matmul(h, self.w(f"fc{i}.w")) + self.w(f"fc{i}.b")
        return T.relu(h) if i < self.depth - 1 else h


class MiniResNet(Model):
    """stem conv -> residual blocks -> global average pool -> linear head."""

    def __init__(self, spec, rng):
        super().__init__(spec)
        cin = spec.input_shape[0]
        ch = spec.widths
        self._conv("stem", cin, ch[0], 3, rng)
        self.res = []
        for i, (a, b) in enumerate(zip(ch[:-1], ch[1:])):
            name = f"res{i + 1}"
            stride = spec.strides[i]
            self._conv(f"{name}.conv1", a, b, 3, rng)
            self._conv(f"{name}.conv2", b, b, 3, rng, gain=0.5)
            proj = a != b or stride != 1
            if proj:
                self._conv(f"{name}.proj", a, b, 1, rng)
            self.res.append((name, stride, proj))
        fan = ch[-1]
        self._add("head.w", _uniform(rng, np.sqrt(6.0 / fan), (fan, spec.num_classes)))
        self._add("head.b", _uniform(rng, 1.0 / np.sqrt(fan), (spec.num_classes,)))

        groups = [("stem", ["stem.w", "stem.b"])]
        for name, _, proj in self.res:
            layers = [f"{name}.conv1", f"{name}.conv2"] + ([f"{name}.proj"] if proj else [])
            if spec.granularity == "per-residual-block":
                groups.append((name, [f"{l}.{s}" for l in layers for s in ("w", "b")]))
            else:
                groups.extend((l, [f"{l}.w", f"{l}.b"]) for l in layers)
        groups.append(("head", ["head.w", "head.b"]))
        self._finish(groups)

    def _conv(self, name, cin, cout, k, rng, gain=1.0):
        fan = cin * k * k
        self._add(f"{name}.w", gain * _uniform(rng, np.sqrt(6.0 / fan), (cout, cin, k, k)))
        self._add(f"{name}.b", np.zeros(cout))

    def act_sites(self):
        sites = {"stem.in": self._param_block["stem.w"]}
        for name, _, _ in self.res:
            sites[f"{name}.in"] = self._param_block[f"{name}.conv1.w"]
            sites[f"{name}.mid"] = self._param_block[f"{name}.conv2.w"]
        sites["head.in"] = "head"
        return sites

    def units(self):
        return ["stem"] + [r[0] for r in self.res] + ["head"]

    def _unit(self, i, h):
        if i == 0:
            h = self.act("stem.in", h)
            return T.relu(T.conv2d(h, self.w("stem.w"), self.w("stem.b"), 1, 1))
        if i > len(self.res):
            h = self.act("head.in", T.global_avg_pool(h))
            return T.matmul(h, self.w("head.w")) + self.w("head.b")
        name, stride, proj = self.res[i - 1]
        a = self.act(f"{name}.in", h)
        z = T.relu(T.conv2d(a, self.w(f"{name}.conv1.w"), self.w(f"{name}.conv1.b"), stride, 1))
        z = self.act(f"{name}.mid", z)
        z = T.conv2d(z, self.w(f"{name}.conv2.w"), self.w(f"{name}.conv2.b"), 1, 1)
        short = T.conv2d(a, self.w(f"{name}.proj.w"), self.w(f"{name}.proj.b"), stride, 0) \
            if proj else a
        return T.relu(z + short)


def build_model(spec: ModelSpec, seed=0):
    """Initialize a model from ``spec``; returns (model, partition)."""
    rng = np.random.default_rng(seed)
    if spec.kind == "mlp":
        model = MLP(spec, rng)
    elif spec.kind == "mini-resnet":
        model = MiniResNet(spec, rng)
    else:
        raise ValueError(f"unsupported architecture {spec.kind!r}")
    return model, model.partition


def forward_loss(model: Model, features, labels) -> Tensor:
    """Mean softmax cross-entropy of the model on a batch."""
    if len(labels) == 0:
        raise ValueError("empty batch")
    return T.softmax_cross_entropy(model.forward(features), labels)


def predict(model: Model, features, batch_size=1000) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(features), batch_size):
            out.append(model.forward(features[start:start + batch_size]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, dataset, batch_size=1000) -> float:
    """Top-1 accuracy in percent."""
    return 100.0 * float(np.mean(predict(model, dataset.features, batch_size) == dataset.labels))


def dataset_loss(model: Model, dataset, batch_size=1000) -> float:
    """Mean loss over the dataset (exact: batch means weighted by size)."""
    total = 0.0
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.features[start:start + batch_size]
            y = dataset.labels[start:start + batch_size]
            total += forward_loss(model, x, y).item() * len(y)
    return total / len(dataset)
