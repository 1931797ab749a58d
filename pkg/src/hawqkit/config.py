"""Run configuration read from YAML.

Every key has a default (see the dataclasses below); unknown keys anywhere
raise :class:`ConfigError`. A minimal config is an empty file::

    seed: 0                 # model init, data synthesis, probe subset, shuffling
    seeds: [0, 1, 2]        # ablate runs one pre-train + all arms per seed
    output_dir: runs
    model:   {kind: mini-resnet, widths: [20, 20, 20, 20, 20], input_shape: [1, 8, 8],
              num_classes: 10, granularity: per-residual-block, strides: [2, 2, 1, 1]}
    data:    {kind: synth-images, n: 10000, eval_n: 2000, noise: 0.35, shift: 1,
              dim: 16, path: null, labels_path: null, eval_path: null,
              eval_labels_path: null, eval_fraction: 0.2}
    train:   {lr: 0.05, momentum: 0.9, batch_size: 128, max_epochs: 15,
              patience: 3, min_delta: 1.0e-4}
    finetune: {lr: 0.002, momentum: 0.9, batch_size: 128, max_epochs: 5,
              patience: 3, min_delta: 1.0e-4}
    probe:   {max_iters: 20, rel_tol: 1.0e-3, probe_batch: 1000}
    plan:    {palette: [8, 6, 4, 3, 2], budget_ratio: 13.0, max_bits: null,
              a_bits: 4, a_bits_first: 8, a_bits_last: 8}
    landscape: {blocks: null, lo: -0.5, hi: 0.5, points: 41, points_2d: 21, second: true,
                max_iters: 200, rel_tol: 1.0e-6}
    ablate:  {variants: [hawq, reverse_precision, reverse_tuning, direct]}
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import ConfigError


@dataclass
class ModelSection:
    kind: str = "mini-resnet"
    widths: list = field(default_factory=lambda: [20, 20, 20, 20, 20])
    input_shape: list = field(default_factory=lambda: [1, 8, 8])
    num_classes: int = 10
    granularity: str = "per-residual-block"
    strides: list = field(default_factory=lambda: [2, 2, 1, 1])


@dataclass
class DataSection:
    kind: str = "synth-images"     # synth-images | synth-blobs | idx | csv
    n: int = 10000
    eval_n: int = 2000
    noise: float = 0.35
    shift: int = 1
    dim: int = 16                  # synth-blobs feature dimension
    path: str = None
    labels_path: str = None
    eval_path: str = None
    eval_labels_path: str = None
    eval_fraction: float = 0.2     # tail split when no eval file is given


@dataclass
class OptSection:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 128
    max_epochs: int = 15
    patience: int = 3
    min_delta: float = 1e-4


def _finetune_defaults():
    return OptSection(lr=0.002, max_epochs=5)


@dataclass
class ProbeSection:
    max_iters: int = 20
    rel_tol: float = 1e-3
    probe_batch: int = 1000


@dataclass
class PlanSection:
    palette: list = field(default_factory=lambda: [8, 6, 4, 3, 2])
    budget_ratio: float = 13.0
    max_bits: int = None
    a_bits: int = 4
    a_bits_first: int = 8
    a_bits_last: int = 8


@dataclass
class LandscapeSection:
    blocks: list = None            # null: every block
    lo: float = -0.5
    hi: float = 0.5
    points: int = 41
    points_2d: int = 21
    second: bool = True
    max_iters: int = 200           # tighter than the probe so deflation has a converged v1
    rel_tol: float = 1e-6

    def grid(self, points=None):
        return np.linspace(self.lo, self.hi, points or self.points)


@dataclass
class AblateSection:
    variants: list = field(default_factory=lambda: ["hawq", "reverse_precision",
                                                     "reverse_tuning", "direct"])


@dataclass
class RunConfig:
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs"
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: OptSection = field(default_factory=OptSection)
    finetune: OptSection = field(default_factory=_finetune_defaults)
    probe: ProbeSection = field(default_factory=ProbeSection)
    plan: PlanSection = field(default_factory=PlanSection)
    landscape: LandscapeSection = field(default_factory=LandscapeSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    # -- derived objects ---------------------------------------------------
    def model_spec(self):
        from .models import ModelSpec

        m = self.model
        return ModelSpec(m.kind, list(m.widths), tuple(m.input_shape or ()), m.num_classes,
                         m.granularity, list(m.strides) if m.strides is not None else None)

    def optimizer(self, section="train", seed=None):
        from .trainer import OptimizerConfig

        s = getattr(self, section)
        return OptimizerConfig(s.lr, s.momentum, s.batch_size, s.max_epochs, s.patience,
                               s.min_delta, self.seed if seed is None else seed)

    def probe_config(self, seed=None):
        from .hessian import ProbeConfig

        p = self.probe
        return ProbeConfig(p.max_iters, p.rel_tol, self.seed if seed is None else seed,
                           p.probe_batch)

    def landscape_probe_config(self, seed=None):
        from .hessian import ProbeConfig

        return ProbeConfig(self.landscape.max_iters, self.landscape.rel_tol,
                           self.seed if seed is None else seed, self.probe.probe_batch)

    def budget(self):
        from .planner import Budget

        if self.plan.max_bits is not None:
            return Budget(max_bits=self.plan.max_bits)
        return Budget(ratio=self.plan.budget_ratio)

    def to_dict(self):
        return dataclasses.asdict(self)


def _build(base, raw, where):
    """Overlay the mapping ``raw`` on the dataclass instance ``base``."""
    if raw is None:
        return base
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(base)}
    unknown = sorted(set(map(str, raw)) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        cur = getattr(base, k)
        path = f"{where}.{k}" if where else k
        kwargs[k] = _build(cur, v, path) if dataclasses.is_dataclass(cur) else v
    try:
        return dataclasses.replace(base, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _validate(cfg: RunConfig):
    if cfg.data.kind not in ("synth-images", "synth-blobs", "idx", "csv"):
        raise ConfigError(f"data.kind: unknown dataset kind {cfg.data.kind!r}")
    if cfg.data.kind in ("idx", "csv") and not cfg.data.path:
        raise ConfigError(f"data.path is required for data.kind {cfg.data.kind}")
    if not cfg.seeds:
        raise ConfigError("seeds must list at least one seed")
    for name in ("train", "finetune"):
        s = getattr(cfg, name)
        if s.lr < 0 or s.patience < 1 or s.batch_size < 1:
            raise ConfigError(f"{name}: need lr >= 0, patience >= 1, batch_size >= 1")
    if cfg.landscape.points < 1 or cfg.landscape.points_2d < 1:
        raise ConfigError("landscape grid needs at least one point")
    try:
        cfg.model_spec()
        cfg.probe_config()
        cfg.landscape_probe_config()
        cfg.budget()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def parse_config(text) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return _validate(_build(RunConfig(), raw or {}, ""))


def load_config(path) -> RunConfig:
    if path is None:
        return _validate(RunConfig())
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def make_datasets(cfg: RunConfig, seed=None):
    """(train, eval) datasets for the configured source."""
    from .data import from_csv, load_idx, synth_blobs, synth_images

    d = cfg.data
    seed = cfg.seed if seed is None else seed
    spec = cfg.model_spec()
    if d.kind in ("synth-images", "synth-blobs"):
        if d.kind == "synth-images":
            full = synth_images(d.n + d.eval_n, spec.num_classes, tuple(spec.input_shape), seed,
                                noise=d.noise, shift=d.shift)
        else:
            full = synth_blobs(d.n + d.eval_n, spec.num_classes, d.dim, seed)
        return full.subset(np.arange(d.n)), full.subset(np.arange(d.n, d.n + d.eval_n))
    shape = tuple(spec.input_shape) if spec.kind == "mini-resnet" else None
    if d.kind == "idx":
        full = load_idx(d.path, d.labels_path, spec.num_classes)
        ev = load_idx(d.eval_path, d.eval_labels_path, spec.num_classes) if d.eval_path else None
    else:
        full = from_csv(d.path, shape, spec.num_classes)
        ev = from_csv(d.eval_path, shape, spec.num_classes) if d.eval_path else None
    if shape is not None and full.features.shape[1:] != shape:
        full = full.reshape(shape)
        ev = ev.reshape(shape) if ev is not None else None
    if ev is None:
        cut = len(full) - int(round(len(full) * d.eval_fraction))
        if not 0 < cut < len(full):
            raise ConfigError("data.eval_fraction leaves an empty train or eval split")
        full, ev = full.subset(np.arange(cut)), full.subset(np.arange(cut, len(full)))
    return full, ev
