"""Full-precision training and quantization-aware fine-tuning.

``hawq_finetune`` quantizes one block per stage in the given order and
trains the whole network after each step until the training loss stops
improving; ``direct_quantize`` quantizes everything at once and trains once.
Both keep full-precision shadow weights: the optimizer updates them while
the forward pass sees Q(W), with gradients passed straight through.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from ._io import csv_text
from .errors import DivergenceError, NonFiniteError, ShapeError
from .models import accuracy, forward_loss
from .quant import ActQuantState, fit_weight_quantizer, quantize

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 128
    max_epochs: int = 10
    patience: int = 3
    min_delta: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be positive and max_epochs non-negative")


class SGD:
    """Heavy-ball momentum: v <- m v + g; w <- w - lr v."""

    def __init__(self, params, lr, momentum):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def step(self, grads):
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g.data
            p.data = p.data - self.lr * v


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    stages: list = field(default_factory=list)

    def add(self, stage, block, epoch, loss, acc):
        self.rows.append({"stage": stage, "block": block, "epoch": epoch,
                          "loss": loss, "acc": acc})

    def end_stage(self, stage, block, epochs, reason):
        self.stages.append({"stage": stage, "block": block, "epochs": epochs, "stop": reason})

    @property
    def total_epochs(self):
        return len(self.rows)

    @property
    def accuracies(self):
        return [r["acc"] for r in self.rows]

    @property
    def final_accuracy(self):
        return self.rows[-1]["acc"] if self.rows else None

    def epochs_to_converge(self, tol=0.5):
        """First cumulative epoch whose accuracy is within ``tol`` points of
        the final accuracy."""
        accs = self.accuracies
        if not accs:
            return 0
        final = accs[-1]
        return next(i + 1 for i, a in enumerate(accs) if abs(a - final) <= tol)

    def epochs_to_settle(self, tol=0.5):
        """Cumulative epochs after which accuracy stays within ``tol`` points
        of its final value."""
        accs = self.accuracies
        if not accs:
            return 0
        final = accs[-1]
        settle = len(accs)
        for i in range(len(accs) - 1, -1, -1):
            if abs(accs[i] - final) > tol:
                break
            settle = i
        return settle + 1

    def to_csv(self):
        return csv_text(["stage", "epoch", "loss", "acc"],
                        [[r["stage"], r["epoch"], repr(r["loss"]), repr(r["acc"])]
                         for r in self.rows])

    def to_dict(self):
        return {"rows": list(self.rows), "stages": list(self.stages)}


def _trainable(model, frozen=()):
    return [t for name, t in model.params.items()
            if model.partition.block_of(name) not in frozen]


def train_stage(model, train, opt: OptimizerConfig, rng, tlog, stage, block=None,
                eval_data=None, frozen=()):
    """Train until ``patience`` epochs pass without a ``min_delta``
    improvement of the epoch training loss, or ``max_epochs``."""
    params = _trainable(model, frozen)
    sgd = SGD(params, opt.lr, opt.momentum)
    best, wait, epoch, reason = np.inf, 0, 0, "max_epochs"
    for epoch in range(1, opt.max_epochs + 1):
        total = 0.0
        for x, y in train.batches(opt.batch_size, rng):
            try:
                loss = forward_loss(model, x, y)
                grads = T.grad(loss, params)
            except NonFiniteError as exc:
                raise DivergenceError(f"stage {stage}, epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"stage {stage}, epoch {epoch}: loss is not finite")
            sgd.step(grads)
            total += loss.item() * len(y)
        epoch_loss = total / len(train)
        acc = accuracy(model, eval_data if eval_data is not None else train)
        tlog.add(stage, block, epoch, epoch_loss, acc)
        log.debug("stage %s epoch %d loss %.5f acc %.2f", stage, epoch, epoch_loss, acc)
        if epoch_loss < best - opt.min_delta:
            best, wait = epoch_loss, 0
        else:
            wait += 1
            if wait >= opt.patience:
                reason = "patience"
                break
    tlog.end_stage(stage, block, epoch, reason)
    return tlog


def train_fp(model, train, opt: OptimizerConfig, eval_data=None):
    """Plain full-precision training (one stage labelled ``fp``)."""
    rng = np.random.default_rng(opt.seed)
    tlog = TrainLog()
    with model.full_precision():
        train_stage(model, train, opt, rng, tlog, "fp", None, eval_data)
    return tlog


def calibrate_activations(model, data, a_bits, batch_size=500):
    """One in-order pass recording EMA min/max at every activation site,
    then switch activation fake-quant on."""
    sites = model.act_sites()
    names = model.partition.names
    model.act_state = {s: ActQuantState(a_bits[names.index(b)]) for s, b in sites.items()}
    model.calibrating = True
    try:
        with T.no_grad():
            for x, _ in data.batches(batch_size):
                model.forward(x)
    finally:
        model.calibrating = False
    for st in model.act_state.values():
        st.finish()
    model.act_quant = True


def quantize_block(model, index, bits):
    """Fit and activate the block's weight quantizer on its current weights."""
    b = model.partition.block(index)
    if bits >= 32:
        model.weight_quant.pop(b.name, None)
        return None
    q = fit_weight_quantizer([model.params[p].data for p in b.params], bits)
    model.weight_quant[b.name] = q
    return q


def on_grid(model, index):
    """True when the block's effective forward weights lie on its level grid."""
    b = model.partition.block(index)
    q = model.weight_quant.get(b.name)
    if q is None:
        return False
    return all(np.array_equal(quantize(model.effective_weights(p), q), model.effective_weights(p))
               for p in b.params)


def _check_plan(model, plan, order=None):
    if not plan.matches(model.partition):
        raise ShapeError("plan does not match the model's block partition")
    if order is not None and sorted(order) != list(range(len(model.partition))):
        raise ShapeError(f"order {order} is not a permutation of the {len(model.partition)} blocks")


def hawq_finetune(model, plan, order, opt: OptimizerConfig, train, eval_data=None,
                  freeze=False):
    """Multi-stage fine-tuning; stage t quantizes block ``order[t]``.

    Works on a copy; returns (quantized model, TrainLog). With ``freeze``
    the blocks quantized in earlier stages stop updating.
    """
    _check_plan(model, plan, order)
    qm = model.clone()
    qm.weight_quant = {}
    calibrate_activations(qm, train, plan.a_bits)
    rng = np.random.default_rng(opt.seed)
    tlog = TrainLog()
    done = []
    for t, idx in enumerate(order):
        quantize_block(qm, idx, plan.w_bits[idx])
        name = qm.partition.names[idx]
        train_stage(qm, train, opt, rng, tlog, t + 1, name, eval_data,
                    frozen=tuple(done) if freeze else ())
        done.append(name)
    return qm, tlog


def direct_quantize(model, plan, opt: OptimizerConfig, train, eval_data=None):
    """Quantize every block at once, then one fine-tuning stage."""
    _check_plan(model, plan)
    qm = model.clone()
    qm.weight_quant = {}
    calibrate_activations(qm, train, plan.a_bits)
    rng = np.random.default_rng(opt.seed)
    tlog = TrainLog()
    for idx in range(len(qm.partition)):
        quantize_block(qm, idx, plan.w_bits[idx])
    train_stage(qm, train, opt, rng, tlog, 1, "all", eval_data)
    return qm, tlog


def run_summary(name, plan, tlog, a_bits_comp=None):
    from .report import weight_compression

    return {
        "variant": name,
        "accuracy": tlog.final_accuracy,
        "w_comp": float(weight_compression(plan.sizes, plan.w_bits)),
        "w_bits": list(plan.w_bits),
        "total_epochs": tlog.total_epochs,
        "epochs_to_converge": tlog.epochs_to_converge(),
        "epochs_to_settle": tlog.epochs_to_settle(),
        "stage_epochs": [s["epochs"] for s in tlog.stages],
        "stage_blocks": [s["block"] for s in tlog.stages],
    }


@dataclass
class AblationConfig:
    palette: tuple = (8, 6, 4, 3, 2)
    budget_ratio: float = 8.0
    a_bits: int = 4
    a_bits_first: int = 8
    a_bits_last: int = 8
    variants: tuple = ("hawq", "reverse_precision", "reverse_tuning", "direct")

    def to_dict(self):
        d = asdict(self)
        d["palette"], d["variants"] = list(self.palette), list(self.variants)
        return d


def make_plan(model, eigen, cfg: AblationConfig):
    from .planner import Budget, assign_bits, finetune_order, omega_scores, sensitivity_scores

    records = sensitivity_scores(eigen, model.partition)
    plan = assign_bits(records, cfg.palette, Budget(ratio=cfg.budget_ratio), cfg.a_bits,
                       cfg.a_bits_first, cfg.a_bits_last)
    omegas = omega_scores(model, plan, eigen)
    return records, plan, omegas, finetune_order(omegas)


def ablate(model, eigen, train, eval_data, opt: OptimizerConfig, cfg: AblationConfig):
    """Run HAWQ and its comparison arms from one pre-trained model.

    Every arm starts from the same weights and shares ``opt.seed``.
    """
    from .planner import reverse_precision_plan, reverse_tuning_order

    records, plan, omegas, order = make_plan(model, eigen, cfg)
    rev_plan = reverse_precision_plan(plan, records)
    runs = {}
    for v in cfg.variants:
        if v == "hawq":
            _, tl = hawq_finetune(model, plan, order, opt, train, eval_data)
            runs[v] = run_summary(v, plan, tl)
        elif v == "reverse_tuning":
            _, tl = hawq_finetune(model, plan, reverse_tuning_order(order), opt, train, eval_data)
            runs[v] = run_summary(v, plan, tl)
        elif v == "reverse_precision":
            _, tl = direct_quantize(model, rev_plan, opt, train, eval_data)
            runs[v] = run_summary(v, rev_plan, tl)
        elif v == "direct":
            _, tl = direct_quantize(model, plan, opt, train, eval_data)
            runs[v] = run_summary(v, plan, tl)
        else:
            raise ValueError(f"unknown ablation variant {v!r}")
        runs[v]["log"] = tl.to_dict()
    return {
        "plan": plan.to_dict(),
        "reverse_plan": rev_plan.to_dict(),
        "order": order,
        "omega": [o.omega for o in omegas],
        "S": [r.S for r in records],
        "variants": runs,
    }
