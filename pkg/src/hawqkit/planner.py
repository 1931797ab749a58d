"""Sensitivity scores, budgeted bit allocation and fine-tuning order.

Blocks are ranked by S = |λ| / n (curvature per parameter). Any plan that
respects the ranking gives non-increasing bits down the ranking, so the
allocator enumerates every such monotone plan and keeps the largest one that
fits the size budget. Fine-tuning order sorts blocks by
Ω = |λ| · ‖Q(W) - W‖² at the planned bits, largest first.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb

from .errors import BudgetError
from .quant import BYPASS_BITS, quant_perturbation

LAMBDA_FLOOR = 1e-12
DEFAULT_PALETTE = (8, 6, 4, 3, 2)


def floor_lambda(lam):
    return max(abs(float(lam)), LAMBDA_FLOOR)


@dataclass(frozen=True)
class SensitivityRecord:
    block: str
    index: int
    lam: float
    n: int
    S: float


@dataclass(frozen=True)
class OmegaRecord:
    block: str
    index: int
    lam: float
    bits: int
    perturbation: float
    omega: float


@dataclass
class Budget:
    """Either a target weight-compression ratio or a maximum size in bits."""

    ratio: float = None
    max_bits: int = None

    def __post_init__(self):
        if (self.ratio is None) == (self.max_bits is None):
            raise ValueError("give exactly one of ratio or max_bits")
        if self.ratio is not None and self.ratio <= 0:
            raise ValueError("compression ratio must be positive")

    def limit(self, total_params) -> Fraction:
        if self.max_bits is not None:
            return Fraction(self.max_bits)
        return Fraction(32 * total_params) / Fraction(self.ratio).limit_denominator(10 ** 9)

    def to_dict(self):
        return {"ratio": self.ratio, "max_bits": self.max_bits}


def check_palette(palette):
    palette = tuple(int(p) for p in palette)
    if not palette or any(p < 1 for p in palette):
        raise ValueError("palette bits must be positive")
    if any(a <= b for a, b in zip(palette, palette[1:])):
        raise ValueError("palette must be strictly descending")
    return palette


@dataclass
class PrecisionPlan:
    blocks: list
    sizes: list
    w_bits: list
    a_bits: list
    candidates: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.blocks) == len(self.sizes) == len(self.w_bits) == len(self.a_bits)):
            raise ValueError("plan fields must have one entry per block")
        if any(k < 1 for k in list(self.w_bits) + list(self.a_bits)):
            raise ValueError("bit widths must be positive")

    @property
    def size_bits(self):
        return sum(n * k for n, k in zip(self.sizes, self.w_bits))

    def bits_of(self, block):
        return self.w_bits[self.blocks.index(block)]

    def matches(self, partition):
        return list(self.blocks) == partition.names and list(self.sizes) == partition.sizes

    def replace_bits(self, w_bits):
        return PrecisionPlan(list(self.blocks), list(self.sizes), list(w_bits), list(self.a_bits),
                             self.candidates, dict(self.meta))

    def to_dict(self):
        return {"blocks": [{"block": b, "n": n, "w_bits": w, "a_bits": a}
                           for b, n, w, a in zip(self.blocks, self.sizes, self.w_bits, self.a_bits)],
                "size_bits": self.size_bits, "candidates": self.candidates, "meta": self.meta}

    @classmethod
    def from_dict(cls, d):
        rows = d["blocks"]
        return cls([r["block"] for r in rows], [int(r["n"]) for r in rows],
                   [int(r["w_bits"]) for r in rows], [int(r["a_bits"]) for r in rows],
                   int(d.get("candidates", 0)), dict(d.get("meta", {})))

    @classmethod
    def uniform(cls, partition, w_bits, a_bits=32):
        b = len(partition)
        return cls(partition.names, partition.sizes, [w_bits] * b, [a_bits] * b)


def sensitivity_scores(eigen, partition):
    """One record per block in partition order; ``eigen`` holds one
    estimate (or raw eigenvalue) per block, by name or in block order."""
    if isinstance(eigen, dict):
        lookup = eigen
    else:
        eigen = list(eigen)
        if eigen and hasattr(eigen[0], "block") and eigen[0].block:
            lookup = {e.block: e for e in eigen}
        else:
            if len(eigen) != len(partition):
                raise ValueError(f"{len(eigen)} estimates for {len(partition)} blocks")
            lookup = dict(zip(partition.names, eigen))
    records = []
    for i, b in enumerate(partition):
        if b.name not in lookup:
            raise ValueError(f"missing eigenvalue estimate for block {b.name}")
        e = lookup[b.name]
        lam = floor_lambda(getattr(e, "lam", e))
        records.append(SensitivityRecord(b.name, i, lam, b.size, lam / b.size))
    return records


def sensitivity_rank(records):
    """Block indices by descending S; ties keep block order."""
    return [r.index for r in sorted(records, key=lambda r: (-r.S, r.index))]


def count_monotone_plans(num_blocks, palette_size):
    return comb(num_blocks + palette_size - 1, palette_size - 1)


def assign_bits(records, palette=DEFAULT_PALETTE, budget=None, a_bits=4,
                a_bits_first=None, a_bits_last=None):
    """Largest monotone plan within ``budget`` (default: no limit).

    Blocks with equal S always share a bit width, so they are grouped before
    the enumeration. Among equally sized plans the one giving more bits to
    higher-S groups wins.
    """
    if not records:
        raise ValueError("no sensitivity records")
    palette = check_palette(palette)
    records = sorted(records, key=lambda r: r.index)
    total = sum(r.n for r in records)
    limit = budget.limit(total) if budget is not None else None

    groups = []  # [S, [block indices], summed n] in descending S
    for r in sorted(records, key=lambda r: (-r.S, r.index)):
        if groups and groups[-1][0] == r.S:
            groups[-1][1].append(r.index)
            groups[-1][2] += r.n
        else:
            groups.append([r.S, [r.index], r.n])
    if limit is not None and sum(g[2] for g in groups) * palette[-1] > limit:
        raise BudgetError(f"budget of {float(limit):.0f} bits is unreachable even at "
                          f"{palette[-1]} bits everywhere ({total * palette[-1]} bits)")

    best, best_size, count = None, -1, 0
    # index tuples are non-decreasing, i.e. bits non-increasing down the ranking;
    # lexicographic order visits higher-bit candidates first, so '>' keeps the tie rule
    for combo in itertools.combinations_with_replacement(range(len(palette)), len(groups)):
        count += 1
        size = sum(g[2] * palette[c] for g, c in zip(groups, combo))
        if limit is not None and size > limit:
            continue
        if size > best_size:
            best, best_size = combo, size
    bits = [0] * len(records)
    for g, c in zip(groups, best):
        for i in g[1]:
            bits[i] = palette[c]
    abits = [a_bits] * len(records)
    if a_bits_first is not None:
        abits[0] = a_bits_first
    if a_bits_last is not None:
        abits[-1] = a_bits_last
    meta = {"palette": list(palette), "budget_bits": float(limit) if limit is not None else None}
    return PrecisionPlan([r.block for r in records], [r.n for r in records], bits, abits,
                         candidates=count, meta=meta)


def is_monotone(plan, records):
    s = {r.block: r.S for r in records}
    for a, ka in zip(plan.blocks, plan.w_bits):
        for b, kb in zip(plan.blocks, plan.w_bits):
            if s[a] >= s[b] and ka < kb:
                return False
    return True


def omega_scores(model, plan, eigen):
    """Ω per block at the planned weight bits (0 for bypassed blocks)."""
    sens = sensitivity_scores(eigen, model.partition)
    out = []
    for r, bits in zip(sens, plan.w_bits):
        arrays = [t.data for t in model.block_params(r.index)]
        pert = 0.0 if bits >= BYPASS_BITS else quant_perturbation(arrays, bits)
        out.append(OmegaRecord(r.block, r.index, r.lam, int(bits), pert, r.lam * pert))
    return out


def omega_table(model, eigen, bit_list=DEFAULT_PALETTE):
    """Ω for every block at each bit width: {block: {bits: omega}}."""
    table = {}
    sens = sensitivity_scores(eigen, model.partition)
    for r in sens:
        arrays = [t.data for t in model.block_params(r.index)]
        table[r.block] = {int(k): r.lam * quant_perturbation(arrays, k) for k in bit_list}
    return table


def finetune_order(omegas):
    """Block indices by descending Ω; ties by ascending block index."""
    vals = [getattr(o, "omega", o) for o in omegas]
    idx = [getattr(o, "index", i) for i, o in enumerate(omegas)]
    return [i for _, i in sorted(zip(vals, idx), key=lambda t: (-t[0], t[1]))]


def reverse_precision_plan(plan, records):
    """Swap bits across the S ranking: rank k gets the bits of rank b-1-k.

    For a monotone plan the lowest-S block ends up with the highest bits.
    The map is an involution.
    """
    rank = sensitivity_rank(records)
    bits = list(plan.w_bits)
    new = list(bits)
    for k, i in enumerate(rank):
        new[i] = bits[rank[len(rank) - 1 - k]]
    out = plan.replace_bits(new)
    out.meta["reversed"] = not plan.meta.get("reversed", False)
    return out


def reverse_tuning_order(order):
    return list(reversed(order))


def score_table_csv(records, plan, omegas=None):
    """CSV with columns block, n, lambda, S, bits, omega (blank without Ω)."""
    from ._io import csv_text

    om = {o.block: o.omega for o in omegas} if omegas else {}
    rows = [[r.block, r.n, repr(r.lam), repr(r.S), plan.bits_of(r.block),
             repr(om[r.block]) if r.block in om else ""] for r in records]
    return csv_text(["block", "n", "lambda", "S", "bits", "omega"], rows)
