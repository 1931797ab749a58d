"""Compression accounting and the shipped per-block precision fixtures.

Ratios are computed exactly with :class:`fractions.Fraction` and rounded to
two decimals only for display.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources

from ._io import SCHEMA_VERSION, csv_text
from .errors import FormatError

FIXTURE_TOLERANCE = 0.005


def _exact(x):
    return x if isinstance(x, Fraction) else Fraction(str(x))


def weight_compression(sizes, bits) -> Fraction:
    """32·Σn / Σ(n·k)."""
    sizes = [_exact(n) for n in sizes]
    if any(int(k) <= 0 for k in bits):
        raise ValueError("bit widths must be positive")
    return Fraction(32) * sum(sizes) / sum(n * int(k) for n, k in zip(sizes, bits))


def activation_compression(a_bits, act_sizes=None) -> Fraction:
    """32 / a-bits when uniform; otherwise 32·Σa / Σ(a·bits) with ``act_sizes``
    (activation elements per site), each entry weighted equally if omitted."""
    if any(int(k) <= 0 for k in a_bits):
        raise ValueError("bit widths must be positive")
    if len(set(a_bits)) == 1:
        return Fraction(32, int(a_bits[0]))
    weights = [Fraction(1)] * len(a_bits) if act_sizes is None else [_exact(a) for a in act_sizes]
    return Fraction(32) * sum(weights) / sum(w * int(k) for w, k in zip(weights, a_bits))


@dataclass
class CompressionReport:
    blocks: list
    sizes: list
    w_bits: list
    a_bits: list
    w_comp: Fraction
    a_comp: Fraction
    size_bytes: int
    accuracy: float = None

    def to_dict(self):
        return {
            "schema": SCHEMA_VERSION,
            "kind": "compression_report",
            "blocks": [{"block": b, "n": int(n) if Fraction(n).denominator == 1 else float(n),
                        "w_bits": int(w), "a_bits": int(a)}
                       for b, n, w, a in zip(self.blocks, self.sizes, self.w_bits, self.a_bits)],
            "w_comp": round(float(self.w_comp), 2),
            "a_comp": round(float(self.a_comp), 2),
            "w_comp_exact": [self.w_comp.numerator, self.w_comp.denominator],
            "size_bytes": self.size_bytes,
            "accuracy": self.accuracy,
        }

    def summary(self):
        acc = "" if self.accuracy is None else f", acc {self.accuracy:.2f}%"
        return (f"W-Comp {float(self.w_comp):.2f}x, A-Comp {float(self.a_comp):.2f}x, "
                f"{self.size_bytes} bytes{acc}")


def compression_report(partition, plan, a_bits=None, accuracy=None, act_sizes=None):
    """Report for ``plan`` over ``partition`` (or a list of block sizes)."""
    sizes = partition.sizes if hasattr(partition, "sizes") else list(partition)
    names = partition.names if hasattr(partition, "names") else [str(i) for i in range(len(sizes))]
    w_bits = list(plan.w_bits if hasattr(plan, "w_bits") else plan)
    if len(w_bits) != len(sizes):
        raise ValueError(f"plan has {len(w_bits)} blocks, partition has {len(sizes)}")
    if a_bits is None:
        a_bits = list(plan.a_bits) if hasattr(plan, "a_bits") else [32] * len(sizes)
    elif isinstance(a_bits, int):
        a_bits = [a_bits] * len(sizes)
    total_bits = sum(_exact(n) * int(k) for n, k in zip(sizes, w_bits))
    return CompressionReport(names, list(sizes), w_bits, list(a_bits),
                             weight_compression(sizes, w_bits),
                             activation_compression(a_bits, act_sizes),
                             math.ceil(total_bits / 8), accuracy)


# -- fixtures ---------------------------------------------------------------

@dataclass
class Fixture:
    blocks: list
    sizes: list
    w_bits: list
    a_bits: list
    expected: Fraction

    def w_comp(self):
        return weight_compression(self.sizes, self.w_bits)

    def to_csv(self):
        rows = [[b, str(n), w, a, str(float(self.expected))]
                for b, n, w, a in zip(self.blocks, self.sizes, self.w_bits, self.a_bits)]
        return csv_text(["block", "n", "w_bits", "a_bits", "expected_w_comp"], rows)


def parse_fixture(text):
    """Parse a fixture CSV (columns block,n,w_bits[,a_bits][,expected_w_comp])."""
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise FormatError("empty fixture", line=1)
    header = [h.strip() for h in rows[0]]
    for col in ("block", "n", "w_bits"):
        if col not in header:
            raise FormatError(f"missing column {col!r}", line=1)
    col = {h: i for i, h in enumerate(header)}
    blocks, sizes, w_bits, a_bits, expected = [], [], [], [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise FormatError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        try:
            blocks.append(row[col["block"]].strip())
            n = Fraction(row[col["n"]].strip())
            k = int(row[col["w_bits"]])
            a = int(row[col["a_bits"]]) if "a_bits" in col else 32
            if "expected_w_comp" in col and row[col["expected_w_comp"]].strip():
                expected.add(Fraction(row[col["expected_w_comp"]].strip()))
        except ValueError as exc:
            raise FormatError(f"bad value: {exc}", line=lineno) from None
        if n <= 0 or k <= 0 or a <= 0:
            raise FormatError("sizes and bit widths must be positive", line=lineno)
        sizes.append(n)
        w_bits.append(k)
        a_bits.append(a)
    if not blocks:
        raise FormatError("fixture has no rows", line=2)
    if len(expected) > 1:
        raise FormatError("rows disagree on expected_w_comp")
    return Fixture(blocks, sizes, w_bits, a_bits, expected.pop() if expected else None)


def load_fixture(name):
    """A packaged fixture by stem, e.g. ``resnet20`` or ``inception_v3``."""
    return parse_fixture(resources.files("hawqkit").joinpath(f"fixtures/{name}.csv").read_text())


def verify_fixture(source, expected=None, tol=FIXTURE_TOLERANCE):
    """Recompute W-Comp for a fixture (path, CSV text or :class:`Fixture`).

    Returns (passed, computed, expected).
    """
    if isinstance(source, Fixture):
        fx = source
    else:
        text = str(source)
        if "\n" not in text:
            with open(text) as fh:
                text = fh.read()
        fx = parse_fixture(text)
    target = _exact(expected) if expected is not None else fx.expected
    if target is None:
        raise FormatError("fixture has no expected_w_comp and none was given")
    got = fx.w_comp()
    return abs(float(got) - float(target)) <= tol, got, target
