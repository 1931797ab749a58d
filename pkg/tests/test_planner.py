import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hawqkit.errors import BudgetError
from hawqkit.models import ModelSpec, build_model
from hawqkit.planner import (Budget, PrecisionPlan, SensitivityRecord, assign_bits,
                             check_palette, count_monotone_plans, finetune_order, floor_lambda,
                             is_monotone, omega_scores, omega_table, reverse_precision_plan,
                             reverse_tuning_order, score_table_csv, sensitivity_rank,
                             sensitivity_scores)
from hawqkit.quant import Quantizer, quantize


def _records(S, n=None):
    n = n or [1] * len(S)
    return [SensitivityRecord(f"b{i}", i, s * k, k, float(s)) for i, (s, k) in enumerate(zip(S, n))]


class _Part:
    def __init__(self, sizes):
        self.sizes = list(sizes)
        self.names = [f"b{i}" for i in range(len(sizes))]

    def __len__(self):
        return len(self.sizes)

    def __iter__(self):
        from types import SimpleNamespace
        return iter(SimpleNamespace(name=a, size=b) for a, b in zip(self.names, self.sizes))


def test_sensitivity_arithmetic():
    r = sensitivity_scores([10.0], _Part([5]))[0]
    assert r.S == 2.0 and r.lam == 10.0
    r = sensitivity_scores([0.0], _Part([4]))[0]
    assert r.S == pytest.approx(1e-12 / 4) and r.S > 0
    big, small = sensitivity_scores([3.0, 3.0], _Part([100, 10]))
    assert big.S == pytest.approx(small.S / 10)
    assert floor_lambda(-2.5) == 2.5


def test_sensitivity_missing_block():
    with pytest.raises(ValueError):
        sensitivity_scores({"b0": 1.0}, _Part([3, 4]))
    with pytest.raises(ValueError):
        sensitivity_scores([1.0], _Part([3, 4]))


def test_assign_rank_order_example():
    recs = _records([5, 1, 3])
    plan = assign_bits(recs, (8, 4, 2), Budget(max_bits=14))
    assert plan.w_bits == [8, 2, 4]
    assert assign_bits(recs, (8, 4, 2), Budget(max_bits=6)).w_bits == [2, 2, 2]
    with pytest.raises(BudgetError):
        assign_bits(recs, (8, 4, 2), Budget(max_bits=5))


def test_candidate_count_is_stars_and_bars():
    recs = _records(list(range(10, 0, -1)))
    plan = assign_bits(recs, (8, 6, 4, 3, 2))
    assert plan.candidates == 1001 == count_monotone_plans(10, 5)
    brute = sum(1 for c in itertools.product(range(5), repeat=10)
                if all(a <= b for a, b in zip(c, c[1:])))
    assert brute == 1001
    assert plan.w_bits == [8] * 10


def test_palette_validation():
    for bad in ((), (4, 8), (8, 8, 2), (2, 0)):
        with pytest.raises(ValueError):
            check_palette(bad)
    with pytest.raises(ValueError):
        Budget()
    with pytest.raises(ValueError):
        Budget(ratio=2, max_bits=3)
    with pytest.raises(ValueError):
        Budget(ratio=0)


def test_ratio_budget_limit():
    assert float(Budget(ratio=8).limit(100)) == 400
    recs = _records([3, 2, 1], [100, 100, 100])
    plan = assign_bits(recs, budget=Budget(ratio=8))
    # (8,2,2) and (6,4,2) both fill 1200 bits; the tie favours the top-S block
    assert plan.size_bits <= 1200 and plan.w_bits == [8, 2, 2]


def test_equal_sensitivity_shares_bits():
    recs = _records([2, 2, 1], [10, 10, 10])
    plan = assign_bits(recs, (8, 4, 2), Budget(max_bits=100))
    assert plan.w_bits[0] == plan.w_bits[1]


def test_activation_bits():
    plan = assign_bits(_records([3, 2, 1]), a_bits=4, a_bits_first=8, a_bits_last=8)
    assert plan.a_bits == [8, 4, 8]


def _feasible(recs, palette, limit):
    # brute force over every assignment, filtered by the monotone invariant
    best = -1
    for bits in itertools.product(palette, repeat=len(recs)):
        plan = PrecisionPlan([r.block for r in recs], [r.n for r in recs], list(bits),
                             [4] * len(recs))
        if plan.size_bits <= limit and is_monotone(plan, recs):
            best = max(best, plan.size_bits)
    return best


@given(st.lists(st.tuples(st.floats(1e-3, 1e3), st.integers(1, 50)), min_size=1, max_size=5),
       st.floats(1.5, 20))
def test_budget_optimality_and_monotonicity(blocks, ratio):
    recs = [SensitivityRecord(f"b{i}", i, lam, n, lam / n) for i, (lam, n) in enumerate(blocks)]
    budget = Budget(ratio=ratio)
    limit = budget.limit(sum(n for _, n in blocks))
    try:
        plan = assign_bits(recs, budget=budget)
    except BudgetError:
        assert sum(n for _, n in blocks) * 2 > limit
        return
    assert plan.size_bits <= limit
    assert is_monotone(plan, recs)
    assert set(plan.w_bits) <= {8, 6, 4, 3, 2}
    assert plan.size_bits == _feasible(recs, (8, 6, 4, 3, 2), limit)


@given(st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=6), st.floats(1e-3, 1e3))
def test_scale_invariance(lams, c):
    part = _Part([7 * (i + 1) for i in range(len(lams))])
    a = sensitivity_scores(lams, part)
    b = sensitivity_scores([c * x for x in lams], part)
    assert sensitivity_rank(a) == sensitivity_rank(b)
    pa = assign_bits(a, budget=Budget(ratio=7))
    pb = assign_bits(b, budget=Budget(ratio=7))
    assert pa.w_bits == pb.w_bits
    om = [x * (i + 1) for i, x in enumerate(lams)]
    assert finetune_order(om) == finetune_order([c * x for x in om])


def test_finetune_order_examples():
    assert finetune_order([0.1, 5, 2]) == [1, 2, 0]
    assert finetune_order([1.0, 1.0, 1.0]) == [0, 1, 2]
    assert finetune_order([2, 5, 0.1]) == [1, 0, 2]


@given(st.lists(st.floats(0, 100), min_size=1, max_size=8))
def test_finetune_order_is_permutation(om):
    assert sorted(finetune_order(om)) == list(range(len(om)))


def test_reversals():
    recs = _records([5, 1, 3])
    plan = PrecisionPlan(["b0", "b1", "b2"], [1, 1, 1], [8, 2, 4], [4, 4, 4])
    rev = reverse_precision_plan(plan, recs)
    assert rev.w_bits == [2, 8, 4] and rev.meta["reversed"]
    again = reverse_precision_plan(rev, recs)
    assert again.w_bits == plan.w_bits and not again.meta["reversed"]
    assert reverse_tuning_order([1, 2, 0]) == [0, 2, 1]
    assert reverse_tuning_order(reverse_tuning_order([3, 1, 2, 0])) == [3, 1, 2, 0]


@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=7, unique=True))
def test_reverse_precision_involution(S):
    recs = _records(S)
    plan = assign_bits(recs, budget=Budget(ratio=9))
    rev = reverse_precision_plan(plan, recs)
    assert sorted(rev.w_bits) == sorted(plan.w_bits)
    assert reverse_precision_plan(rev, recs).w_bits == plan.w_bits


def test_omega_arithmetic_and_on_grid():
    model, part = build_model(ModelSpec("mlp", [3, 4, 2]), seed=0)
    plan = PrecisionPlan.uniform(part, 4)
    om = omega_scores(model, plan, [2.0, 3.0])
    for o in om:
        assert o.omega == pytest.approx(o.lam * o.perturbation) and o.omega >= 0
    # snap fc0 onto its own 4-bit grid: Ω falls to zero
    from hawqkit.quant import fit_weight_quantizer
    arrays = [t.data for t in model.block_params("fc0")]
    q = fit_weight_quantizer(arrays, 4)
    for t in model.block_params("fc0"):
        t.data = quantize(t.data, q)
    assert omega_scores(model, plan, [2.0, 3.0])[0].omega == 0.0
    assert omega_scores(model, PrecisionPlan.uniform(part, 32), [2.0, 3.0])[1].omega == 0.0


def test_omega_grows_as_bits_drop():
    model, part = build_model(ModelSpec("mlp", [8, 16, 4]), seed=2)
    table = omega_table(model, [1.0, 1.0])
    for b in part.names:
        vals = [table[b][k] for k in (8, 6, 4, 3, 2)]
        assert all(x < y for x, y in zip(vals, vals[1:]))


def test_plan_serialization_round_trip():
    plan = assign_bits(_records([3, 1, 2], [5, 6, 7]), budget=Budget(ratio=8))
    assert PrecisionPlan.from_dict(plan.to_dict()) == plan
    csv = score_table_csv(_records([3, 1, 2], [5, 6, 7]), plan)
    assert csv.splitlines()[0] == "block,n,lambda,S,bits,omega"
    assert len(csv.splitlines()) == 4
