import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_lora.allocator import AllocationPlan, allocate, allocate_from_full, validate_plan
from hybrid_lora.model import KINDS, ModuleId


def universe(L):
    return [ModuleId(layer, k) for layer in range(1, L + 1) for k in KINDS]


U14 = universe(2)


def test_uniform_single_module():
    scores = {m: float(i) for i, m in enumerate(reversed(U14))}
    params = dict.fromkeys(U14, 100)
    plan = allocate(scores, params, 0.10)
    lowest = min(scores, key=scores.get)
    assert plan.fft_set == {lowest}
    assert plan.lora_set == set(U14) - {lowest}
    assert plan.used_ratio == 100 / 1400


def test_budget_below_cheapest():
    params = {m: 100 + i for i, m in enumerate(U14)}
    plan = allocate(dict.fromkeys(U14, 0.0), params, 0.01)
    assert plan.fft_set == set() and plan.lora_set == set(U14) and plan.used_ratio == 0.0


def test_tie_prefers_smaller_layer():
    scores = dict.fromkeys(U14, 5.0)
    scores[ModuleId(2, "query")] = 1.0
    scores[ModuleId(1, "down")] = 1.0
    plan = allocate(scores, dict.fromkeys(U14, 100), 0.10)
    assert plan.fft_set == {ModuleId(1, "down")}


def test_from_full_uniform():
    scores = {m: float(i) for i, m in enumerate(U14)}
    plan = allocate_from_full(scores, dict.fromkeys(U14, 100), 0.10)
    assert plan.fft_set == {U14[0]} and len(plan.lora_set) == 13
    assert plan.direction == "descending-from-fft"


def test_near_one_budget_keeps_all_but_binding():
    scores = {m: float(i) for i, m in enumerate(U14)}
    plan = allocate_from_full(scores, dict.fromkeys(U14, 1), 1 - 1e-9)
    assert plan.fft_set == set(U14[:13])


@pytest.mark.parametrize("r", [0.0, 1.0, -0.1, 1.5])
def test_budget_out_of_range(r):
    with pytest.raises(ValueError):
        allocate(dict.fromkeys(U14, 0.0), dict.fromkeys(U14, 1), r)
    with pytest.raises(ValueError):
        allocate_from_full(dict.fromkeys(U14, 0.0), dict.fromkeys(U14, 1), r)


def test_report_universe_mismatch():
    with pytest.raises(ValueError):
        allocate(dict.fromkeys(U14[:13], 0.0), dict.fromkeys(U14, 1), 0.1)


def test_validate_plan_messages():
    params = dict.fromkeys(U14, 100)
    good = allocate({m: float(i) for i, m in enumerate(U14)}, params, 0.10)
    assert validate_plan(good, U14, params)
    both = AllocationPlan({U14[0]}, set(U14), 0.1, 100 / 1400, 1400)
    check = validate_plan(both, U14, params)
    assert not check and check.message.startswith("partition not disjoint")
    gap = AllocationPlan(set(), set(U14[1:]), 0.1, 0.0, 1400)
    assert validate_plan(gap, U14, params).message.startswith("partition not exhaustive")
    over = AllocationPlan(set(U14[:2]), set(U14[2:]), 0.1, 200 / 1400, 1400)
    check = validate_plan(over, U14, params)
    assert not check
    assert "budget constraint violated" in check.message
    assert repr(200 / 1400) in check.message and "0.1" in check.message


def test_grid_csv_shape():
    plan = allocate({m: float(i) for i, m in enumerate(U14)}, dict.fromkeys(U14, 100), 0.10)
    rows = plan.grid_csv(2).strip().split("\n")
    assert rows[0].split(",") == ["layer", *KINDS]
    assert len(rows) == 3 and all(len(r.split(",")) == 8 for r in rows)
    assert rows[1].split(",")[1] == "FFT"


def test_plan_round_trip():
    plan = allocate({m: float(i) for i, m in enumerate(U14)}, dict.fromkeys(U14, 100), 0.25, "abc")
    back = AllocationPlan.from_dict(plan.to_dict())
    assert (back.fft_set, back.lora_set, back.used_ratio, back.report_digest) == (
        plan.fft_set, plan.lora_set, plan.used_ratio, plan.report_digest)


# ------------------------------------------------------------ properties

instances = st.integers(1, 3).flatmap(lambda L: st.tuples(
    st.just(L),
    st.lists(st.floats(0, 10, allow_nan=False), min_size=7 * L, max_size=7 * L),
    st.lists(st.integers(1, 5000), min_size=7 * L, max_size=7 * L),
    st.floats(0.001, 0.999),
))


@settings(max_examples=200, deadline=None)
@given(instances, st.floats(0.001, 0.999))
def test_feasible_monotone_maximal(inst, r2):
    L, s, p, r = inst
    U = universe(L)
    scores, params = dict(zip(U, s)), dict(zip(U, p))
    plan = allocate(scores, params, r)
    assert validate_plan(plan, U, params)
    lo, hi = sorted((r, r2))
    assert allocate(scores, params, lo).fft_set <= allocate(scores, params, hi).fft_set
    k = len(plan.fft_set)
    assert set(plan.order[:k]) == plan.fft_set
    if k < len(U):
        assert (sum(params[m] for m in plan.fft_set) + params[plan.order[k]]) / sum(p) > r
    assert allocate_from_full(scores, params, r).fft_set == plan.fft_set


def _brute_force(scores, params, r):
    """Largest feasible set; among those, the one with the lowest sorted scores."""
    total = sum(params.values())
    mods = list(scores)
    for k in range(len(mods), -1, -1):
        feasible = [set(c) for c in itertools.combinations(mods, k)
                    if sum(params[m] for m in c) / total <= r]
        if feasible:
            return min(feasible, key=lambda c: sorted(scores[m] for m in c))
    return set()


@settings(max_examples=60, deadline=None)
@given(st.permutations(range(7)), st.floats(0.01, 0.99))
def test_directions_match_brute_force_uniform(perm, r):
    U = universe(1)
    scores = {m: float(v) for m, v in zip(U, perm)}
    params = dict.fromkeys(U, 100)
    expect = _brute_force(scores, params, r)
    assert allocate(scores, params, r).fft_set == expect
    assert allocate_from_full(scores, params, r).fft_set == expect
