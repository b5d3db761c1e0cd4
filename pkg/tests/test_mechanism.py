import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dlica.domains import efficient_allocation, gen_global_synergy, gen_local_synergy, true_value, welfare
from dlica.mechanism import (
    BidSet, CapExceeded, ElicitConfig, InfeasibleAllocation, _set_packing, efficiency, elicit,
    full_information_reports, initial_bundles, optimal_reported_allocation, pvm, query_totals,
    owner_vector, random_query_baseline, reported_welfare, settle,
)
from dlica.nn import TrainConfig
from oracles import enumerate_reported

FAST = TrainConfig(epochs=60)


def _cfg(**kw):
    base = dict(c_0=3, c_e=6, architectures={"national": (6,), "regional": (6,)}, train=FAST, node_limit=60)
    base.update(kw)
    return ElicitConfig(**base)


def _tiny(seed=0):
    return gen_local_synergy(seed, rows=2, cols=3, n_regional=2, n_national=1)


# -- BidSet -----------------------------------------------------------------


def test_bidset_rejects_duplicates_and_cap():
    bs = BidSet(0, 3, cap=2)
    bs.add(0b001, 1.0)
    with pytest.raises(ValueError):
        bs.add(0b001, 2.0)
    bs.add(0b011, 2.0)
    with pytest.raises(CapExceeded):
        bs.add(0b111, 3.0)
    assert len(bs) == 2 and bs.full
    with pytest.raises(ValueError):
        BidSet(0, 3, 5).add(8, 1.0)
    with pytest.raises(ValueError):
        BidSet(0, 3, 5).add(1, -1.0)


def test_bidset_arrays_and_dict():
    bs = BidSet(2, 3, 4, [(0b101, 4.0), (0b010, 1.5)])
    X, y = bs.as_arrays()
    np.testing.assert_array_equal(X, [[1, 0, 1], [0, 1, 0]])
    np.testing.assert_array_equal(y, [4.0, 1.5])
    assert bs.to_dict() == {"bidder": 2, "cap": 4, "pairs": [{"items": [0, 2], "value": 4.0},
                                                              {"items": [1], "value": 1.5}]}
    assert bs.value_of(0) == 0.0 and bs.value_of(0b111) is None


# -- reported welfare -------------------------------------------------------


def test_reported_welfare_empty_reports():
    assert reported_welfare((0b01, 0b10), {}) == 0.0


def test_reported_welfare_all_reported():
    b = {0: BidSet(0, 2, 4, [(0b01, 3.0)]), 1: BidSet(1, 2, 4, [(0b10, 2.0)])}
    assert reported_welfare((0b01, 0b10), b) == 5.0


def test_reported_welfare_unreported_term_absent():
    b = {0: BidSet(0, 2, 4, [(0b01, 3.0)]), 1: BidSet(1, 2, 4, [(0b11, 2.0)])}
    assert reported_welfare((0b01, 0b10), b) == 3.0


def test_reported_welfare_infeasible():
    with pytest.raises(InfeasibleAllocation):
        reported_welfare((0b11, 0b10), {})


# -- optimal reported allocation --------------------------------------------


def test_full_bundle_tie_goes_to_lower_id():
    full = 0b1111
    b = {0: BidSet(0, 4, 4, [(full, 5.0)]), 1: BidSet(1, 4, 4, [(full, 5.0)])}
    assert optimal_reported_allocation(b, 2, 4) == (full, 0)
    b[1] = BidSet(1, 4, 4, [(full, 6.0)])
    assert optimal_reported_allocation(b, 2, 4) == (0, full)


def test_disjoint_reports_both_allocated():
    b = {0: BidSet(0, 4, 4, [(0b0011, 1.0)]), 1: BidSet(1, 4, 4, [(0b1100, 1.0)])}
    assert optimal_reported_allocation(b, 2, 4) == (0b0011, 0b1100)


def test_tie_prefers_fewer_items():
    b = {0: BidSet(0, 3, 4, [(0b001, 2.0), (0b111, 2.0)])}
    assert optimal_reported_allocation(b, 1, 3) == (0b001,)


def _random_reports(seed, n=3, m=6, k=6):
    rng = np.random.default_rng(seed)
    out = {}
    for i in range(n):
        masks = rng.choice(1 << m, size=k, replace=False)
        out[i] = BidSet(i, m, k, ((int(s), float(rng.uniform(0, 10))) for s in masks))
    return out


@given(st.integers(0, 2**31 - 1))
def test_optimal_reported_allocation_matches_enumeration(seed):
    reports = _random_reports(seed)
    best, winners = enumerate_reported({i: dict(bs) for i, bs in reports.items()}, 3)
    a = optimal_reported_allocation(reports, 3, 6)
    assert reported_welfare(a, reports) == pytest.approx(best, abs=1e-9)
    assert a in winners
    # tie-break: fewest items, then smallest owner vector
    key = lambda c: (sum(bin(k).count("1") for k in c), owner_vector(c, 6))  # noqa: E731
    assert a == min(winners, key=key)


@given(st.integers(0, 2**31 - 1))
def test_set_packing_fallback_agrees(seed):
    reports = _random_reports(seed, k=5)
    exact = optimal_reported_allocation(reports, 3, 6)
    assert optimal_reported_allocation(reports, 3, 6, budget=3) is not None
    packed = _set_packing(reports, [0, 1, 2], 3, 6)
    assert reported_welfare(packed, reports) == pytest.approx(reported_welfare(exact, reports), abs=1e-6)


# -- elicitation ------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        ElicitConfig(c_0=0)
    with pytest.raises(ValueError):
        ElicitConfig(c_0=5, c_e=4)


def test_initial_bundles_are_distinct_and_seeded():
    a = initial_bundles(6, 10, 3)
    assert len(set(a)) == 10 and a == initial_bundles(6, 10, 3)
    with pytest.raises(ValueError):
        initial_bundles(2, 5, 0)


def test_cap_equal_to_initial_binds_immediately():
    inst = _tiny()
    cfg = _cfg(c_0=4, c_e=4)
    init = initial_bundles(inst.m, 4, 0)
    run = elicit(inst, range(inst.n), cfg, initial=init)
    assert run.rounds == 1
    for bs in run.bidsets.values():
        assert bs.masks() == init
    assert run.transcript[0]["queries"] == []


def test_full_bundle_space_stops_in_first_round():
    inst = gen_global_synergy(0, m=2, n_regional=1, n_national=1)
    run = elicit(inst, range(2), _cfg(c_0=4, c_e=6))
    assert run.rounds == 1 and run.transcript[0]["queries"] == []


def test_elicit_transcript_replays_against_domain():
    inst = _tiny(4)
    cfg = _cfg(c_0=3, c_e=7, rng_seed=4)
    run = elicit(inst, range(inst.n), cfg)
    assert run.transcript[-1]["queries"] == []
    asked = {i: list(initial_bundles(inst.m, 3, 4)) for i in range(inst.n)}
    for rec in run.transcript:
        assert rec["schema"] == "dlica.transcript/1" and rec["economy"] == "main"
        for q in rec["queries"]:
            mask = sum(1 << j for j in q["items"])
            assert q["value"] == true_value(inst, q["bidder"], mask)
            assert mask not in asked[q["bidder"]] and mask != 0
            asked[q["bidder"]].append(mask)
    for i, bs in run.bidsets.items():
        assert len(bs) <= 7
        assert bs.masks() == asked[i]
        for k, v in bs:
            assert v == true_value(inst, i, k)


def test_elicit_is_deterministic():
    inst = _tiny(6)
    cfg = _cfg(rng_seed=6)
    a = elicit(inst, [0, 2], cfg)
    b = elicit(inst, [0, 2], cfg)
    assert json.dumps(a.transcript, sort_keys=True) == json.dumps(b.transcript, sort_keys=True)
    assert a.label == "-1"


def test_elicit_rejects_bad_economy():
    with pytest.raises(ValueError):
        elicit(_tiny(), [], _cfg())
    with pytest.raises(IndexError):
        elicit(_tiny(), [7], _cfg())


# -- PVM --------------------------------------------------------------------


def test_single_bidder_pays_nothing():
    inst = gen_global_synergy(1, m=4, n_regional=1, n_national=0)
    res = pvm(inst, _cfg(c_0=3, c_e=5))
    assert res.payments == (0.0,)
    assert 0.0 < res.efficiency <= 1.0


def test_unallocated_bidder_with_matching_marginal_pays_zero():
    inst = gen_global_synergy(2, m=3, n_regional=1, n_national=1)
    # bidder 1 reports nothing useful; the main and "-1" economies coincide on bidder 0
    r0 = BidSet(0, 3, 8, [(0b111, true_value(inst, 0, 0b111))])
    reports = {"main": {0: r0, 1: BidSet(1, 3, 8)}, "-0": {1: BidSet(1, 3, 8)}, "-1": {0: r0}}
    res = settle(inst, reports)
    assert res.allocation == (0b111, 0)
    assert res.payments[1] == 0.0


def test_full_information_auction():
    inst = gen_local_synergy(3, rows=2, cols=3, n_regional=1, n_national=1)
    reports = {"main": full_information_reports(inst, [0, 1]),
               "-0": full_information_reports(inst, [1]),
               "-1": full_information_reports(inst, [0])}
    res = settle(inst, reports)
    opt = efficient_allocation(inst)
    assert res.efficiency == 1.0
    assert welfare(inst, res.allocation) == opt.welfare
    # hand-derived payments: p_i = max_{x} v_j(x) - v_j(a_j) for the other bidder j
    for i, j in ((0, 1), (1, 0)):
        best_alone = max(true_value(inst, j, k) for k in range(1 << inst.m))
        expected = math.fsum([best_alone]) - math.fsum([true_value(inst, j, res.allocation[j])])
        assert res.payments[i] == expected


def test_pvm_invariants():
    inst = _tiny(8)
    cfg = _cfg(c_0=3, c_e=6, rng_seed=8)
    res = pvm(inst, cfg)
    n = inst.n
    assert set(res.runs) == {"main", "-0", "-1", "-2"}
    assert 0.0 <= res.efficiency <= 1.0
    assert all(p >= 0 for p in res.payments_clamped)
    assert all(max(0.0, p) == q for p, q in zip(res.payments, res.payments_clamped))
    for run in res.runs.values():
        assert all(len(bs) <= cfg.c_e for bs in run.bidsets.values())
    assert all(q <= cfg.c_0 + n * (cfg.c_e - cfg.c_0) for q in res.queries)
    chosen = res.candidate_welfare[res.chosen]
    assert all(chosen >= w for w in res.candidate_welfare.values())
    assert res.revenue == pytest.approx(sum(res.payments) / res.optimal_welfare)
    # payments re-derived from the stored transcripts bit-exactly
    pool = {i: {} for i in range(n)}
    for run in res.runs.values():
        for rec in run.transcript:
            for q in rec["queries"]:
                pool[q["bidder"]].setdefault(sum(1 << j for j in q["items"]), q["value"])
    for k in initial_bundles(inst.m, cfg.c_0, cfg.rng_seed):
        for i in range(n):
            pool[i].setdefault(k, true_value(inst, i, k))
    v = lambda j, k: pool[j].get(k, 0.0) if k else 0.0  # noqa: E731
    for i in range(n):
        marg = res.candidates[f"-{i}"]
        others = [j for j in range(n) if j != i]
        p = math.fsum(v(j, marg[j]) for j in others) - math.fsum(v(j, res.allocation[j]) for j in others)
        assert p == res.payments[i]


def test_query_totals_count_initial_once():
    class Run:
        def __init__(self, sizes):
            self.bidsets = {i: type("B", (), {"__len__": lambda s, n=n: n})() for i, n in sizes.items()}

    runs = {"main": Run({0: 5, 1: 4}), "-0": Run({1: 6}), "-1": Run({0: 3})}
    assert query_totals(runs, 2, 3) == (3 + 2 + 0, 3 + 1 + 3)


def test_efficiency_bounds():
    inst = _tiny(1)
    opt = efficient_allocation(inst)
    assert efficiency(opt.allocation, inst) == 1.0
    assert efficiency((0, 0, 0), inst) == 0.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        owners = rng.integers(0, inst.n + 1, size=inst.m)
        a = tuple(sum(1 << j for j in range(inst.m) if owners[j] == i + 1) for i in range(inst.n))
        e = efficiency(a, inst)
        assert 0.0 <= e <= 1.0
        assert e == pytest.approx(sum(true_value(inst, i, a[i]) for i in range(inst.n)) / opt.welfare)


def test_random_baseline_uses_the_budget():
    inst = _tiny(2)
    a, e = random_query_baseline(inst, [4, 4, 4], seed=1)
    assert 0.0 <= e <= 1.0
    assert a == random_query_baseline(inst, [4, 4, 4], seed=1)[0]
