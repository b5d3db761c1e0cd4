"""Auction layer: bid sets, reported welfare, ML-based elicitation and PVM.

Bundles are integer masks throughout (bit j = item j); files list the item
indices instead. Bidders keep their global ids inside every economy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domains import DomainInstance, efficient_allocation, true_value, welfare
from .mip import BINARY, MipModel, allocation_from_assignment, encode_wdp, wdp_solver_hooks
from .nn import Architecture, TrainConfig, train
from .solver import solve_mip

TRANSCRIPT_SCHEMA = "dlica.transcript/1"
PVM_SCHEMA = "dlica.pvm/1"
COMBINATION_BUDGET = 10**6
MAIN = "main"


class CapExceeded(RuntimeError):
    pass


class InfeasibleAllocation(ValueError):
    pass


class ElicitationError(RuntimeError):
    """Elicitation stopped without an allocation; carries what was gathered so far."""

    def __init__(self, message: str, transcript: list[dict], bidsets: dict[int, "BidSet"]):
        super().__init__(message)
        self.transcript = transcript
        self.bidsets = bidsets


def items_of(mask: int) -> list[int]:
    return [j for j in range(int(mask).bit_length()) if (mask >> j) & 1]


def mask_of(items: Iterable[int]) -> int:
    mask = 0
    for j in items:
        mask |= 1 << int(j)
    return mask


def _popcount(mask: int) -> int:
    return bin(mask).count("1")


class BidSet:
    """Reported bundle-value pairs of one bidder, in query order."""

    def __init__(self, bidder: int, m: int, cap: int, pairs: Iterable[tuple[int, float]] = ()):
        if cap < 0:
            raise ValueError("cap must be nonnegative")
        self.bidder = int(bidder)
        self.m = int(m)
        self.cap = int(cap)
        self._pairs: dict[int, float] = {}
        for mask, value in pairs:
            self.add(mask, value)

    def add(self, mask: int, value: float) -> None:
        mask = int(mask)
        if not 0 <= mask < (1 << self.m):
            raise ValueError(f"bundle mask {mask} out of range for m={self.m}")
        if mask in self._pairs:
            raise ValueError(f"bidder {self.bidder} already reported bundle {items_of(mask)}")
        if len(self._pairs) >= self.cap:
            raise CapExceeded(f"bidder {self.bidder} is at the query cap {self.cap}")
        if not (value >= 0 and math.isfinite(value)):
            raise ValueError("reported values must be finite and nonnegative")
        self._pairs[mask] = float(value)

    def __contains__(self, mask) -> bool:
        return int(mask) in self._pairs

    def __len__(self) -> int:
        return len(self._pairs)

    def __iter__(self):
        return iter(self._pairs.items())

    @property
    def full(self) -> bool:
        return len(self._pairs) >= self.cap

    def value_of(self, mask: int) -> float | None:
        """Reported value, 0 for the empty bundle, ``None`` if never reported."""
        mask = int(mask)
        if mask == 0:
            return 0.0
        return self._pairs.get(mask)

    def masks(self) -> list[int]:
        return list(self._pairs)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        masks = np.array(list(self._pairs), dtype=np.int64)
        X = ((masks[:, None] >> np.arange(self.m)) & 1).astype(np.float64)
        return X, np.array(list(self._pairs.values()), dtype=np.float64)

    def copy(self, cap: int | None = None) -> "BidSet":
        return BidSet(self.bidder, self.m, self.cap if cap is None else cap, self._pairs.items())

    def to_dict(self) -> dict:
        return {"bidder": self.bidder, "cap": self.cap,
                "pairs": [{"items": items_of(k), "value": v} for k, v in self._pairs.items()]}


# ---------------------------------------------------------------------------
# reported welfare
# ---------------------------------------------------------------------------


def _check_allocation(allocation: Sequence[int], m: int | None = None) -> None:
    used = 0
    for a in allocation:
        a = int(a)
        if a < 0 or (m is not None and a >= (1 << m)):
            raise InfeasibleAllocation(f"bundle mask {a} out of range")
        if used & a:
            raise InfeasibleAllocation("an item is allocated twice")
        used |= a


def reported_welfare(allocation: Sequence[int], bidsets: Mapping[int, BidSet]) -> float:
    """Sum of reports for assigned bundles that were reported verbatim; others count 0."""
    _check_allocation(allocation)
    terms = []
    for i, bs in bidsets.items():
        if i >= len(allocation):
            continue
        v = bs.value_of(allocation[i])
        if v is not None:
            terms.append(v)
    return math.fsum(terms)


def owner_vector(allocation: Sequence[int], m: int) -> tuple[int, ...]:
    """Entry j is 0 if item j is unassigned, else ``i + 1`` for its owner i."""
    out = [0] * m
    for i, a in enumerate(allocation):
        for j in range(m):
            if (a >> j) & 1:
                out[j] = i + 1
    return tuple(out)


def _better(w, items, owners, best) -> bool:
    bw, bitems, bowners, _ = best
    tol = 1e-9 * (1.0 + abs(bw))
    if w > bw + tol:
        return True
    if w < bw - tol:
        return False
    return (items, owners) < (bitems, bowners)


class _SearchBudget(Exception):
    pass


def optimal_reported_allocation(bidsets: Mapping[int, BidSet], n: int, m: int,
                                budget: int = COMBINATION_BUDGET) -> tuple[int, ...]:
    """Maximizer of reported welfare over feasible allocations of ``n`` bidders.

    Depth-first search over (reported bundle or nothing) per bidder with item
    disjointness and value-bound pruning. Ties go to fewer allocated items,
    then to the lexicographically smallest owner vector, so lower ids win. If the search visits more than
    ``budget`` partial combinations it falls back to a set-packing MIP.
    """
    bidders = sorted(i for i in bidsets if 0 <= i < n)
    options = []
    for i in bidders:
        opts = sorted(((v, k) for k, v in bidsets[i] if k != 0), key=lambda t: (-t[0], _popcount(t[1]), t[1]))
        options.append(opts)
    suffix = [0.0] * (len(bidders) + 1)
    for p in range(len(bidders) - 1, -1, -1):
        suffix[p] = suffix[p + 1] + (options[p][0][0] if options[p] else 0.0)

    best = [(0.0, 0, tuple([0] * m), tuple([0] * n))]
    chosen = [0] * n
    visited = [0]

    def rec(p, used, cur, n_items):
        visited[0] += 1
        if visited[0] > budget:
            raise _SearchBudget
        if p == len(bidders):
            cand = tuple(chosen)
            owners = owner_vector(cand, m)
            if _better(cur, n_items, owners, best[0]):
                best[0] = (cur, n_items, owners, cand)
            return
        bw = best[0][0]
        if cur + suffix[p] < bw - 1e-9 * (1.0 + abs(bw)):
            return
        i = bidders[p]
        for v, k in options[p]:
            if k & used:
                continue
            chosen[i] = k
            rec(p + 1, used | k, cur + v, n_items + _popcount(k))
        chosen[i] = 0
        rec(p + 1, used, cur, n_items)

    try:
        rec(0, 0, 0.0, 0)
    except _SearchBudget:
        return _set_packing(bidsets, bidders, n, m)
    return best[0][3]


def _set_packing(bidsets, bidders, n, m) -> tuple[int, ...]:
    model = MipModel(name="set_packing")
    owner = []
    for i in bidders:
        ids = []
        for k, v in bidsets[i]:
            if k == 0:
                continue
            ids.append(model.add_var(f"x_{i}_{k}", BINARY, 0.0, 1.0))
            owner.append((model.n_vars - 1, i, k, v))
        if len(ids) > 1:
            model.add_constraint({t: 1.0 for t in ids}, "<=", 1.0, f"one_{i}")
    for j in range(m):
        row = {t: 1.0 for t, _, k, _ in owner if (k >> j) & 1}
        if len(row) > 1:
            model.add_constraint(row, "<=", 1.0, f"item_{j}")
    model.set_objective({t: v for t, _, _, v in owner})
    alloc = [0] * n
    if not owner:
        return tuple(alloc)
    res = solve_mip(model)
    for t, i, k, _ in owner:
        if res.assignment.get(t, 0.0) > 0.5:
            alloc[i] = k
    return tuple(alloc)


# ---------------------------------------------------------------------------
# elicitation
# ---------------------------------------------------------------------------


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint32)[0])


def _default_architectures() -> dict:
    return {"national": (10,), "regional": (10,)}


@dataclass(frozen=True)
class ElicitConfig:
    c_0: int = 10
    c_e: int = 30
    architectures: dict = field(default_factory=_default_architectures)
    train: TrainConfig = field(default_factory=TrainConfig)
    time_limit: float = 600.0
    node_limit: int | None = 100
    rng_seed: int = 0

    def __post_init__(self):
        if not 1 <= self.c_0 <= self.c_e:
            raise ValueError(f"need 1 <= c_0 <= c_e, got c_0={self.c_0}, c_e={self.c_e}")
        if self.node_limit is not None and self.node_limit < 1:
            raise ValueError("node_limit must be positive")
        if not self.time_limit > 0:
            raise ValueError("time_limit must be positive")

    def architecture(self, kind: str, m: int) -> Architecture:
        if kind not in self.architectures:
            raise KeyError(f"no architecture configured for bidder type {kind!r}")
        return Architecture.from_hidden(m, list(self.architectures[kind]))

    def to_dict(self) -> dict:
        t = self.train
        return {
            "c_0": self.c_0, "c_e": self.c_e,
            "architectures": {k: list(v) for k, v in sorted(self.architectures.items())},
            "train": {"learning_rate": t.learning_rate, "l2_penalty": t.l2_penalty,
                      "dropout_rate": list(t.dropout_rate) if isinstance(t.dropout_rate, tuple) else t.dropout_rate,
                      "epochs": t.epochs, "batch_size": t.batch_size},
            "time_limit": self.time_limit, "node_limit": self.node_limit, "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ElicitConfig":
        data = dict(data)
        tr = dict(data.pop("train", {}))
        if isinstance(tr.get("dropout_rate"), list):
            tr["dropout_rate"] = tuple(tr["dropout_rate"])
        archs = {k: tuple(int(d) for d in v) for k, v in data.pop("architectures", _default_architectures()).items()}
        return cls(architectures=archs, train=TrainConfig(**tr), **data)


def initial_bundles(m: int, c_0: int, seed: int) -> list[int]:
    """``c_0`` distinct bundles drawn uniformly from all ``2^m`` (the empty one included)."""
    if c_0 > (1 << m):
        raise ValueError(f"c_0={c_0} exceeds the {1 << m} bundles of {m} items")
    rng = np.random.default_rng(derive_seed(seed, 0))
    return [int(k) for k in rng.choice(1 << m, size=c_0, replace=False)]


@dataclass
class ElicitRun:
    economy: tuple[int, ...]
    label: str
    bidsets: dict[int, BidSet]
    transcript: list[dict]

    @property
    def rounds(self) -> int:
        return len(self.transcript)


def economy_label(economy: Sequence[int], n: int) -> str:
    missing = [i for i in range(n) if i not in economy]
    return MAIN if not missing else "-" + ",".join(str(i) for i in missing)


def elicit(inst: DomainInstance, economy: Sequence[int], cfg: ElicitConfig,
           initial: Sequence[int] | None = None) -> ElicitRun:
    """ML-based elicitation for the bidders in ``economy``.

    Every round retrains one network per bidder from scratch on its reports,
    solves the network WDP and queries each bidder whose allocated bundle is
    new, unless the bidder is at ``c_e``. Stops after a round without queries.
    """
    economy = tuple(sorted(set(int(i) for i in economy)))
    if not economy:
        raise ValueError("economy must contain at least one bidder")
    if any(not 0 <= i < inst.n for i in economy):
        raise IndexError("economy names an unknown bidder")
    m = inst.m
    if initial is None:
        initial = initial_bundles(m, cfg.c_0, cfg.rng_seed)
    if len(initial) > cfg.c_e:
        raise CapExceeded("more initial bundles than the query cap")
    label = economy_label(economy, inst.n)
    bidsets = {i: BidSet(i, m, cfg.c_e, ((k, true_value(inst, i, k)) for k in initial)) for i in economy}
    transcript: list[dict] = []
    t = 0
    while True:
        t += 1
        nets = [
            train(cfg.architecture(inst.bidders[i].kind, m), bidsets[i],
                  cfg=replace(cfg.train, rng_seed=derive_seed(cfg.rng_seed, 1, t, i)))
            for i in economy
        ]
        model = encode_wdp(nets)
        res = solve_mip(model, time_limit=cfg.time_limit, node_limit=cfg.node_limit,
                        **wdp_solver_hooks(model, nets))
        record = {
            "schema": TRANSCRIPT_SCHEMA, "economy": label, "round": t,
            "mip_status": res.status,
            "mip_objective": res.objective if math.isfinite(res.objective) else None,
            "mip_gap": res.gap if math.isfinite(res.gap) else None,
            "mip_nodes": res.nodes_explored,
        }
        if not res.assignment:
            record.update(allocation=None, queries=[], capped=[])
            transcript.append(record)
            raise ElicitationError(f"round {t} of economy {label}: the WDP solve found no allocation",
                                   transcript, bidsets)
        x = np.array([res.assignment[k] for k in range(model.n_vars)])
        local = allocation_from_assignment(model, x)
        alloc = [0] * inst.n
        for pos, i in enumerate(economy):
            alloc[i] = int(local[pos])
        queries, capped = [], []
        for i in economy:
            a = alloc[i]
            if a == 0 or a in bidsets[i]:
                continue
            if bidsets[i].full:
                capped.append(i)
                continue
            v = true_value(inst, i, a)
            bidsets[i].add(a, v)
            queries.append({"bidder": i, "items": items_of(a), "value": v})
        record.update(allocation=[items_of(a) for a in alloc], queries=queries, capped=capped)
        transcript.append(record)
        if not queries:
            return ElicitRun(economy, label, bidsets, transcript)


# ---------------------------------------------------------------------------
# PVM
# ---------------------------------------------------------------------------


@dataclass
class PvmResult:
    allocation: tuple[int, ...]
    payments: tuple[float, ...]
    payments_clamped: tuple[float, ...]
    efficiency: float
    revenue: float
    revenue_clamped: float
    welfare: float
    optimal_welfare: float
    chosen: str
    candidates: dict[str, tuple[int, ...]]
    candidate_welfare: dict[str, float]
    queries: tuple[int, ...] = ()
    runs: dict[str, ElicitRun] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": PVM_SCHEMA,
            "allocation": [items_of(a) for a in self.allocation],
            "payments": list(self.payments),
            "payments_clamped": list(self.payments_clamped),
            "efficiency": self.efficiency,
            "revenue": self.revenue,
            "revenue_clamped": self.revenue_clamped,
            "welfare": self.welfare,
            "optimal_welfare": self.optimal_welfare,
            "chosen_economy": self.chosen,
            "candidates": {k: [items_of(a) for a in v] for k, v in self.candidates.items()},
            "candidate_reported_welfare": dict(self.candidate_welfare),
            "queries_per_bidder": list(self.queries),
            "rounds": {k: r.rounds for k, r in self.runs.items()},
        }

    def transcript_lines(self) -> list[str]:
        return [json.dumps(rec, sort_keys=True) for r in self.runs.values() for rec in r.transcript]


def economies(n: int) -> list[tuple[str, tuple[int, ...]]]:
    """Main economy first, then the marginal economy without bidder i, i ascending."""
    out = [(MAIN, tuple(range(n)))]
    for i in range(n):
        out.append((f"-{i}", tuple(j for j in range(n) if j != i)))
    return out


def _pooled(reports: Mapping[str, Mapping[int, BidSet]], n: int) -> dict[int, dict[int, float]]:
    pool: dict[int, dict[int, float]] = {i: {} for i in range(n)}
    for bidsets in reports.values():
        for i, bs in bidsets.items():
            for k, v in bs:
                pool[i].setdefault(k, v)
    return pool


def _pooled_value(pool, i, mask) -> float:
    if mask == 0:
        return 0.0
    return pool[i].get(mask, 0.0)


def settle(inst: DomainInstance, reports: Mapping[str, Mapping[int, BidSet]],
           optimal_welfare: float | None = None) -> PvmResult:
    """Allocation and payments from the reports of all ``n + 1`` economies.

    ``reports`` maps ``"main"`` and ``"-i"`` to bid sets. Reported values are
    pooled per bidder across economies when scoring candidates and payments.
    """
    n, m = inst.n, inst.m
    pool = _pooled(reports, n)
    candidates: dict[str, tuple[int, ...]] = {}
    scores: dict[str, float] = {}
    for label, _ in economies(n):
        bidsets = reports.get(label, {})
        a = optimal_reported_allocation(bidsets, n, m) if bidsets else tuple([0] * n)
        candidates[label] = a
        scores[label] = math.fsum(_pooled_value(pool, i, a[i]) for i in range(n))
    chosen = MAIN
    for label in candidates:
        if scores[label] > scores[chosen]:
            chosen = label
    a_pvm = candidates[chosen]
    payments = []
    for i in range(n):
        marg = candidates[f"-{i}"]
        others = [j for j in range(n) if j != i]
        p = math.fsum(_pooled_value(pool, j, marg[j]) for j in others) - \
            math.fsum(_pooled_value(pool, j, a_pvm[j]) for j in others)
        payments.append(p)
    clamped = [max(0.0, p) for p in payments]
    if optimal_welfare is None:
        optimal_welfare = efficient_allocation(inst).welfare
    if not optimal_welfare > 0:
        raise ValueError("optimal welfare is zero; efficiency is undefined")
    w = welfare(inst, a_pvm)
    return PvmResult(
        allocation=a_pvm, payments=tuple(payments), payments_clamped=tuple(clamped),
        efficiency=_ratio(w, optimal_welfare), revenue=math.fsum(payments) / optimal_welfare,
        revenue_clamped=math.fsum(clamped) / optimal_welfare, welfare=w,
        optimal_welfare=optimal_welfare, chosen=chosen, candidates=candidates, candidate_welfare=scores,
    )


def query_totals(runs: Mapping[str, ElicitRun], n: int, c_0: int) -> tuple[int, ...]:
    """Per-bidder queries across all runs; the shared initial bundles count once."""
    totals = [0] * n
    seen_initial = [False] * n
    for run in runs.values():
        for i, bs in run.bidsets.items():
            extra = len(bs) - c_0
            totals[i] += extra
            if not seen_initial[i]:
                totals[i] += c_0
                seen_initial[i] = True
    return tuple(totals)


def pvm(inst: DomainInstance, cfg: ElicitConfig) -> PvmResult:
    """Run elicitation in the main and every marginal economy, then settle."""
    initial = initial_bundles(inst.m, cfg.c_0, cfg.rng_seed)
    runs: dict[str, ElicitRun] = {}
    for label, econ in economies(inst.n):
        if econ:
            runs[label] = elicit(inst, econ, cfg, initial=initial)
    result = settle(inst, {label: run.bidsets for label, run in runs.items()})
    result.runs = runs
    result.queries = query_totals(runs, inst.n, cfg.c_0)
    return result


def efficiency(allocation: Sequence[int], inst: DomainInstance, optimal_welfare: float | None = None) -> float:
    """``V(a) / V(a*)`` for a feasible allocation given as masks."""
    if optimal_welfare is None:
        optimal_welfare = efficient_allocation(inst).welfare
    if not optimal_welfare > 0:
        raise ValueError("optimal welfare is zero; efficiency is undefined")
    return _ratio(welfare(inst, allocation), optimal_welfare)


def _ratio(w: float, opt: float) -> float:
    # a* is exact, so anything above 1 beyond rounding is a bug upstream
    r = w / opt
    if r > 1.0 + 1e-9:
        raise ValueError(f"welfare {w} exceeds the optimum {opt}")
    return min(r, 1.0)


def full_information_reports(inst: DomainInstance, economy: Sequence[int]) -> dict[int, BidSet]:
    """Truthful reports of every nonempty bundle, for degenerate full-information auctions."""
    size = 1 << inst.m
    out = {}
    for i in economy:
        table = inst.value_table(i)
        out[i] = BidSet(i, inst.m, size, ((k, float(table[k])) for k in range(1, size)))
    return out


def random_query_baseline(inst: DomainInstance, budgets: Sequence[int], seed: int,
                          optimal_welfare: float | None = None) -> tuple[tuple[int, ...], float]:
    """Uninformed elicitation: ``budgets[i]`` distinct uniform bundles per bidder.

    Returns the reported-welfare-optimal allocation and its efficiency.
    """
    size = 1 << inst.m
    bidsets = {}
    for i, k in enumerate(budgets):
        rng = np.random.default_rng(derive_seed(seed, 2, i))
        masks = rng.choice(size, size=min(int(k), size), replace=False)
        bidsets[i] = BidSet(i, inst.m, size, ((int(b), true_value(inst, i, int(b))) for b in masks))
    a = optimal_reported_allocation(bidsets, inst.n, inst.m)
    return a, efficiency(a, inst, optimal_welfare)
