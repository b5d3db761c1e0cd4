"""Seeded synthetic value models and exact efficient allocations.

Two families stand in for spectrum-auction test suites:

* ``global``: ``v(x) = S(x) * (1 + alpha * |x & I|)`` where ``S`` sums base
  values over the items of interest ``I``. Synergy grows with every item.
* ``local``: items sit on a grid and ``v(x) = S(x) * (1 + sig(c) - sig(0))``
  where ``c`` is the size of the largest 4-connected component of ``x & I``
  and ``sig`` is a seeded logistic. Synergy needs adjacency.

Base values are rescaled per instance so the mean singleton value over all
(bidder, item-of-interest) pairs is exactly ``SINGLETON_MEAN``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels

DOMAIN_SCHEMA = "dlica.domain/1"
GLOBAL = "global"
LOCAL = "local"
NATIONAL = "national"
REGIONAL = "regional"
SINGLETON_MEAN = 10.0
DP_BUDGET = 10**9


class DomainError(ValueError):
    pass


class EnumerationBudgetError(DomainError):
    pass


@dataclass(frozen=True)
class Bidder:
    kind: str
    interest: tuple[int, ...]
    base: tuple[float, ...]  # aligned with ``interest``
    synergy: dict = field(hash=False)

    def interest_mask(self) -> int:
        mask = 0
        for j in self.interest:
            mask |= 1 << j
        return mask

    def base_vector(self, m: int) -> np.ndarray:
        v = np.zeros(m)
        v[list(self.interest)] = self.base
        return v


@dataclass(frozen=True)
class DomainInstance:
    family: str
    m: int
    bidders: tuple[Bidder, ...]
    rng_seed: int
    rows: int = 0
    cols: int = 0

    @property
    def n(self) -> int:
        return len(self.bidders)

    # grid -----------------------------------------------------------------

    def neighbors(self) -> np.ndarray:
        """Bitmask of 4-neighbours per item (row-major grid)."""
        out = np.zeros(self.m, dtype=np.int64)
        for j in range(self.m):
            r, c = divmod(j, self.cols)
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < self.rows and 0 <= cc < self.cols:
                    out[j] |= 1 << (rr * self.cols + cc)
        return out

    # values ---------------------------------------------------------------

    def value_table(self, bidder: int) -> np.ndarray:
        """``v_i`` for every bundle mask (bit j = item j)."""
        if not 0 <= bidder < self.n:
            raise IndexError(f"bidder {bidder} out of range")
        b = self.bidders[bidder]
        masks = np.arange(1 << self.m, dtype=np.int64)
        bits = (masks[:, None] >> np.arange(self.m)) & 1
        hit = bits * ((b.interest_mask() >> np.arange(self.m)) & 1)
        s = hit @ b.base_vector(self.m)
        if self.family == GLOBAL:
            return s * (1.0 + b.synergy["alpha"] * hit.sum(axis=1))
        comp = _kernels.largest_component(masks & b.interest_mask(), self.neighbors())
        return s * (1.0 + _logistic(comp, b.synergy) - _logistic(0, b.synergy))

    def value_tables(self) -> np.ndarray:
        return np.stack([self.value_table(i) for i in range(self.n)])

    # serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": DOMAIN_SCHEMA,
            "family": self.family,
            "m": self.m,
            "rows": self.rows,
            "cols": self.cols,
            "rng_seed": self.rng_seed,
            "bidders": [
                {"kind": b.kind, "interest": list(b.interest), "base": list(b.base),
                 "synergy": dict(sorted(b.synergy.items()))}
                for b in self.bidders
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "DomainInstance":
        if data.get("schema") != DOMAIN_SCHEMA:
            raise DomainError(f"expected schema {DOMAIN_SCHEMA!r}, got {data.get('schema')!r}")
        bidders = tuple(
            Bidder(b["kind"], tuple(int(j) for j in b["interest"]), tuple(float(v) for v in b["base"]),
                   {k: float(v) for k, v in b["synergy"].items()})
            for b in data["bidders"]
        )
        inst = cls(data["family"], int(data["m"]), bidders, int(data["rng_seed"]),
                   int(data.get("rows", 0)), int(data.get("cols", 0)))
        inst.validate()
        return inst

    @classmethod
    def from_json(cls, text: str) -> "DomainInstance":
        return cls.from_dict(json.loads(text))

    def validate(self) -> None:
        if self.family not in (GLOBAL, LOCAL):
            raise DomainError(f"unknown family {self.family!r}")
        if self.family == LOCAL and self.rows * self.cols != self.m:
            raise DomainError("grid shape does not match m")
        if not self.bidders:
            raise DomainError("instance has no bidders")
        for b in self.bidders:
            if b.kind not in (NATIONAL, REGIONAL):
                raise DomainError(f"unknown bidder type {b.kind!r}")
            if len(b.base) != len(b.interest) or any(not 0 <= j < self.m for j in b.interest):
                raise DomainError("interest set and base values are inconsistent")
            if any(not (v > 0 and math.isfinite(v)) for v in b.base):
                raise DomainError("base values must be positive and finite")


def _logistic(c, params: dict):
    return params["gamma"] / (1.0 + np.exp(-params["kappa"] * (np.asarray(c, dtype=np.float64) - params["t0"])))


def _normalize(bidders: list[Bidder], family: str, synergy_factor) -> tuple[Bidder, ...]:
    # singleton value = base * factor(1 item); rescale so the mean is SINGLETON_MEAN
    singles = [v * synergy_factor(b) for b in bidders for v in b.base]
    scale = SINGLETON_MEAN / float(np.mean(singles))
    return tuple(Bidder(b.kind, b.interest, tuple(float(v * scale) for v in b.base), b.synergy)
                 for b in bidders)


def _check_counts(n_regional: int, n_national: int) -> None:
    if n_regional < 0 or n_national < 0 or n_regional + n_national < 1:
        raise DomainError("need at least one bidder")


def gen_global_synergy(seed: int, m: int = 12, n_regional: int = 3, n_national: int = 1) -> DomainInstance:
    """Global-synergy family; regional bidders want a contiguous run of items."""
    if m < 1:
        raise DomainError("m must be positive")
    _check_counts(n_regional, n_national)
    rng = np.random.default_rng([seed, 0x6C0B])
    bidders = []
    for kind in [NATIONAL] * n_national + [REGIONAL] * n_regional:
        if kind == NATIONAL:
            interest = tuple(range(m))
            lo, hi = 0.2, 0.5
        else:
            length = int(rng.integers(max(1, m // 4), max(1, m // 2) + 1))
            first = int(rng.integers(0, m - length + 1))
            interest = tuple(range(first, first + length))
            lo, hi = 1.0, 2.0
        base = tuple(float(v) for v in rng.uniform(lo, hi, len(interest)))
        bidders.append(Bidder(kind, interest, base, {"alpha": float(rng.uniform(0.0, 0.4))}))
    bidders = _normalize(bidders, GLOBAL, lambda b: 1.0 + b.synergy["alpha"])
    inst = DomainInstance(GLOBAL, m, bidders, int(seed))
    inst.validate()
    return inst


def gen_local_synergy(seed: int, rows: int = 3, cols: int = 4, n_regional: int = 3,
                      n_national: int = 1) -> DomainInstance:
    """Local-synergy family on a ``rows x cols`` grid; regional interest is a Manhattan ball."""
    m = rows * cols
    if rows < 1 or cols < 1 or m < 2:
        raise DomainError("grid needs at least two cells")
    _check_counts(n_regional, n_national)
    rng = np.random.default_rng([seed, 0x10CA])
    bidders = []
    for kind in [NATIONAL] * n_national + [REGIONAL] * n_regional:
        if kind == NATIONAL:
            interest = tuple(range(m))
            lo, hi = 0.5, 1.0
        else:
            centre = int(rng.integers(0, m))
            radius = int(rng.integers(1, 3))
            cr, cc = divmod(centre, cols)
            interest = tuple(j for j in range(m)
                             if abs(j // cols - cr) + abs(j % cols - cc) <= radius)
            lo, hi = 0.75, 1.5
        base = tuple(float(v) for v in rng.uniform(lo, hi, len(interest)))
        synergy = {
            "gamma": float(rng.uniform(0.5, 1.5)),
            "kappa": float(rng.uniform(0.75, 1.5)),
            "t0": float(rng.uniform(2.0, 5.0)),
        }
        bidders.append(Bidder(kind, interest, base, synergy))
    bidders = _normalize(
        bidders, LOCAL,
        lambda b: 1.0 + float(_logistic(1, b.synergy)) - float(_logistic(0, b.synergy)),
    )
    inst = DomainInstance(LOCAL, m, bidders, int(seed), rows, cols)
    inst.validate()
    return inst


def generate(family: str, seed: int, **kwargs) -> DomainInstance:
    if family == GLOBAL:
        return gen_global_synergy(seed, **kwargs)
    if family == LOCAL:
        return gen_local_synergy(seed, **kwargs)
    raise DomainError(f"unknown family {family!r}")


def bundle_mask(bundle: Sequence[int] | int, m: int) -> int:
    if isinstance(bundle, (int, np.integer)):
        mask = int(bundle)
        if not 0 <= mask < (1 << m):
            raise DomainError(f"bundle mask {mask} out of range for m={m}")
        return mask
    bundle = list(bundle)
    if len(bundle) != m or any(v not in (0, 1) for v in bundle):
        raise DomainError(f"bundle must be a 0/1 vector of length {m}")
    return sum(1 << j for j, v in enumerate(bundle) if v)


def true_value(inst: DomainInstance, bidder: int, bundle: Sequence[int] | int) -> float:
    """Closed-form value of ``bundle`` (0/1 vector or mask) for ``bidder``."""
    if not 0 <= bidder < inst.n:
        raise IndexError(f"bidder {bidder} out of range")
    mask = bundle_mask(bundle, inst.m)
    b = inst.bidders[bidder]
    hit = mask & b.interest_mask()
    s = sum(v for j, v in zip(b.interest, b.base) if (hit >> j) & 1)
    if inst.family == GLOBAL:
        return float(s * (1.0 + b.synergy["alpha"] * bin(hit).count("1")))
    comp = int(_kernels.largest_component(np.array([hit], dtype=np.int64), inst.neighbors())[0])
    return float(s * (1.0 + float(_logistic(comp, b.synergy)) - float(_logistic(0, b.synergy))))


@dataclass(frozen=True)
class EfficientOutcome:
    allocation: tuple[int, ...]  # bundle mask per bidder
    welfare: float


def welfare(inst: DomainInstance, allocation: Sequence[int], tables: np.ndarray | None = None) -> float:
    """True welfare ``V(a)`` of a feasible allocation given as masks."""
    check_feasible(allocation, inst.n, inst.m)
    if tables is None:
        return math.fsum(true_value(inst, i, int(a)) for i, a in enumerate(allocation))
    return math.fsum(float(tables[i, int(a)]) for i, a in enumerate(allocation))


def check_feasible(allocation: Sequence[int], n: int, m: int) -> None:
    if len(allocation) != n:
        raise DomainError(f"allocation has {len(allocation)} bundles for {n} bidders")
    seen = 0
    for a in allocation:
        a = int(a)
        if not 0 <= a < (1 << m):
            raise DomainError(f"bundle mask {a} out of range")
        if seen & a:
            raise DomainError("allocation assigns an item twice")
        seen |= a


def efficient_allocation(inst: DomainInstance, budget: int = DP_BUDGET) -> EfficientOutcome:
    """Exact welfare maximizer by subset dynamic programming (ties: smallest sub-bundle)."""
    cost = inst.n * 3**inst.m
    if cost > budget:
        raise EnumerationBudgetError(f"n * 3^m = {cost} exceeds the budget {budget}")
    _, masks = _kernels.subset_dp(inst.value_tables())
    alloc = tuple(int(v) for v in masks)
    # re-evaluate pointwise so V(a*) and V(a) share one rounding path
    return EfficientOutcome(alloc, welfare(inst, alloc))
