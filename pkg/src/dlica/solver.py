"""Desk-scale MIP solving: bounded simplex, best-first branch-and-bound, brute-force WDP."""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .mip import BINARY, MipModel
from .nn import ValueNetwork, value_table

OPTIMAL = "optimal"
FEASIBLE_TIME_LIMIT = "feasible_time_limit"
INFEASIBLE = "infeasible"

INT_TOL = 1e-6
GAP_TOL = 1e-6
FEAS_TOL = 1e-7
PIVOT_FEAS_TOL = 1e-9
ENUMERATION_BUDGET = 10**7


class LpNumericalError(ArithmeticError):
    pass


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class LpResult:
    status: str
    objective: float
    x: np.ndarray | None
    iterations: int = 0


@dataclass(frozen=True)
class SolveResult:
    status: str
    objective: float
    assignment: dict[int, float]
    gap: float
    nodes_explored: int
    wall_time: float = field(default=0.0, compare=False)
    root_bound: float = math.nan

    def to_dict(self, model: MipModel | None = None) -> dict:
        if model is not None:
            assignment = {model.variables[k].name: v for k, v in sorted(self.assignment.items())}
        else:
            assignment = {str(k): v for k, v in sorted(self.assignment.items())}
        return {
            "status": self.status,
            "objective": self.objective if math.isfinite(self.objective) else str(self.objective),
            "gap": self.gap if math.isfinite(self.gap) else str(self.gap),
            "nodes_explored": self.nodes_explored,
            "assignment": assignment,
        }


class _LpState:
    """A solved tableau plus the bounds it is expressed against."""

    __slots__ = ("T", "basis", "flipped", "lb", "ub", "pivots")

    def __init__(self, T, basis, flipped, lb, ub, pivots):
        self.T, self.basis, self.flipped = T, basis, flipped
        self.lb, self.ub, self.pivots = lb, ub, pivots

    @property
    def nbytes(self) -> int:
        return 0 if self.T is None else self.T.nbytes


class _LpEngine:
    """Bounded simplex over a fixed row structure; only variable bounds vary.

    Columns are the structural variables followed by one logical per row
    (``+e_r`` in [0, inf) for <=, ``-e_r`` in [0, inf) for >=, ``+e_r`` fixed
    at 0 for =). Cold solves run a dual phase with shifted costs, then primal
    phase 2; warm solves start from a parent tableau, absorb bound changes
    into the basic values and run dual simplex.

    Variable-upper-bound rows ``x - M y <= 0`` and ``x + M y <= M`` (x
    continuous with coefficient 1, y binary) get ``M`` replaced by the
    current upper bound of ``x`` when that is smaller. The coefficient is a
    function of the bounds, so every tableau stays reproducible from its
    basis and bounds alone.
    """

    REFACTOR_EVERY = 5000

    def __init__(self, c, A, sense, b, is_bin=None):
        self.c = np.asarray(c, dtype=np.float64)
        self.A = np.asarray(A, dtype=np.float64)
        self.sense = np.asarray(sense, dtype=np.int64)
        self.b = np.asarray(b, dtype=np.float64)
        R, n = self.A.shape
        self.R, self.n, self.N = R, n, n + R
        self.sigma = np.where(self.sense > 0, -1.0, 1.0)
        self.M = np.hstack([self.A, np.diag(self.sigma)])
        self.cF = np.concatenate([self.c, np.zeros(R)])
        self.ub_logical = np.where(self.sense == 0, 0.0, np.inf)
        self.b_scale = 1.0 + float(np.abs(self.b).max(initial=0.0))
        self._find_vub(is_bin)

    @classmethod
    def from_model(cls, model: MipModel) -> "_LpEngine":
        c, A, sense, b, _, _, is_bin = model.to_arrays()
        return cls(c, A, sense, b, is_bin)

    def _find_vub(self, is_bin):
        rows, xs, ys, kinds, big = [], [], [], [], []
        if is_bin is not None:
            for r in np.nonzero(self.sense < 0)[0]:
                nz = np.nonzero(self.A[r])[0]
                if nz.size != 2 or is_bin[nz[0]] == is_bin[nz[1]]:
                    continue
                y, x = (nz[0], nz[1]) if is_bin[nz[0]] else (nz[1], nz[0])
                a_y = self.A[r, y]
                if self.A[r, x] != 1.0:
                    continue
                if a_y < 0 and self.b[r] == 0.0:
                    kind = 0
                elif a_y > 0 and self.b[r] == a_y:
                    kind = 1
                else:
                    continue
                rows.append(r)
                xs.append(x)
                ys.append(y)
                kinds.append(kind)
                big.append(abs(a_y))
        self.vub_row = np.asarray(rows, dtype=np.int64)
        self.vub_x = np.asarray(xs, dtype=np.int64)
        self.vub_y = np.asarray(ys, dtype=np.int64)
        self.vub_kind = np.asarray(kinds, dtype=np.int64)
        self.vub_M = np.asarray(big, dtype=np.float64)

    def _coefs(self, ubF):
        return np.minimum(self.vub_M, np.maximum(ubF[self.vub_x], 0.0))

    def _system(self, ubF):
        """Row matrix and rhs with variable-upper-bound coefficients for bounds ``ubF``."""
        if self.vub_row.size == 0:
            return self.M, self.b
        M, b = self.M.copy(), self.b.copy()
        big = self._coefs(ubF)
        M[self.vub_row, self.vub_y] = np.where(self.vub_kind == 0, -big, big)
        b[self.vub_row] = np.where(self.vub_kind == 1, big, b[self.vub_row])
        return M, b

    def _full(self, lb, ub):
        lb = np.asarray(lb, dtype=np.float64)
        ub = np.asarray(ub, dtype=np.float64)
        if np.any(~np.isfinite(lb)):
            raise LpNumericalError("every variable needs a finite lower bound")
        return np.concatenate([lb, np.zeros(self.R)]), np.concatenate([ub, self.ub_logical])

    def _max_iter(self):
        return 50 * (self.R + self.N) + 1000

    def _set_costs(self, T, basis, flipped):
        R, N = self.R, self.N
        cp = np.where(flipped, -self.cF, self.cF)
        T[R, :N] = cp - cp[basis] @ T[:R, :N]
        T[R, N] = -(cp[basis] @ T[:R, N])

    def cold(self, lb, ub):
        lbF, ubF = self._full(lb, ub)
        if np.any(lbF > ubF):
            return LpResult(INFEASIBLE, -math.inf, None), None
        R, n, N = self.R, self.n, self.N
        upper = ubF - lbF
        M, b = self._system(ubF)
        T = np.zeros((R + 1, N + 1))
        T[:R, :N] = self.sigma[:, None] * M
        T[:R, N] = self.sigma * (b - M[:, :n] @ lbF[:n])
        basis = n + np.arange(R, dtype=np.int64)
        flipped = np.zeros(N, dtype=np.bool_)
        # park positive-cost columns at their upper bound where one exists;
        # the rest get a zero phase-1 cost so the slack basis is dual feasible
        d = np.minimum(self.cF, 0.0)
        up = (self.cF > 0) & np.isfinite(upper)
        for j in np.nonzero(up)[0]:
            T[:R, N] -= upper[j] * T[:R, j]
            T[:R, j] *= -1.0
            flipped[j] = True
            d[j] = -self.cF[j]
        T[R, :N] = d
        allowed = upper > 0
        st, it = _kernels.dual_simplex_core(T, upper, basis, flipped, R, allowed, self._max_iter(), PIVOT_FEAS_TOL)
        if st == _kernels.STATUS_INFEASIBLE:
            return LpResult(INFEASIBLE, -math.inf, None, it), None
        if st != _kernels.STATUS_OPTIMAL:
            raise LpNumericalError(f"dual phase stopped with status {st} after {it} pivots")
        self._set_costs(T, basis, flipped)
        return self._finish(_LpState(T, basis, flipped, lbF, ubF, it), it, allow_retry=True)

    def warm(self, parent: _LpState, lb, ub):
        """Re-solve from ``parent`` after a bound change; falls back to a cold solve."""
        lbF, ubF = self._full(lb, ub)
        if np.any(lbF > ubF):
            return LpResult(INFEASIBLE, -math.inf, None), None
        if parent.T is None or parent.pivots > self.REFACTOR_EVERY:
            state = self.refactor(parent.basis, parent.flipped, parent.lb, parent.ub)
            if state is None:
                return self.cold(lb, ub)
            T = state.T
        else:
            T = parent.T.copy()
        R, N = self.R, self.N
        basis = parent.basis.copy()
        flipped = parent.flipped.copy()
        old_lb, old_ub = parent.lb, parent.ub
        row_of = np.full(N, -1, dtype=np.int64)
        row_of[basis] = np.arange(R)
        for j in np.nonzero((lbF != old_lb) | (ubF != old_ub))[0]:
            r = row_of[j]
            if r >= 0 and flipped[j] and not np.isfinite(ubF[j]):
                return self.cold(lb, ub)
            if r >= 0:
                if flipped[j]:
                    T[r, N] += ubF[j] - old_ub[j]
                else:
                    T[r, N] -= lbF[j] - old_lb[j]
                continue
            if flipped[j] and not np.isfinite(ubF[j]):
                # move the column back to lower-bound orientation
                T[:, j] *= -1.0
                T[:, N] += (old_ub[j] - old_lb[j]) * T[:, j]
                flipped[j] = False
            if flipped[j]:
                delta = ubF[j] - old_ub[j]
                T[:, N] += delta * T[:, j]
            else:
                delta = lbF[j] - old_lb[j]
                T[:, N] -= delta * T[:, j]
        if not self._update_coefs(T, basis, flipped, row_of, lbF, old_ub, ubF):
            state = self.refactor(basis, flipped, lbF, ubF)
            if state is None:
                return self.cold(lb, ub)
            T = state.T
        try:
            return self._finish(_LpState(T, basis, flipped, lbF, ubF, parent.pivots), 0, allow_retry=True)
        except LpNumericalError:
            return self.cold(lb, ub)

    def _update_coefs(self, T, basis, flipped, row_of, lbF, old_ub, ubF) -> bool:
        """Absorb variable-upper-bound coefficient changes; False asks for a refactor."""
        if self.vub_row.size == 0:
            return True
        old, new = self._coefs(old_ub), self._coefs(ubF)
        ts = np.nonzero(old != new)[0]
        if ts.size == 0:
            return True
        return _kernels.vub_update(T, ts, self.vub_row, self.vub_y, self.vub_kind, old, new,
                                   self.sigma, flipped, row_of, lbF, ubF, self.n)

    def refactor(self, basis, flipped, lbF, ubF) -> _LpState | None:
        R, n, N = self.R, self.n, self.N
        upper = ubF - lbF
        sgn = np.where(flipped, -1.0, 1.0)
        M, b = self._system(ubF)
        Mp = M * sgn
        at = lbF + np.where(flipped, upper, 0.0)
        rhs = b - M @ at
        T = np.empty((R + 1, N + 1))
        try:
            sol = np.linalg.solve(Mp[:, basis], np.hstack([Mp, rhs[:, None]]))
        except np.linalg.LinAlgError:
            return None
        T[:R] = sol
        self._set_costs(T, basis, flipped)
        return _LpState(T, basis.copy(), flipped.copy(), lbF, ubF, 0)

    def _extract(self, state: _LpState):
        T, basis, flipped = state.T, state.basis, state.flipped
        upper = state.ub - state.lb
        xs = np.where(flipped, upper, 0.0)
        beta = T[: self.R, self.N]
        xs[basis] = np.where(flipped[basis], upper[basis] - beta, beta)
        x = state.lb + xs
        return np.clip(x[: self.n], state.lb[: self.n], state.ub[: self.n])

    def _finish(self, state: _LpState, iters: int, allow_retry: bool):
        R = self.R
        upper = state.ub - state.lb
        allowed = upper > 0
        st, it = _kernels.dual_simplex_core(state.T, upper, state.basis, state.flipped, R, allowed,
                                            self._max_iter(), PIVOT_FEAS_TOL)
        iters += it
        state.pivots += it
        if st == _kernels.STATUS_INFEASIBLE:
            return LpResult(INFEASIBLE, -math.inf, None, iters), None
        if st != _kernels.STATUS_OPTIMAL:
            raise LpNumericalError(f"dual simplex stopped with status {st} after {it} pivots")
        st, it = _kernels.simplex_core(state.T, upper, state.basis, state.flipped, R, allowed,
                                       self._max_iter(), 50, 1e-9)
        iters += it
        state.pivots += it
        if st == _kernels.STATUS_UNBOUNDED:
            return LpResult("unbounded", math.inf, None, iters), None
        if st != _kernels.STATUS_OPTIMAL:
            raise LpNumericalError(f"simplex hit the iteration limit ({it} pivots)")
        x = self._extract(state)
        lb, ub = state.lb[: self.n], state.ub[: self.n]
        if self.violation(x, lb, ub) > FEAS_TOL * self.b_scale:
            if not allow_retry:
                raise LpNumericalError("primal residual exceeds tolerance after refactorization")
            fresh = self.refactor(state.basis, state.flipped, state.lb, state.ub)
            if fresh is None:
                raise LpNumericalError("singular basis at optimum")
            return self._finish(fresh, iters, allow_retry=False)
        return LpResult(OPTIMAL, float(self.c @ x), x, iters), state

    def solve(self, lb, ub) -> LpResult:
        return self.cold(lb, ub)[0]

    def violation(self, x, lb, ub) -> float:
        worst = max(0.0, float(np.max(lb - x, initial=0.0)), float(np.max(x - ub, initial=0.0)))
        if self.R:
            d = self.A @ x - self.b
            worst = max(worst,
                        float(np.max(np.where(self.sense < 0, d, 0.0))),
                        float(np.max(np.where(self.sense > 0, -d, 0.0))),
                        float(np.max(np.where(self.sense == 0, np.abs(d), 0.0))))
        return worst


def solve_lp(model: MipModel) -> LpResult:
    """Solve the LP relaxation of ``model`` (integrality dropped)."""
    model.validate()
    c, A, sense, b, lb, ub, _ = model.to_arrays()
    return _LpEngine(c, A, sense, b).solve(lb, ub)


Heuristic = Callable[[np.ndarray, np.ndarray, np.ndarray], "np.ndarray | None"]
Propagator = Callable[[np.ndarray, np.ndarray], bool]

TABLEAU_CACHE_BYTES = 2**30


def solve_mip(
    model: MipModel,
    time_limit: float = 3600.0,
    gap_tol: float = GAP_TOL,
    node_limit: int | None = None,
    heuristic: Heuristic | None = None,
    propagator: Propagator | None = None,
    int_tol: float = INT_TOL,
    trace: list | None = None,
    branch_priority: Sequence[int] | None = None,
) -> SolveResult:
    """Best-first branch-and-bound on the binary variables of ``model``.

    Branches on the most fractional binary (ties: lowest id). ``heuristic``
    may propose full assignments from a node's LP point; they are only
    accepted after a feasibility check. ``propagator`` may tighten node
    bounds in place (return False to prune); it must never cut off an
    integer-feasible point. ``node_limit`` is the deterministic alternative
    to ``time_limit``. Without an incumbent when a limit hits, the result
    carries objective ``-inf`` and no assignment. If ``trace`` is a list,
    ``(node_bound, incumbent_value_or_None)`` pairs are appended for every
    explored node.
    """
    start = time.perf_counter()
    model.validate()
    c, A, sense, b, lb0, ub0, is_bin = model.to_arrays()
    lp = _LpEngine(c, A, sense, b, is_bin)
    bin_ids = np.nonzero(is_bin)[0]
    csr = _csr(A)
    prio = None if branch_priority is None else np.asarray(branch_priority, dtype=np.int64)[bin_ids]

    def propagate(lb, ub):
        if not _kernels.propagate_bounds(*csr, sense, b, lb, ub, is_bin):
            return False
        if propagator is None:
            return True
        if not propagator(lb, ub):
            return False
        return _kernels.propagate_bounds(*csr, sense, b, lb, ub, is_bin)

    abs_tol = 1e-9
    best_x = None
    best_obj = -math.inf

    def prune_level():
        return best_obj + max(abs_tol, gap_tol * abs(best_obj)) if best_x is not None else -math.inf

    def consider(x, state=None):
        nonlocal best_x, best_obj
        if x is None:
            return None
        x = np.asarray(x, dtype=np.float64).copy()
        xb = x[bin_ids]
        if np.any(np.abs(xb - np.round(xb)) > int_tol):
            return None
        x[bin_ids] = np.round(xb)
        if lp.violation(x, lb0, ub0) > FEAS_TOL * lp.b_scale:
            # re-solve the continuous part with binaries pinned
            lbp, ubp = lb0.copy(), ub0.copy()
            lbp[bin_ids] = x[bin_ids]
            ubp[bin_ids] = x[bin_ids]
            pol = lp.warm(state, lbp, ubp)[0] if state is not None else lp.solve(lbp, ubp)
            if pol.status != OPTIMAL:
                return None
            x = pol.x
            x[bin_ids] = np.round(x[bin_ids])
            if lp.violation(x, lb0, ub0) > INT_TOL:
                return None
        obj = float(c @ x)
        if obj > best_obj:
            best_obj, best_x = obj, x
        return obj

    # tableaux are kept for recently created nodes; older ones keep only their basis
    cached: list[_LpState] = []
    cached_bytes = 0

    def remember(state):
        nonlocal cached_bytes
        cached.append(state)
        cached_bytes += state.nbytes
        while cached_bytes > TABLEAU_CACHE_BYTES and cached:
            old = cached.pop(0)
            cached_bytes -= old.nbytes
            old.T = None

    def release(state):
        nonlocal cached_bytes
        if state.T is not None:
            cached_bytes -= state.nbytes
            state.T = None
            try:
                cached.remove(state)
            except ValueError:
                pass

    lb_root, ub_root = lb0.copy(), ub0.copy()
    nodes = 1
    if not propagate(lb_root, ub_root):
        return SolveResult(INFEASIBLE, -math.inf, {}, math.inf, nodes, time.perf_counter() - start)
    root, root_state = lp.cold(lb_root, ub_root)
    if root.status == INFEASIBLE:
        return SolveResult(INFEASIBLE, -math.inf, {}, math.inf, nodes, time.perf_counter() - start)
    if root.status == "unbounded":
        raise LpNumericalError("LP relaxation is unbounded; variables need finite bounds")
    root_bound = root.objective
    remember(root_state)

    counter = 0
    heap = [(-root.objective, counter, lb_root, ub_root, root.x, root_state)]
    timed_out = False
    while heap:
        if time.perf_counter() - start > time_limit or (node_limit is not None and nodes >= node_limit):
            timed_out = True
            break
        neg_bound, _, lb, ub, x, state = heapq.heappop(heap)
        bound = -neg_bound
        if bound <= prune_level():
            heap.clear()
            break
        found = None
        xb = x[bin_ids]
        frac = np.abs(xb - np.round(xb))
        if not np.any(frac > int_tol):
            found = consider(x, state)
            if found is None:
                # integral within tolerance but pinned re-solve failed; branch on the largest deviation
                frac = np.where(frac > 0, frac + int_tol, frac)
        if found is None and heuristic is not None:
            found = consider(heuristic(x, lb, ub), state)
        if trace is not None:
            trace.append((bound, found))
        if not np.any(frac > int_tol):
            release(state)
            continue
        dist = np.minimum(xb - np.floor(xb), np.ceil(xb) - xb)
        if prio is not None:
            top = prio[dist > int_tol].max()
            dist = np.where(prio == top, dist, -1.0)
        k = int(bin_ids[int(np.argmax(dist))])
        for fix in (0.0, 1.0) if x[k] < 0.5 else (1.0, 0.0):
            clb, cub = lb.copy(), ub.copy()
            clb[k] = cub[k] = fix
            nodes += 1
            if not propagate(clb, cub):
                continue
            res, cstate = lp.warm(state, clb, cub)
            if res.status != OPTIMAL or res.objective <= prune_level():
                continue
            counter += 1
            remember(cstate)
            heapq.heappush(heap, (-res.objective, counter, clb, cub, res.x, cstate))
        release(state)

    wall = time.perf_counter() - start
    if timed_out:
        open_bound = max((-h[0] for h in heap), default=best_obj)
        if best_x is None:
            return SolveResult(FEASIBLE_TIME_LIMIT, -math.inf, {}, math.inf, nodes, wall, root_bound)
        gap = max(0.0, open_bound - best_obj) / max(abs(best_obj), 1e-9)
        return SolveResult(FEASIBLE_TIME_LIMIT, best_obj, _assignment(best_x), gap, nodes, wall, root_bound)
    if best_x is None:
        return SolveResult(INFEASIBLE, -math.inf, {}, math.inf, nodes, wall, root_bound)
    return SolveResult(OPTIMAL, best_obj, _assignment(best_x), 0.0, nodes, wall, root_bound)


def _csr(A):
    rows, cols = np.nonzero(A)
    indptr = np.zeros(A.shape[0] + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    return np.cumsum(indptr), cols.astype(np.int64), A[rows, cols].astype(np.float64)


def _assignment(x) -> dict[int, float]:
    return {k: float(v) for k, v in enumerate(x)}


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BruteForceResult:
    allocation: tuple[int, ...]
    objective: float
    assignment_vector: tuple[int, ...]


def assignment_to_masks(g: Sequence[int], n: int) -> tuple[int, ...]:
    masks = [0] * n
    for j, owner in enumerate(g):
        if owner > 0:
            masks[owner - 1] |= 1 << j
    return tuple(masks)


def brute_force_tables(tables: np.ndarray, m: int, budget: int = ENUMERATION_BUDGET) -> BruteForceResult:
    """Exhaustive maximizer of ``sum_i tables[i, mask_i]`` over item assignments."""
    tables = np.asarray(tables, dtype=np.float64)
    n = tables.shape[0]
    if (n + 1) ** m > budget:
        raise BudgetExceeded(
            f"(n+1)^m = {n + 1}^{m} allocations exceed the enumeration budget {budget}; use solve_mip"
        )
    g, best = _kernels.enumerate_allocations(tables, m)
    return BruteForceResult(assignment_to_masks(g, n), best, tuple(int(v) for v in g))


def brute_force_wdp(nets: Sequence[ValueNetwork], m: int | None = None, n: int | None = None,
                    budget: int = ENUMERATION_BUDGET) -> BruteForceResult:
    """Exact DNN-based WDP by enumerating every item -> (bidder or nobody) assignment.

    Ties go to the lexicographically smallest assignment vector, where entry j
    is 0 for an unassigned item and ``i + 1`` for bidder i.
    """
    m = nets[0].n_items if m is None else m
    n = len(nets) if n is None else n
    if n != len(nets) or any(net.n_items != m for net in nets):
        raise ValueError("networks do not match the stated n and m")
    if (n + 1) ** m > budget:
        raise BudgetExceeded(
            f"(n+1)^m = {n + 1}^{m} allocations exceed the enumeration budget {budget}; use solve_mip"
        )
    tables = np.stack([value_table(net) for net in nets])
    return brute_force_tables(tables, m, budget)
