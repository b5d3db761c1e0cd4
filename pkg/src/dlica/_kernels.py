"""Hot numeric kernels.

Each kernel has a numba-compiled path and a pure-numpy path. The numba
path is used unless ``DLICA_DISABLE_NUMBA`` is set to a truthy value (or
numba is not importable). Both paths compute identical results; the test
suite runs them against each other.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("DLICA_DISABLE_NUMBA", "").strip().lower()
try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# bounded-variable primal simplex on a dense tableau
# ---------------------------------------------------------------------------

STATUS_OPTIMAL = 0
STATUS_INFEASIBLE = 1
STATUS_UNBOUNDED = 2
STATUS_ITERATION_LIMIT = 3


def _pivot_py(T, r, j):
    prow = T[r, :] / T[r, j]
    col = T[:, j].copy()
    col[r] = 0.0
    rows = np.nonzero(col)[0]
    T[rows, :] -= np.outer(col[rows], prow)
    T[r, :] = prow


def _pivot_loop(T, r, j):
    n_rows, n_cols = T.shape
    inv = 1.0 / T[r, j]
    for c in range(n_cols):
        T[r, c] *= inv
    for i in range(n_rows):
        if i == r:
            continue
        f = T[i, j]
        if f != 0.0:
            for c in range(n_cols):
                T[i, c] -= f * T[r, c]


# only rows with a nonzero in the pivot column change
_pivot = _njit(_pivot_loop) if USE_NUMBA else _pivot_py
pivot = _pivot


def _simplex_core_py(T, upper, basis, flipped, obj_row, allowed, max_iter, bland_after, tol):
    """Run primal simplex pivots on tableau ``T`` in place (maximization).

    Layout: rows ``0..R-1`` are constraint rows ``[B^-1 A | x_B]``, row
    ``obj_row`` holds reduced costs with ``-objective`` in the last column.
    Nonbasic variables sit at zero in the current (possibly complemented)
    space; ``flipped[j]`` marks a column replaced by ``upper[j] - x_j``.

    Returns ``(status, iterations)``.
    """
    n_rows = basis.shape[0]
    n_cols = upper.shape[0]
    rhs_col = n_cols
    piv_tol = 1e-9
    degenerate = 0
    it = 0
    while it < max_iter:
        d = T[obj_row, :n_cols]
        use_bland = degenerate >= bland_after
        j = -1
        if use_bland:
            for k in range(n_cols):
                if allowed[k] and d[k] > tol:
                    j = k
                    break
        else:
            best = tol
            for k in range(n_cols):
                if allowed[k] and d[k] > best:
                    best = d[k]
                    j = k
        if j < 0:
            return STATUS_OPTIMAL, it

        col = T[:n_rows, j]
        rhs = np.maximum(T[:n_rows, rhs_col], 0.0)
        ub_basic = upper[basis]
        ratios = np.full(n_rows, np.inf)
        pos = col > piv_tol
        ratios[pos] = rhs[pos] / col[pos]
        neg = (col < -piv_tol) & np.isfinite(ub_basic)
        ratios[neg] = np.maximum(ub_basic[neg] - T[:n_rows, rhs_col][neg], 0.0) / (-col[neg])

        theta = upper[j]
        leave = -1
        if n_rows > 0:
            tmin = ratios.min()
            if tmin < theta:
                theta = tmin
                cand = np.nonzero(ratios <= tmin + 1e-12)[0]
                leave = cand[0]
                for c in cand[1:]:
                    if use_bland:
                        if basis[c] < basis[leave]:
                            leave = c
                    elif abs(col[c]) > abs(col[leave]):
                        leave = c
        if not np.isfinite(theta):
            return STATUS_UNBOUNDED, it

        if theta <= 1e-12:
            degenerate += 1
        else:
            degenerate = 0

        if leave < 0:
            # bound flip of the entering column
            T[:, rhs_col] -= upper[j] * T[:, j]
            T[:, j] *= -1.0
            flipped[j] = not flipped[j]
        else:
            to_upper = col[leave] < 0.0
            _pivot(T, leave, j)
            old = basis[leave]
            basis[leave] = j
            if to_upper:
                T[:, rhs_col] -= upper[old] * T[:, old]
                T[:, old] *= -1.0
                flipped[old] = not flipped[old]
        it += 1
    return STATUS_ITERATION_LIMIT, it


_simplex_core_jit = _njit(_simplex_core_py)
simplex_core = _simplex_core_jit if USE_NUMBA else _simplex_core_py


def _dual_simplex_core_py(T, upper, basis, flipped, obj_row, allowed, max_iter, ptol):
    """Bounded dual simplex on the same tableau layout as ``simplex_core``.

    Assumes the reduced costs in ``obj_row`` are dual feasible (<= 0 for
    every enterable nonbasic column). Restores primal feasibility of the
    basic values against ``[0, upper]``. A basic variable above its upper
    bound is complemented first so every leaving row is below zero.
    Returns ``(status, iterations)``; ``STATUS_INFEASIBLE`` when some row
    has no entering candidate.
    """
    n_rows = basis.shape[0]
    n_cols = upper.shape[0]
    rhs_col = n_cols
    piv_tol = 1e-9
    is_basic = np.zeros(n_cols, dtype=np.bool_)
    for r in range(n_rows):
        is_basic[basis[r]] = True
    it = 0
    while it < max_iter:
        leave = -1
        worst = 0.0
        for r in range(n_rows):
            beta = T[r, rhs_col]
            u = upper[basis[r]]
            tol_r = ptol * (1.0 + abs(beta))
            if beta < -tol_r:
                if -beta > worst:
                    worst = -beta
                    leave = r
            elif beta > u + tol_r:
                if beta - u > worst:
                    worst = beta - u
                    leave = r
        if leave < 0:
            return STATUS_OPTIMAL, it
        b_old = basis[leave]
        if T[leave, rhs_col] > 0.0:
            # complement the basic variable so it leaves towards zero
            u = upper[b_old]
            T[leave, :] *= -1.0
            T[leave, b_old] = 1.0
            T[leave, rhs_col] += u
            flipped[b_old] = not flipped[b_old]
        enter = -1
        best_ratio = np.inf
        best_piv = 0.0
        for j in range(n_cols):
            if is_basic[j] or not allowed[j]:
                continue
            a = T[leave, j]
            if a < -piv_tol:
                d = T[obj_row, j]
                if d > 0.0:
                    d = 0.0
                ratio = d / a
                if ratio < best_ratio - 1e-12 or (ratio <= best_ratio + 1e-12 and -a > best_piv):
                    best_ratio = ratio
                    best_piv = -a
                    enter = j
        if enter < 0:
            return STATUS_INFEASIBLE, it
        _pivot(T, leave, enter)
        basis[leave] = enter
        is_basic[b_old] = False
        is_basic[enter] = True
        it += 1
    return STATUS_ITERATION_LIMIT, it


_dual_simplex_core_jit = _njit(_dual_simplex_core_py)
dual_simplex_core = _dual_simplex_core_jit if USE_NUMBA else _dual_simplex_core_py


# ---------------------------------------------------------------------------
# exhaustive winner determination over item -> bidder assignments
# ---------------------------------------------------------------------------


def _enumerate_allocations_loop(values, m):
    """Lexicographic odometer over g in {0..n}^m (0 = unassigned).

    ``values[i, mask]`` is bidder i's value for bundle ``mask``. Returns the
    lexicographically smallest maximizer ``g`` and its welfare.
    """
    n = values.shape[0]
    base = n + 1
    g = np.zeros(m, dtype=np.int64)
    masks = np.zeros(n, dtype=np.int64)
    best_g = g.copy()
    best = 0.0
    for i in range(n):
        best += values[i, 0]
    while True:
        # advance the odometer; item 0 is the most significant digit
        pos = m - 1
        while pos >= 0:
            cur = g[pos]
            if cur > 0:
                masks[cur - 1] ^= 1 << pos
            cur += 1
            if cur == base:
                g[pos] = 0
                pos -= 1
            else:
                g[pos] = cur
                masks[cur - 1] ^= 1 << pos
                break
        if pos < 0:
            break
        total = 0.0
        for i in range(n):
            total += values[i, masks[i]]
        if total > best:
            best = total
            best_g[:] = g
    return best_g, best


def _enumerate_allocations_numpy(values, m, chunk=1 << 16):
    n = values.shape[0]
    base = n + 1
    count = base**m
    weights = base ** np.arange(m - 1, -1, -1, dtype=np.int64)
    bits = np.int64(1) << np.arange(m, dtype=np.int64)
    best = -np.inf
    best_g = np.zeros(m, dtype=np.int64)
    for start in range(0, count, chunk):
        idx = np.arange(start, min(count, start + chunk), dtype=np.int64)
        g = (idx[:, None] // weights[None, :]) % base
        total = np.zeros(idx.shape[0])
        for i in range(n):
            mask = ((g == i + 1) * bits[None, :]).sum(axis=1)
            total += values[i, mask]
        k = int(np.argmax(total))
        if total[k] > best:
            best = float(total[k])
            best_g = g[k].copy()
    return best_g, best


_enumerate_allocations_jit = _njit(_enumerate_allocations_loop)


def enumerate_allocations(values, m):
    values = np.ascontiguousarray(values, dtype=np.float64)
    if USE_NUMBA:
        g, best = _enumerate_allocations_jit(values, m)
    else:
        g, best = _enumerate_allocations_numpy(values, m)
    return np.asarray(g, dtype=np.int64), float(best)


# ---------------------------------------------------------------------------
# subset dynamic programming for exact welfare maximization
# ---------------------------------------------------------------------------


def _subset_dp_loop(values):
    """f_i(S) = max_{T subset S} v_i(T) + f_{i-1}(S \\ T); ties -> smallest T."""
    n, size = values.shape
    f = np.zeros(size)
    choice = np.zeros((n, size), dtype=np.int64)
    for i in range(n):
        g = np.empty(size)
        for S in range(size):
            T = S
            best = -np.inf
            arg = 0
            while True:
                val = values[i, T] + f[S ^ T]
                if val >= best:
                    best = val
                    arg = T
                if T == 0:
                    break
                T = (T - 1) & S
            g[S] = best
            choice[i, S] = arg
        f = g
    return f, choice


def _subset_dp_numpy(values):
    n, size = values.shape
    all_idx = np.arange(size, dtype=np.int64)
    f = np.zeros(size)
    choice = np.zeros((n, size), dtype=np.int64)
    for i in range(n):
        g = np.full(size, -np.inf)
        arg = np.zeros(size, dtype=np.int64)
        for T in range(size):
            sup = all_idx[(all_idx & T) == T]
            cand = values[i, T] + f[sup ^ T]
            better = cand > g[sup]
            g[sup[better]] = cand[better]
            arg[sup[better]] = T
        f = g
        choice[i] = arg
    return f, choice


_subset_dp_jit = _njit(_subset_dp_loop)


def subset_dp(values):
    """Return (best welfare, per-bidder masks) maximizing sum_i values[i, mask_i]."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    n, size = values.shape
    if USE_NUMBA:
        f, choice = _subset_dp_jit(values)
    else:
        f, choice = _subset_dp_numpy(values)
    full = size - 1
    masks = np.zeros(n, dtype=np.int64)
    S = full
    for i in range(n - 1, -1, -1):
        T = int(choice[i, S])
        masks[i] = T
        S ^= T
    return float(f[full]), masks


# ---------------------------------------------------------------------------
# largest grid-connected component per bundle
# ---------------------------------------------------------------------------


def _largest_component_loop(masks, neighbors):
    """``neighbors[j]`` is the bitmask of items adjacent to item j."""
    m = neighbors.shape[0]
    out = np.zeros(masks.shape[0], dtype=np.int64)
    for q in range(masks.shape[0]):
        remaining = masks[q]
        best = 0
        while remaining:
            # lowest set bit starts a new component
            start = 0
            while not (remaining >> start) & 1:
                start += 1
            comp = 1 << start
            frontier = comp
            while frontier:
                grow = 0
                for j in range(m):
                    if (frontier >> j) & 1:
                        grow |= neighbors[j]
                grow &= remaining & ~comp
                comp |= grow
                frontier = grow
            remaining &= ~comp
            size = 0
            c = comp
            while c:
                c &= c - 1
                size += 1
            if size > best:
                best = size
        out[q] = best
    return out


def _largest_component_numpy(masks, neighbors):
    m = neighbors.shape[0]
    masks = np.asarray(masks, dtype=np.int64)
    present = ((masks[:, None] >> np.arange(m)) & 1).astype(bool)
    adj = ((neighbors[:, None] >> np.arange(m)) & 1).astype(bool)
    big = m + 1
    labels = np.where(present, np.arange(m)[None, :], big)
    for _ in range(m):
        # each present item takes the min label over itself and present neighbours
        nb = np.where(adj[None, :, :] & present[:, None, :], labels[:, None, :], big)
        new = np.minimum(labels, nb.min(axis=2))
        new = np.where(present, new, big)
        if np.array_equal(new, labels):
            break
        labels = new
    out = np.zeros(masks.shape[0], dtype=np.int64)
    for lab in range(m):
        out = np.maximum(out, (labels == lab).sum(axis=1))
    return out


_largest_component_jit = _njit(_largest_component_loop)


def largest_component(masks, neighbors):
    masks = np.ascontiguousarray(masks, dtype=np.int64)
    neighbors = np.ascontiguousarray(neighbors, dtype=np.int64)
    if USE_NUMBA:
        return _largest_component_jit(masks, neighbors)
    return _largest_component_numpy(masks, neighbors)


# ---------------------------------------------------------------------------
# activity-based bound propagation on linear rows
# ---------------------------------------------------------------------------


def _propagate_loop(indptr, indices, data, sense, rhs, lb, ub, is_bin, max_passes, tol):
    """Tighten ``lb``/``ub`` in place from row activities; returns False if infeasible.

    ``sense`` is -1 (<=), 0 (=), +1 (>=). Each pass reads the bounds from the
    start of the pass (Jacobi style) so both code paths agree.
    """
    n_rows = indptr.shape[0] - 1
    for _ in range(max_passes):
        new_lb = lb.copy()
        new_ub = ub.copy()
        for r in range(n_rows):
            lo_act = 0.0
            hi_act = 0.0
            for p in range(indptr[r], indptr[r + 1]):
                a = data[p]
                k = indices[p]
                if a > 0:
                    lo_act += a * lb[k]
                    hi_act += a * ub[k]
                else:
                    lo_act += a * ub[k]
                    hi_act += a * lb[k]
            if not (np.isfinite(lo_act) and np.isfinite(hi_act)):
                continue
            b = rhs[r]
            if sense[r] <= 0:
                if lo_act > b + tol * (1.0 + abs(b)):
                    return False
                slack = b - lo_act
                for p in range(indptr[r], indptr[r + 1]):
                    a = data[p]
                    k = indices[p]
                    if a > 0:
                        cand = lb[k] + slack / a
                        if cand < new_ub[k]:
                            new_ub[k] = cand
                    else:
                        cand = ub[k] + slack / a
                        if cand > new_lb[k]:
                            new_lb[k] = cand
            if sense[r] >= 0:
                if hi_act < b - tol * (1.0 + abs(b)):
                    return False
                slack = hi_act - b
                for p in range(indptr[r], indptr[r + 1]):
                    a = data[p]
                    k = indices[p]
                    if a > 0:
                        cand = ub[k] - slack / a
                        if cand > new_lb[k]:
                            new_lb[k] = cand
                    else:
                        cand = lb[k] - slack / a
                        if cand < new_ub[k]:
                            new_ub[k] = cand
        changed = False
        for k in range(lb.shape[0]):
            lo = new_lb[k]
            hi = new_ub[k]
            if is_bin[k]:
                lo = np.ceil(lo - 1e-6)
                hi = np.floor(hi + 1e-6)
            else:
                # keep a little slack so rounding never cuts off a feasible point
                lo = lo - tol * (1.0 + abs(lo))
                hi = hi + tol * (1.0 + abs(hi))
            if lo > lb[k] + 1e-7 * (1.0 + abs(lb[k])):
                lb[k] = lo
                changed = True
            if hi < ub[k] - 1e-7 * (1.0 + abs(ub[k])):
                ub[k] = hi
                changed = True
            if lb[k] > ub[k]:
                if lb[k] - ub[k] > tol * (1.0 + abs(ub[k])) or is_bin[k]:
                    return False
                ub[k] = lb[k]
        if not changed:
            break
    return True


def _propagate_numpy(indptr, indices, data, sense, rhs, lb, ub, is_bin, max_passes, tol):
    n_rows = indptr.shape[0] - 1
    n = lb.shape[0]
    row_of = np.repeat(np.arange(n_rows), np.diff(indptr))
    pos = data > 0
    le = sense <= 0
    ge = sense >= 0
    for _ in range(max_passes):
        lo_c = np.where(pos, data * lb[indices], data * ub[indices])
        hi_c = np.where(pos, data * ub[indices], data * lb[indices])
        lo_act = np.zeros(n_rows)
        hi_act = np.zeros(n_rows)
        np.add.at(lo_act, row_of, lo_c)
        np.add.at(hi_act, row_of, hi_c)
        finite = np.isfinite(lo_act) & np.isfinite(hi_act)
        if np.any(finite & le & (lo_act > rhs + tol * (1.0 + np.abs(rhs)))):
            return False
        if np.any(finite & ge & (hi_act < rhs - tol * (1.0 + np.abs(rhs)))):
            return False
        new_lb = lb.copy()
        new_ub = ub.copy()
        ok = finite[row_of]
        slack_le = (rhs - lo_act)[row_of]
        slack_ge = (hi_act - rhs)[row_of]
        m_le = ok & le[row_of]
        m_ge = ok & ge[row_of]
        with np.errstate(invalid="ignore"):
            sel = m_le & pos
            np.minimum.at(new_ub, indices[sel], lb[indices[sel]] + slack_le[sel] / data[sel])
            sel = m_le & ~pos
            np.maximum.at(new_lb, indices[sel], ub[indices[sel]] + slack_le[sel] / data[sel])
            sel = m_ge & pos
            np.maximum.at(new_lb, indices[sel], ub[indices[sel]] - slack_ge[sel] / data[sel])
            sel = m_ge & ~pos
            np.minimum.at(new_ub, indices[sel], lb[indices[sel]] - slack_ge[sel] / data[sel])
        lo = np.where(is_bin, np.ceil(new_lb - 1e-6), new_lb - tol * (1.0 + np.abs(new_lb)))
        hi = np.where(is_bin, np.floor(new_ub + 1e-6), new_ub + tol * (1.0 + np.abs(new_ub)))
        up_lo = lo > lb + 1e-7 * (1.0 + np.abs(lb))
        dn_hi = hi < ub - 1e-7 * (1.0 + np.abs(ub))
        lb[up_lo] = lo[up_lo]
        ub[dn_hi] = hi[dn_hi]
        cross = lb > ub
        if np.any(cross):
            bad = cross & (is_bin | (lb - ub > tol * (1.0 + np.abs(ub))))
            if np.any(bad):
                return False
            ub[cross] = lb[cross]
        if not (np.any(up_lo) or np.any(dn_hi)):
            break
    return True


_propagate_jit = _njit(_propagate_loop)


def propagate_bounds(indptr, indices, data, sense, rhs, lb, ub, is_bin, max_passes=20, tol=1e-9):
    if USE_NUMBA:
        return bool(_propagate_jit(indptr, indices, data, sense, rhs, lb, ub, is_bin, max_passes, tol))
    return bool(_propagate_numpy(indptr, indices, data, sense, rhs, lb, ub, is_bin, max_passes, tol))


# ---------------------------------------------------------------------------
# interval tightening through ReLU split rows
# ---------------------------------------------------------------------------


def _relu_tighten_loop(indptr, indices, weights, bias, z_ids, s_ids, lb, ub, tol):
    """Interval pass over rows ``pre = bias + sum w * x`` with ``z - s = pre``.

    Rows must be in feed-forward order. Since ``z`` and ``s`` are the positive
    and negative parts of ``pre``, ``z <= max(0, hi)`` and ``s <= max(0, -lo)``.
    Returns False if a bound crosses.
    """
    for r in range(z_ids.shape[0]):
        lo = bias[r]
        hi = bias[r]
        for p in range(indptr[r], indptr[r + 1]):
            w = weights[p]
            k = indices[p]
            if w > 0:
                lo += w * lb[k]
                hi += w * ub[k]
            else:
                lo += w * ub[k]
                hi += w * lb[k]
        z = z_ids[r]
        s = s_ids[r]
        zu = max(hi, 0.0)
        zu += tol * (1.0 + zu)
        su = max(-lo, 0.0)
        su += tol * (1.0 + su)
        if zu < ub[z]:
            ub[z] = zu
        if s >= 0 and su < ub[s]:
            ub[s] = su
        if lb[z] > ub[z] + tol * (1.0 + abs(ub[z])):
            return False
        if s >= 0 and lb[s] > ub[s] + tol * (1.0 + abs(ub[s])):
            return False
    return True


_relu_tighten_jit = _njit(_relu_tighten_loop)


def relu_tighten(indptr, indices, weights, bias, z_ids, s_ids, lb, ub, tol=1e-9):
    # sequential by construction (layer k reads layer k-1's fresh bounds); the
    # numpy path runs the same loop uncompiled
    fn = _relu_tighten_jit if USE_NUMBA else _relu_tighten_loop
    return bool(fn(indptr, indices, weights, bias, z_ids, s_ids, lb, ub, tol))


# ---------------------------------------------------------------------------
# variable-upper-bound coefficient updates on a live tableau
# ---------------------------------------------------------------------------


def _make_vub_update(piv, vectorized):
    def update(T, ts, vub_row, vub_y, vub_kind, old, new, sigma, flipped, row_of, lbF, ubF, n):
        N = T.shape[1] - 1
        for q in range(ts.shape[0]):
            t = ts[q]
            r = vub_row[t]
            y = vub_y[t]
            d_big = new[t] - old[t]
            d_a = -d_big if vub_kind[t] == 0 else d_big
            d_b = d_big if vub_kind[t] == 1 else 0.0
            logical = n + r
            # B^-1 e_r, objective row included, read off the row's logical column
            s = sigma[r] * (-1.0 if flipped[logical] else 1.0)
            v_y = ubF[y] if flipped[y] else lbF[y]
            f_rhs = (d_b - d_a * v_y) * s
            f_y = (-1.0 if flipped[y] else 1.0) * d_a * s
            if vectorized:
                w = T[:, logical].copy()
                T[:, N] += f_rhs * w
                T[:, y] += f_y * w
            else:
                for i in range(T.shape[0]):
                    w = T[i, logical]
                    if w != 0.0:
                        T[i, N] += f_rhs * w
                        T[i, y] += f_y * w
            k = row_of[y]
            if k >= 0:
                if abs(T[k, y]) < 1e-7:
                    return False
                piv(T, k, y)
        return True

    return update


_vub_update_numpy = _make_vub_update(_pivot_py, True)
_vub_update_jit = _njit(_make_vub_update(_njit(_pivot_loop), False))


def vub_update(T, ts, vub_row, vub_y, vub_kind, old, new, sigma, flipped, row_of, lbF, ubF, n):
    """Apply coefficient changes ``old -> new`` of the listed VUB rows in place.

    Returns False when a basic ``y`` column loses its pivot and the caller
    must refactor.
    """
    fn = _vub_update_jit if USE_NUMBA else _vub_update_numpy
    return bool(fn(T, ts, vub_row, vub_y, vub_kind, old, new, sigma, flipped, row_of, lbF, ubF, n))
