"""Reference implementations used as test oracles.

Deliberately naive: plain Python loops and itertools, no code shared with
the package beyond reading instance fields.
"""

from __future__ import annotations

import itertools
import math


def chain_forward(weights, biases, bundle):
    """Straight-line matrix chain with ReLU after every affine map."""
    o = [float(v) for v in bundle]
    for W, b in zip(weights, biases):
        nxt = []
        for r in range(len(b)):
            acc = float(b[r])
            for c in range(len(o)):
                acc += float(W[r][c]) * o[c]
            nxt.append(acc if acc > 0 else 0.0)
        o = nxt
    return o[0]


def chain_preactivations(weights, biases, bundle):
    o = [float(v) for v in bundle]
    out = []
    for W, b in zip(weights, biases):
        pre = [float(b[r]) + sum(float(W[r][c]) * o[c] for c in range(len(o))) for r in range(len(b))]
        out.append(pre)
        o = [p if p > 0 else 0.0 for p in pre]
    return out


def bits(mask, m):
    return [(mask >> j) & 1 for j in range(m)]


def enumerate_wdp(value_fns, m):
    """Max of sum_i f_i(mask_i) over every item -> owner-or-nobody assignment."""
    n = len(value_fns)
    best = -math.inf
    best_masks = None
    for owners in itertools.product(range(n + 1), repeat=m):
        masks = [0] * n
        for j, o in enumerate(owners):
            if o:
                masks[o - 1] |= 1 << j
        v = sum(f(k) for f, k in zip(value_fns, masks))
        if v > best + 1e-12:
            best, best_masks = v, tuple(masks)
    return best, best_masks


def grid_component(mask, rows, cols):
    """Largest 4-connected component of ``mask`` on a rows x cols grid, via BFS."""
    cells = {j for j in range(rows * cols) if (mask >> j) & 1}
    best = 0
    seen = set()
    for start in cells:
        if start in seen:
            continue
        stack, size = [start], 0
        seen.add(start)
        while stack:
            j = stack.pop()
            size += 1
            r, c = divmod(j, cols)
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                k = rr * cols + cc
                if 0 <= rr < rows and 0 <= cc < cols and k in cells and k not in seen:
                    seen.add(k)
                    stack.append(k)
        best = max(best, size)
    return best


def domain_value(inst, i, mask):
    """Closed-form value written from the family definitions."""
    b = inst.bidders[i]
    hit = [j for j in b.interest if (mask >> j) & 1]
    s = sum(v for j, v in zip(b.interest, b.base) if (mask >> j) & 1)
    if inst.family == "global":
        return s * (1.0 + b.synergy["alpha"] * len(hit))
    hmask = sum(1 << j for j in hit)
    c = grid_component(hmask, inst.rows, inst.cols)

    def sig(t):
        g, k, t0 = b.synergy["gamma"], b.synergy["kappa"], b.synergy["t0"]
        return g / (1.0 + math.exp(-k * (t - t0)))

    return s * (1.0 + sig(c) - sig(0))


def enumerate_reported(reports, n):
    """Best reported welfare over combinations of (one reported bundle or nothing) per bidder.

    ``reports[i]`` maps mask -> value. Returns (welfare, set of optimal allocations).
    """
    options = []
    for i in range(n):
        options.append([0] + [k for k in reports.get(i, {}) if k != 0])
    best, winners = -math.inf, []
    for combo in itertools.product(*options):
        used, ok = 0, True
        for k in combo:
            if used & k:
                ok = False
                break
            used |= k
        if not ok:
            continue
        v = math.fsum(reports.get(i, {}).get(k, 0.0) if k else 0.0 for i, k in enumerate(combo))
        if v > best + 1e-9:
            best, winners = v, [combo]
        elif abs(v - best) <= 1e-9:
            winners.append(combo)
    return best, winners


def basic_solutions_lp(c, A_ub, b_ub, ub):
    """Max c.x over {A_ub x <= b_ub, 0 <= x <= ub} by enumerating vertices (tiny n only)."""
    import numpy as np

    n = len(c)
    rows = [list(r) for r in A_ub]
    rhs = list(b_ub)
    for j in range(n):
        e = [0.0] * n
        e[j] = 1.0
        rows.append(e)
        rhs.append(ub[j])
        rows.append([-v for v in e])
        rhs.append(0.0)
    G = np.array(rows, dtype=float)
    h = np.array(rhs, dtype=float)
    best = -math.inf
    for subset in itertools.combinations(range(len(rows)), n):
        M = G[list(subset)]
        if abs(np.linalg.det(M)) < 1e-10:
            continue
        x = np.linalg.solve(M, h[list(subset)])
        if np.all(G @ x <= h + 1e-9):
            best = max(best, float(np.dot(c, x)))
    return best
