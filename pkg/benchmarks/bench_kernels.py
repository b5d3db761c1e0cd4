"""Compiled vs pure-numpy kernel timings.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel pair gets the
same inputs; the compiled side is warmed up first so compilation is not
counted. The last rows time a whole winner-determination solve in a fresh
interpreter with and without ``DLICA_DISABLE_NUMBA``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dlica import _kernels as K
from dlica.domains import gen_local_synergy
from dlica.mip import encode_wdp
from dlica.nn import Architecture, random_network
from dlica.solver import _csr


def _best(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def _cases():
    rng = np.random.default_rng(0)

    T = rng.normal(size=(120, 300))
    pivot_jit = K._njit(K._pivot_loop)
    yield "pivot 120x300", lambda: pivot_jit(T.copy(), 5, 7), lambda: K._pivot_py(T.copy(), 5, 7)

    vals = rng.uniform(0, 5, size=(3, 1 << 8))
    vals[:, 0] = 0.0
    yield ("enumerate n=3 m=8", lambda: K._enumerate_allocations_jit(vals, 8),
           lambda: K._enumerate_allocations_numpy(vals, 8))

    vals = rng.uniform(0, 5, size=(4, 1 << 12))
    yield "subset dp n=4 m=12", lambda: K._subset_dp_jit(vals), lambda: K._subset_dp_numpy(vals)

    inst = gen_local_synergy(0, rows=3, cols=4)
    nb = inst.neighbors()
    masks = np.arange(1 << 12, dtype=np.int64)
    yield ("largest component 4096", lambda: K._largest_component_jit(masks, nb),
           lambda: K._largest_component_numpy(masks, nb))

    nets = [random_network(Architecture.from_hidden(12, [10]), rng) for _ in range(4)]
    model = encode_wdp(nets)
    _, A, sense, b, lb, ub, is_bin = model.to_arrays()
    csr = _csr(A)
    lb[np.nonzero(is_bin)[0][::3]] = 1.0
    yield ("propagate wdp rows", lambda: K._propagate_jit(*csr, sense, b, lb.copy(), ub.copy(), is_bin, 20, 1e-9),
           lambda: K._propagate_numpy(*csr, sense, b, lb.copy(), ub.copy(), is_bin, 20, 1e-9))


_SOLVE = """
import time, numpy as np
from dlica.mip import encode_wdp, wdp_solver_hooks
from dlica.nn import Architecture, random_network
from dlica.solver import solve_mip
rng = np.random.default_rng(1)
nets = [random_network(Architecture.from_hidden(8, [10]), rng) for _ in range(3)]
model = encode_wdp(nets)
solve_mip(model, node_limit=5, **wdp_solver_hooks(model, nets))
t = time.perf_counter()
res = solve_mip(model, node_limit=200, **wdp_solver_hooks(model, nets))
print(time.perf_counter() - t, res.nodes_explored)
"""


def _solve_time(disable: bool) -> tuple[float, int]:
    env = dict(os.environ)
    env.pop("DLICA_DISABLE_NUMBA", None)
    if disable:
        env["DLICA_DISABLE_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", _SOLVE], env=env, capture_output=True, text=True, check=True)
    t, nodes = out.stdout.split()
    return float(t), int(nodes)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5, help="timing repeats per kernel (best is kept)")
    parser.add_argument("--skip-solve", action="store_true", help="skip the end-to-end solve comparison")
    args = parser.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 1

    print(f"{'kernel':<26}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, jit_fn, py_fn in _cases():
        tj, tp = _best(jit_fn, args.repeat), _best(py_fn, args.repeat)
        print(f"{name:<26}{tj * 1e3:>12.3f}{tp * 1e3:>12.3f}{tp / tj:>9.1f}x")
    if not args.skip_solve:
        (tj, nj), (tp, np_) = _solve_time(False), _solve_time(True)
        print(f"{f'wdp solve ({nj}/{np_} nodes)':<26}{tj * 1e3:>12.1f}{tp * 1e3:>12.1f}{tp / tj:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
