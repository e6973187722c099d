"""Time the solver kernels with numba and with the numpy fallback.

    python benchmarks/bench_kernels.py --dim 2 --nref 6
    python benchmarks/bench_kernels.py --dim 3 --nref 3 --repeat 3

Each kernel runs on the same random-coefficient problem under both backends;
the table reports the best wall time of ``--repeat`` runs (numba compile time
is excluded by a warm-up call).
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from homogenize import _kernels as kern
from homogenize.coeffield import FieldDistribution, element_coefficients, sample_field
from homogenize.fem import ElementOperator, FieldVector, cube_space, dot
from homogenize.multigrid import MgHierarchy, SolverConfig, interpolate, restrict, vcycle


def best_time(fn, repeat):
    fn()  # warm-up / jit
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def build_cases(dim, half_width, nref, seed):
    space = cube_space(dim, half_width, nref)
    coarse = space.coarse
    field = sample_field(FieldDistribution(dim, 1.0, 9.0), coarse.box_lo, coarse.box_hi, seed)
    ec = element_coefficients(field, coarse)
    ld = space.level(nref)
    hier = MgHierarchy(space, ec, 1.0)
    rng = np.random.default_rng(seed)

    X = FieldVector(nref, rng.standard_normal((coarse.n_elements, ld.n_local)))
    ld.mask.apply(X.data)
    Xc = FieldVector(nref - 1, rng.standard_normal((coarse.n_elements, space.level(nref - 1).n_local)))
    Y = X.copy()
    classes = ElementOperator(1.0, ec, ld, use_classes=True)
    weighted = ElementOperator(1.0, ec, ld, use_classes=False)
    out = np.empty_like(X.data)
    b = hier.ops[nref].apply(X)
    cfg = SolverConfig()

    return space, {
        "apply (element classes)": lambda: classes.apply(X, out=FieldVector(nref, out)),
        "apply (per-element weights)": lambda: weighted.apply(X, out=FieldVector(nref, out)),
        "interface sum": lambda: kern.interface_sum(Y.data.reshape(-1), ld.interfaces.ptr, ld.interfaces.members),
        "dot": lambda: dot(X, Y, ld.interfaces),
        "interpolate": lambda: interpolate(Xc, hier),
        "restrict": lambda: restrict(X, hier),
        "V-cycle": lambda: vcycle(b, FieldVector(nref, np.zeros_like(X.data)), hier, cfg),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--dim", type=int, choices=(2, 3), default=2)
    ap.add_argument("--half-width", type=int, default=4, help="coarse cube is [-w, w]^d")
    ap.add_argument("--nref", type=int, default=6)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not kern.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    space, cases = build_cases(args.dim, args.half_width, args.nref, args.seed)
    n_elem = space.coarse.n_elements
    n_local = space.level(args.nref).n_local
    print(f"d={args.dim}, {n_elem} coarse cells x {n_local} local nodes = {n_elem * n_local:,} stored values")
    print(f"{'kernel':30s} {'numba [ms]':>12s} {'numpy [ms]':>12s} {'speed-up':>9s}")
    prev = kern.numba_enabled()
    try:
        for name, fn in cases.items():
            kern.use_numba(True)
            t_nb = best_time(fn, args.repeat)
            kern.use_numba(False)
            t_np = best_time(fn, args.repeat)
            print(f"{name:30s} {1e3 * t_nb:12.2f} {1e3 * t_np:12.2f} {t_np / t_nb:8.1f}x")
    finally:
        kern.use_numba(prev)


if __name__ == "__main__":
    main()
