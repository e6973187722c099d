"""Command-line entry point: ``homogenize estimate`` and ``homogenize benchmark``."""
from __future__ import annotations

import argparse
import logging
import sys

from .estimator import EstimatorConfig
from .harness import CampaignConfig, CampaignFailed, run_campaign, singularity_benchmark, write_benchmark
from .multigrid import SolverConfig

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="homogenize", description="Multiscale estimation of homogenized coefficients.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="Monte Carlo campaign of the estimator")
    est.add_argument("--dim", type=int, choices=(2, 3), required=True)
    est.add_argument("--alpha", type=float, required=True)
    est.add_argument("--beta", type=float, required=True)
    est.add_argument("--n", type=int, required=True)
    est.add_argument("--nref", type=int, required=True)
    est.add_argument("--cbl", type=float, required=True)
    est.add_argument("--xi", type=_floats, default=None, help="unit vector, e.g. 1,0")
    est.add_argument("--samples", type=int, required=True)
    est.add_argument("--seed", type=int, required=True, help="base seed; samples use consecutive seeds from here")
    est.add_argument("--out", required=True)
    est.add_argument("--bins", type=int, default=20)
    est.add_argument("--workers", type=int, default=1)
    est.add_argument("--mg-tol", type=float, default=SolverConfig.tol)
    est.add_argument("--smoother-steps", type=int, default=SolverConfig.smoother_steps)
    est.add_argument("--mg-max-cycles", type=int, default=SolverConfig.max_cycles)
    est.add_argument("--sweep-n", type=_ints)
    est.add_argument("--sweep-nref", type=_ints)
    est.add_argument("--sweep-alpha", type=_floats)
    est.add_argument("--reproducible", action="store_true", help="write wall_s as 0 for byte-identical reruns")
    est.add_argument("--resume", action="store_true", help="keep finished samples from an earlier run")

    bm = sub.add_parser("benchmark", help="four-quadrant corner-singularity convergence study")
    bm.add_argument("--lambda", dest="lam", type=float, required=True)
    bm.add_argument("--nref-max", type=int, required=True)
    bm.add_argument("--out", required=True)
    return ap


def _estimate(args) -> int:
    solver = SolverConfig(args.smoother_steps, args.mg_max_cycles, args.mg_tol)
    base = EstimatorConfig(args.dim, args.n, args.nref, args.cbl, args.alpha, args.beta,
                           xi=args.xi, solver=solver)
    cfg = CampaignConfig(base, args.samples, args.seed, args.out, args.bins,
                         args.sweep_n, args.sweep_nref, args.sweep_alpha, args.workers,
                         args.reproducible, args.resume)
    try:
        stats = run_campaign(cfg)
    except CampaignFailed as exc:
        logging.error("%s", exc)
        return EXIT_FAILED
    for st in stats:
        p = st.point
        if st.sigma2 is None:
            continue
        print(f"n={p.n} nref={p.n_ref} alpha={p.alpha:g}: {st.count} samples, "
              f"sigma2 {st.sigma2.mean:.6f} +- {st.sigma2.se:.2e}, "
              f"estimate {st.estimate.mean:.6f} +- {st.estimate.se:.2e}")
    return EXIT_OK


def _benchmark(args) -> int:
    res = singularity_benchmark(args.lam, args.nref_max)
    write_benchmark(res, args.out)
    print(f"alpha({args.lam:g}) = {res.alpha:.10f}; fitted rates H1 {res.h1_rate:.3f}, L2 {res.l2_rate:.3f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "estimate":
            return _estimate(args)
        return _benchmark(args)
    except ValueError as exc:  # invalid parameter combinations
        print(f"homogenize: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as exc:
        print(f"homogenize: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
