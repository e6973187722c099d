"""Monte Carlo campaigns, statistics, histograms and the corner-singularity benchmark."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels as kern
from .coeffield import constant_field, element_coefficients
from .estimator import EstimatorConfig, EstimatorSample, estimate_sample
from .fem import ElementOperator, FieldVector, HHGSpace
from .mesh import build_coarse_cube_mesh, build_reference_hierarchy
from .multigrid import MgHierarchy, SolverConfig, solve

__all__ = [
    "CampaignConfig",
    "CampaignFailed",
    "Summary",
    "McStats",
    "BenchmarkResult",
    "run_campaign",
    "campaign_points",
    "summarize",
    "variance_slope",
    "log2_slope",
    "exponent",
    "singularity_benchmark",
    "emit_histogram",
    "write_benchmark",
    "source_hash",
]

log = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.05


class CampaignFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class CampaignConfig:
    base: EstimatorConfig
    samples: int
    base_seed: int = 0
    out: str | None = None
    bins: int = 20
    sweep_n: tuple[int, ...] | None = None
    sweep_nref: tuple[int, ...] | None = None
    sweep_alpha: tuple[float, ...] | None = None
    workers: int = 1
    reproducible: bool = False  # write wall_s as 0 so reruns are byte-identical
    resume: bool = False

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        for name in ("sweep_n", "sweep_nref", "sweep_alpha"):
            val = getattr(self, name)
            if val is not None:
                if len(val) == 0:
                    raise ValueError(f"{name} must be non-empty")
                object.__setattr__(self, name, tuple(val))


def campaign_points(cfg: CampaignConfig) -> list[EstimatorConfig]:
    """Cartesian product of the sweeps, in (n, nref, alpha) lexicographic order."""
    b = cfg.base
    ns = cfg.sweep_n or (b.n,)
    nrefs = cfg.sweep_nref or (b.n_ref,)
    alphas = cfg.sweep_alpha or (b.alpha,)
    return [replace(b, n=int(n), n_ref=int(r), alpha=float(a)) for n, r, a in itertools.product(ns, nrefs, alphas)]


def _point_key(p: EstimatorConfig) -> tuple:
    return (p.n, p.n_ref, repr(float(p.alpha)))


# ---------------------------------------------------------------------------
# statistics


@dataclass
class Summary:
    count: int
    mean: float
    var: float  # unbiased; 0 for a single sample
    se: float
    min: float
    max: float
    hist_edges: np.ndarray
    hist_counts: np.ndarray


def emit_histogram(samples, bins: int, path=None):
    """Equal-width histogram over ``[min, max]``; optionally written as CSV."""
    x = np.asarray(list(samples), dtype=float)
    if x.size == 0:
        raise ValueError("cannot histogram an empty sample")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts, edges = np.histogram(x, bins=bins, range=(float(x.min()), float(x.max())))
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write("bin_left,bin_right,count\n")
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                fh.write(f"{float(lo)!r},{float(hi)!r},{int(c)}\n")
    return edges, counts


def summarize(samples, bins: int = 20) -> Summary:
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n == 0:
        raise ValueError("no samples")
    var = float(np.var(x, ddof=1)) if n > 1 else 0.0
    edges, counts = emit_histogram(x, bins)
    return Summary(n, float(np.mean(x)), var, math.sqrt(var / n), float(x.min()), float(x.max()), edges, counts)


@dataclass
class McStats:
    point: EstimatorConfig
    samples: list[EstimatorSample]
    sigma2: Summary
    estimate: Summary
    failures: int = 0

    @property
    def count(self) -> int:
        return len(self.samples)


def log2_slope(ns, variances) -> float:
    ns = np.asarray(ns, dtype=float)
    v = np.asarray(variances, dtype=float)
    if ns.size < 3:
        raise ValueError("need at least 3 points for a slope")
    if np.any(v <= 0):
        raise ValueError("variances must be positive")
    return float(np.polyfit(ns, np.log2(v), 1)[0])


def variance_slope(stats: list[McStats]) -> float:
    """Least-squares slope of log2 Var(sigma2) against n."""
    return log2_slope([s.point.n for s in stats], [s.sigma2.var for s in stats])


# ---------------------------------------------------------------------------
# CSV persistence


def _header(max_n: int) -> list[str]:
    cols = ["seed", "n", "nref", "cbl", "alpha", "beta", "sigma2", "mean_a_xi", "estimate"]
    cols += [f"scale_term_{k}" for k in range(max_n + 1)]
    cols += [f"mg_iters_{k}" for k in range(max_n + 1)]
    cols.append("wall_s")
    return cols


def _row(s: EstimatorSample, max_n: int, reproducible: bool) -> list[str]:
    pad = max_n + 1 - len(s.scale_terms)
    terms = [repr(float(t)) for t in s.scale_terms] + [""] * pad
    iters = [str(int(i)) for i in s.mg_iters] + [""] * pad
    wall = 0.0 if reproducible else s.wall_s
    return [str(s.seed), str(s.n), str(s.n_ref), repr(float(s.c_bl)), repr(float(s.alpha)), repr(float(s.beta)),
            repr(s.sigma2), repr(s.mean_a_xi), repr(s.estimate), *terms, *iters, repr(float(wall))]


def _parse_row(rec: dict) -> EstimatorSample:
    n = int(rec["n"])
    return EstimatorSample(
        seed=int(rec["seed"]), n=n, n_ref=int(rec["nref"]), c_bl=float(rec["cbl"]),
        alpha=float(rec["alpha"]), beta=float(rec["beta"]), sigma2=float(rec["sigma2"]),
        mean_a_xi=float(rec["mean_a_xi"]), estimate=float(rec["estimate"]),
        scale_terms=[float(rec[f"scale_term_{k}"]) for k in range(n + 1)],
        mg_iters=[int(rec[f"mg_iters_{k}"]) for k in range(n + 1)],
        mg_residuals=[], wall_s=float(rec["wall_s"]),
    )


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


# modules whose code determines sample values; harness and CLI edits keep caches valid
_NUMERIC_MODULES = ("_kernels.py", "coeffield.py", "estimator.py", "fem.py", "mesh.py", "multigrid.py")


def source_hash() -> str:
    """Digest of the numerical sources; a resumed campaign discards rows from other code."""
    h = hashlib.sha256()
    for p in (Path(__file__).parent / name for name in _NUMERIC_MODULES):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _provenance(cfg: CampaignConfig) -> dict:
    base = asdict(cfg.base)
    base.pop("seed")
    return {"source": source_hash(), "base": base}


def _load_existing(paths: list[Path], meta_path: Path, prov: dict) -> dict:
    """Rows from previous runs with matching provenance, keyed by (point, seed)."""
    try:
        if json.loads(meta_path.read_text()) != json.loads(json.dumps(prov)):
            return {}
    except (OSError, ValueError):
        return {}
    done = {}
    for p in paths:
        if not p.exists():
            continue
        with open(p, newline="") as fh:
            for rec in csv.DictReader(fh):
                try:
                    s = _parse_row(rec)
                except (KeyError, ValueError, TypeError):
                    continue  # truncated line from an interrupted run
                done[(s.n, s.n_ref, repr(s.alpha), s.seed)] = s
    return done


# ---------------------------------------------------------------------------
# campaign driver


def _run_one(point: EstimatorConfig, seed: int):
    try:
        return estimate_sample(point.with_seed(seed)), None
    except Exception as exc:  # recorded and excluded; the campaign decides whether to fail
        return None, f"{type(exc).__name__}: {exc}"


def _worker_count(cfg: CampaignConfig) -> int:
    env = os.environ.get("HOMOGENIZE_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer HOMOGENIZE_WORKERS=%r", env)
    return max(1, cfg.workers)


def run_campaign(cfg: CampaignConfig) -> list[McStats]:
    """Run every sample of every sweep point; write CSVs if ``cfg.out`` is set.

    Sample ``i`` of sweep point ``j`` uses seed ``base_seed + j * samples + i``.
    Output rows are ordered by sweep point and then by index, whatever the
    completion order.
    """
    points = campaign_points(cfg)
    max_n = max(p.n for p in points)
    header = _header(max_n)
    # one global index over the whole campaign: every sample, at every sweep
    # point, draws its own field
    seeds_of = [[cfg.base_seed + j * cfg.samples + i for i in range(cfg.samples)] for j in range(len(points))]

    out = Path(cfg.out) if cfg.out else None
    journal = meta = None
    done: dict = {}
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        journal = out.with_name(out.name + ".journal")
        meta = out.with_name(out.name + ".meta.json")
        prov = _provenance(cfg)
        if cfg.resume:
            done = _load_existing([out, journal], meta, prov)
        meta.write_text(json.dumps(prov, sort_keys=True, indent=1))
        with open(journal, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for s in done.values():
                w.writerow(_row(s, max_n, cfg.reproducible))

    results: dict = {}
    failures: dict = {}
    todo = []
    for p, seeds in zip(points, seeds_of):
        for seed in seeds:
            key = _point_key(p) + (seed,)
            if key in done:
                results[key] = done[key]
            else:
                todo.append((p, seed))
    if done:
        log.info("resuming: %d of %d samples already present", len(results), len(points) * cfg.samples)

    def record(p, seed, sample, err):
        key = _point_key(p) + (seed,)
        if sample is None:
            failures[key] = err
            log.warning("sample failed (n=%d nref=%d alpha=%g seed=%d): %s", p.n, p.n_ref, p.alpha, seed, err)
            return
        results[key] = sample
        if journal is not None:
            with open(journal, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(_row(sample, max_n, cfg.reproducible))

    workers = _worker_count(cfg)
    if workers == 1 or len(todo) <= 1:
        for p, seed in todo:
            record(p, seed, *_run_one(p, seed))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {pool.submit(_run_one, p, seed): (p, seed) for p, seed in todo}
            for fut in as_completed(futs):
                record(*futs[fut], *fut.result())

    stats = []
    rows = []
    fail_rows = []
    for p, seeds in zip(points, seeds_of):
        samples = []
        for seed in seeds:
            key = _point_key(p) + (seed,)
            if key in results:
                samples.append(results[key])
                rows.append(_row(results[key], max_n, cfg.reproducible))
            else:
                fail_rows.append([str(seed), str(p.n), str(p.n_ref), repr(float(p.alpha)), failures.get(key, "")])
        n_fail = len(seeds) - len(samples)
        if not samples:
            stats.append(McStats(p, [], None, None, n_fail))
            continue
        stats.append(McStats(p, samples, summarize([s.sigma2 for s in samples], cfg.bins),
                             summarize([s.estimate for s in samples], cfg.bins), n_fail))

    if out is not None:
        _write_csv(out, header, rows)
        _write_stats(out, stats, cfg)
        fpath = out.with_name(out.name + ".failures.csv")
        if fail_rows:
            _write_csv(fpath, ["seed", "n", "nref", "alpha", "error"], fail_rows)
        elif fpath.exists():
            fpath.unlink()
        journal.unlink(missing_ok=True)

    total = len(points) * cfg.samples
    n_failed = sum(s.failures for s in stats)
    if n_failed:
        log.warning("%d of %d samples failed", n_failed, total)
    if n_failed > MAX_FAILURE_FRACTION * total:
        raise CampaignFailed(f"{n_failed} of {total} samples failed (limit {MAX_FAILURE_FRACTION:.0%})")
    return stats


def _write_stats(out: Path, stats: list[McStats], cfg: CampaignConfig) -> None:
    header = ["n", "nref", "cbl", "alpha", "beta", "count", "failures"]
    for q in ("sigma2", "estimate"):
        header += [f"{q}_{f}" for f in ("mean", "var", "se", "min", "max")]
    rows = []
    for st in stats:
        p = st.point
        row = [str(p.n), str(p.n_ref), repr(float(p.c_bl)), repr(float(p.alpha)), repr(float(p.beta)),
               str(st.count), str(st.failures)]
        for summ in (st.sigma2, st.estimate):
            if summ is None:
                row += [""] * 5
            else:
                row += [repr(summ.mean), repr(summ.var), repr(summ.se), repr(summ.min), repr(summ.max)]
        rows.append(row)
        if st.samples:
            hist = out.with_name(f"{out.name}.hist_n{p.n}_nref{p.n_ref}_alpha{p.alpha:g}.csv")
            emit_histogram([s.sigma2 for s in st.samples], cfg.bins, hist)
    _write_csv(out.with_name(out.name + ".stats.csv"), header, rows)


# ---------------------------------------------------------------------------
# corner-singularity benchmark


def exponent(Lambda: float) -> float:
    """Regularity exponent of the four-quadrant checkerboard with contrast ``Lambda``."""
    if not Lambda > 0:
        raise ValueError("Lambda must be positive")
    return 4.0 / math.pi * math.atan(1.0 / math.sqrt(Lambda))


@dataclass
class BenchmarkResult:
    Lambda: float
    levels: list[int]
    h1_errors: list[float]
    l2_errors: list[float]
    h1_rate: float
    l2_rate: float
    alpha: float
    fit_levels: list[int] = field(default_factory=list)
    mg_iters: list[int] = field(default_factory=list)


def _fit_rate(levels, errors) -> float:
    h = 2.0 ** -np.asarray(levels, dtype=float)
    e = np.asarray(errors, dtype=float)
    if e.size < 2 or np.any(e <= 0):
        return float("nan")
    return float(np.polyfit(np.log(h), np.log(e), 1)[0])


BENCHMARK_SOLVER = SolverConfig(max_cycles=200, tol=1e-10, outer="pcg")


def singularity_benchmark(Lambda: float, nref_max: int, solver: SolverConfig | None = None,
                          fit_from: int = 3, boundary=None) -> BenchmarkResult:
    """Four-quadrant problem on ``(-1, 1)^2`` with boundary data ``x1 + x2``.

    The coefficient is ``Lambda`` on the quadrants ``x1 x2 > 0`` and 1 elsewhere.
    Errors at levels ``1..nref_max`` are measured against level ``nref_max + 2``
    after injecting the coarse solutions into the reference mesh.
    ``boundary`` replaces the boundary data (a function of ``(..., 2)`` points).
    """
    if Lambda < 1:
        raise ValueError("Lambda must be >= 1")
    if nref_max < 3:
        raise ValueError("nref_max must be >= 3")
    # kappa = 0 and contrasts up to ~100: plain cycles slow down badly here, CG acceleration does not
    solver = solver or BENCHMARK_SOLVER
    lo, hi = (-1, -1), (1, 1)
    coarse = build_coarse_cube_mesh(2, lo, hi)
    space = HHGSpace(coarse, build_reference_hierarchy(2, nref_max + 2))
    fld = constant_field(lo, hi, lambda z: np.where(((z[..., 0] >= 0) == (z[..., 1] >= 0))[..., None], Lambda, 1.0))
    coeffs = element_coefficients(fld, coarse)
    ident = element_coefficients(constant_field(lo, hi, lambda z: np.ones(z.shape)), coarse)
    zero = replace(ident, c=np.zeros_like(ident.c))
    top = nref_max + 2
    ref_hier = MgHierarchy(space, coeffs, 0.0, top)

    g = boundary or (lambda x: x[..., 0] + x[..., 1])

    def boundary_data(k):
        return space.nodal_values(g, k)

    def inject(u, k):
        # nested spaces: repeated midpoint interpolation is exact; boundary values kept
        for j in range(k + 1, top + 1):
            ref = space.hier[j]
            fine = np.empty((coarse.n_elements, ref.n_nodes))
            kern.interpolate_columns(u, fine, ref.parents, ref.n_prev)
            u = fine
        return u

    def solve_level(k):
        hier = MgHierarchy(space, coeffs, 0.0, k) if k < top else ref_hier
        ud = boundary_data(k)
        b = hier.ops[k].apply(ud, mask_input=False)
        b.data *= -1.0
        # tolerance relative to the lift itself: for harmonic data b is pure roundoff
        scale = np.linalg.norm(hier.ops[k].local_apply(ud.data))
        bnorm = np.linalg.norm(b.data)
        if bnorm <= solver.tol * scale:
            return FieldVector(k, np.zeros_like(b.data)), 0
        res = solve(b, hier, replace(solver, tol=solver.tol * scale / bnorm))
        if not res.converged:
            raise RuntimeError(f"benchmark solve failed at level {k}: residual {res.residual:.3e}")
        return res.x, res.iterations

    w_ref, _ = solve_level(top)
    u_ref = boundary_data(top)
    u_ref.data += w_ref.data
    h1 = ElementOperator(1.0, ident, space.level(top))
    l2 = ElementOperator(1.0, zero, space.level(top))
    h1_norm = math.sqrt(h1.element_energy(u_ref))
    l2_norm = math.sqrt(l2.element_energy(u_ref))

    levels = list(range(1, nref_max + 1))
    h1_err, l2_err, iters = [], [], []
    for k in levels:
        w, it = solve_level(k)
        u = inject(boundary_data(k).data + w.data, k)
        e = FieldVector(top, u_ref.data - u)
        h1_err.append(math.sqrt(max(h1.element_energy(e), 0.0)) / h1_norm)
        l2_err.append(math.sqrt(max(l2.element_energy(e), 0.0)) / l2_norm)
        iters.append(it)
    fit = [k for k in levels if k >= fit_from]
    sel = [levels.index(k) for k in fit]
    return BenchmarkResult(
        Lambda=float(Lambda), levels=levels, h1_errors=h1_err, l2_errors=l2_err,
        h1_rate=_fit_rate(fit, [h1_err[i] for i in sel]),
        l2_rate=_fit_rate(fit, [l2_err[i] for i in sel]),
        alpha=exponent(Lambda), fit_levels=fit, mg_iters=iters,
    )


def write_benchmark(res: BenchmarkResult, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [[str(k), repr(2.0**-k), repr(e1), repr(e2), str(it)]
            for k, e1, e2, it in zip(res.levels, res.h1_errors, res.l2_errors, res.mg_iters)]
    _write_csv(path, ["level", "h", "h1_rel_error", "l2_rel_error", "mg_iters"], rows)
    _write_csv(path.with_name(path.name + ".summary.csv"),
               ["lambda", "alpha", "h1_rate", "l2_rate", "fit_from", "fit_to"],
               [[repr(res.Lambda), repr(res.alpha), repr(res.h1_rate), repr(res.l2_rate),
                 str(res.fit_levels[0]), str(res.fit_levels[-1])]])
