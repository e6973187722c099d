"""Multiscale estimator of the homogenized coefficient.

For one field realization the resolvent chain

    (1 - div a grad) v_0 = div(a xi),   (2^-k - div a grad) v_k = 2^-k v_{k-1}

is solved on shrinking-then-growing lattice boxes with zero Dirichlet data,
and cube averages of the iterates are combined into ``sigma2``. The
estimate of ``xi . abar xi`` is the cube average of ``xi . a xi`` minus
``sigma2``.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .coeffield import (
    CoefficientField,
    ElementCoefficients,
    FieldDistribution,
    element_coefficients,
    sample_field,
)
from .fem import FieldVector, HHGSpace, assemble_load, cube_space, local_load, mass_apply
from .multigrid import MgHierarchy, SolverConfig, SolveResult, solve

__all__ = [
    "EstimatorConfig",
    "ChainDomain",
    "ChainStep",
    "EstimatorSample",
    "SolverFailure",
    "chain_domains",
    "iter_chain",
    "solve_chain",
    "transfer",
    "cube_elements",
    "cube_average_energy",
    "cube_average_cross",
    "mean_a_xi",
    "estimate_sample",
]

_SNAP_TOL = 1e-9


class SolverFailure(RuntimeError):
    def __init__(self, scale: int, result: SolveResult):
        super().__init__(
            f"multigrid did not converge at scale {scale}: "
            f"residual {result.residual:.3e} after {result.iterations} cycles"
        )
        self.scale = scale
        self.result = result


@dataclass(frozen=True)
class EstimatorConfig:
    dimension: int
    n: int
    n_ref: int
    c_bl: float
    alpha: float
    beta: float
    seed: int = 0
    xi: tuple[float, ...] | None = None  # defaults to e_1
    solver: SolverConfig = field(default_factory=SolverConfig)
    epsilon: float = 0.0  # r_k = 2^(n - (1/2 - epsilon) k)

    def __post_init__(self):
        if self.dimension not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        if self.n < 0:
            raise ValueError("n must be >= 0")
        if self.n_ref < 1:
            raise ValueError("n_ref must be >= 1")
        if not self.c_bl > 0:
            raise ValueError("c_bl must be positive")
        if not 0 <= self.epsilon < 0.5:
            raise ValueError("epsilon must lie in [0, 1/2)")
        if self.xi is None:
            object.__setattr__(self, "xi", tuple(float(i == 0) for i in range(self.dimension)))
        xi = np.asarray(self.xi, dtype=float)
        if xi.shape != (self.dimension,) or not math.isclose(float(np.linalg.norm(xi)), 1.0, abs_tol=1e-12):
            raise ValueError("xi must be a unit vector in R^d")
        FieldDistribution(self.dimension, self.alpha, self.beta)  # validates alpha, beta

    @property
    def distribution(self) -> FieldDistribution:
        return FieldDistribution(self.dimension, self.alpha, self.beta)

    def with_seed(self, seed: int) -> "EstimatorConfig":
        return EstimatorConfig(**{**self.__dict__, "seed": int(seed)})


@dataclass(frozen=True)
class ChainDomain:
    k: int
    half_width: int  # L(k, n) snapped up to an integer
    radius: int  # r_k snapped up to an integer


def _ceil(x: float) -> int:
    return int(math.ceil(x - _SNAP_TOL))


def chain_domains(cfg: EstimatorConfig) -> list[ChainDomain]:
    """Computational box half-width and averaging radius for each scale."""
    out = []
    for k in range(cfg.n + 1):
        r = 2.0 ** (cfg.n - (0.5 - cfg.epsilon) * k)
        L = r + cfg.c_bl * (1 + cfg.n) * 2.0 ** (k / 2)
        ri = _ceil(r)
        out.append(ChainDomain(k, max(_ceil(L), ri + 1), ri))
    return out


def _space(cfg: EstimatorConfig, dom: ChainDomain) -> HHGSpace:
    return cube_space(cfg.dimension, dom.half_width, cfg.n_ref)


def _cell_index(coarse, cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Element index of (cell, type 0) in ``coarse``, and an inside-the-box mask."""
    lo = np.asarray(coarse.box_lo)
    shape = np.asarray(coarse.box_hi) - lo
    rel = cells - lo
    inside = np.all((rel >= 0) & (rel < shape), axis=1)
    flat = np.zeros(len(cells), dtype=np.int64)
    flat[inside] = np.ravel_multi_index(tuple(rel[inside].T), tuple(shape))
    return flat * coarse.types_per_cell, inside


def transfer(X: FieldVector, src: HHGSpace, dst: HHGSpace) -> FieldVector:
    """Copy element columns of ``X`` onto ``dst`` by lattice cell; zero outside ``src``.

    Both spaces must tile lattice boxes with the same cell split and the same
    refinement, so nodal values are copied exactly. Extension by zero is
    continuous because ``X`` vanishes on the boundary of its box.
    """
    cs, cd = src.coarse, dst.coarse
    if cs.types_per_cell != cd.types_per_cell or cs.types_per_cell == 0:
        raise ValueError("transfer needs cell-major lattice meshes of the same type")
    tpc = cd.types_per_cell
    base, inside = _cell_index(cs, cd.cells)
    src_idx = base + np.arange(cd.n_elements) % tpc
    out = np.zeros((cd.n_elements, X.data.shape[1]))
    out[inside] = X.data[src_idx[inside]]
    return FieldVector(X.level, out, True)


def cube_elements(space: HHGSpace, radius: int) -> np.ndarray:
    """Indices of coarse elements inside ``(-radius, radius)^d``."""
    c = space.coarse
    if radius > min(-min(c.box_lo), max(c.box_hi)):
        raise ValueError(f"averaging cube of radius {radius} exceeds the mesh")
    cells = c.cells
    return np.flatnonzero(np.all((cells >= -radius) & (cells < radius), axis=1))


def _mass_rows(space: HHGSpace, level: int, rows: np.ndarray, abs_det: np.ndarray) -> np.ndarray:
    M = space.level(level).ops.M
    return (M @ rows.T).T * abs_det[:, None]


def cube_average_energy(v0: FieldVector, space: HHGSpace, coeffs: ElementCoefficients, xi, radius: int) -> float:
    """Average of ``-a xi . grad v0 + v0^2`` over ``(-radius, radius)^d``, integrated exactly."""
    sel = cube_elements(space, radius)
    ops = space.level(v0.level).ops
    x = v0.data[sel]
    bloc = local_load(_subset(coeffs, sel), xi, ops)  # = -int a xi . grad(phi_i)
    mx = _mass_rows(space, v0.level, x, coeffs.abs_det[sel])
    total = float(np.sum(x * (bloc + mx)))
    return total / (2.0 * radius) ** space.dimension


def cube_average_cross(v_prev: FieldVector, v_k: FieldVector, space: HHGSpace,
                       coeffs: ElementCoefficients, radius: int) -> float:
    """Average of ``v_prev v_k + v_k^2`` over ``(-radius, radius)^d``; both live on ``space``."""
    if v_prev.data.shape != v_k.data.shape:
        raise ValueError("both functions must live on the same mesh")
    sel = cube_elements(space, radius)
    x = v_k.data[sel]
    mx = _mass_rows(space, v_k.level, x, coeffs.abs_det[sel])
    total = float(np.sum((v_prev.data[sel] + x) * mx))
    return total / (2.0 * radius) ** space.dimension


def _subset(coeffs: ElementCoefficients, sel: np.ndarray) -> ElementCoefficients:
    return ElementCoefficients(coeffs.c[sel], coeffs.abs_det[sel], coeffs.flux[sel], coeffs.a_diag[sel])


def mean_a_xi(field: CoefficientField, xi, radius: int) -> float:
    """Exact average of ``xi . a xi`` over the cells of ``(-radius, radius)^d``."""
    d = field.dimension
    axes = [np.arange(-radius, radius)] * d
    cells = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    xi2 = np.asarray(xi, dtype=float) ** 2
    return float(np.mean(field.at(cells) @ xi2))


@dataclass
class ChainStep:
    k: int
    domain: ChainDomain
    space: HHGSpace
    coeffs: ElementCoefficients
    v: FieldVector
    result: SolveResult
    v_prev: FieldVector | None  # previous iterate transferred to this mesh


def sample_chain_field(cfg: EstimatorConfig) -> CoefficientField:
    L = max(dom.half_width for dom in chain_domains(cfg))
    lo, hi = (-L,) * cfg.dimension, (L,) * cfg.dimension
    return sample_field(cfg.distribution, lo, hi, cfg.seed)


def iter_chain(cfg: EstimatorConfig, field: CoefficientField | None = None) -> Iterator[ChainStep]:
    """Solve the chain scale by scale, keeping only the previous iterate alive."""
    field = sample_chain_field(cfg) if field is None else field
    xi = np.asarray(cfg.xi, dtype=float)
    top = cfg.n_ref
    prev: tuple[FieldVector, HHGSpace] | None = None
    for dom in chain_domains(cfg):
        space = _space(cfg, dom)
        coeffs = element_coefficients(field, space.coarse)
        ld = space.level(top)
        kappa = 2.0 ** -dom.k
        if prev is None:
            b = assemble_load(coeffs, xi, ld.ops, ld.interfaces, ld.mask)
            v_prev = None
        else:
            v_prev = transfer(prev[0], prev[1], space)
            prev = None
            b = mass_apply(coeffs.abs_det, ld, v_prev, scale=kappa)
        res = solve(b, MgHierarchy(space, coeffs, kappa, top), cfg.solver)
        del b  # top-level vectors dominate memory at N_ref = 5
        if not res.converged:
            raise SolverFailure(dom.k, res)
        yield ChainStep(dom.k, dom, space, coeffs, res.x, res, v_prev)
        prev = (res.x, space)


def solve_chain(cfg: EstimatorConfig, field: CoefficientField | None = None) -> list[ChainStep]:
    return list(iter_chain(cfg, field))


@dataclass
class EstimatorSample:
    seed: int
    n: int
    n_ref: int
    c_bl: float
    alpha: float
    beta: float
    sigma2: float
    mean_a_xi: float
    estimate: float
    scale_terms: list[float]
    mg_iters: list[int]
    mg_residuals: list[float]
    wall_s: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def estimate_sample(cfg: EstimatorConfig, field: CoefficientField | None = None) -> EstimatorSample:
    t0 = time.perf_counter()
    field = sample_chain_field(cfg) if field is None else field
    xi = np.asarray(cfg.xi, dtype=float)
    terms: list[float] = []
    iters: list[int] = []
    resid: list[float] = []
    for step in iter_chain(cfg, field):
        r = step.domain.radius
        if step.k == 0:
            terms.append(cube_average_energy(step.v, step.space, step.coeffs, xi, r))
        else:
            terms.append(2.0**step.k * cube_average_cross(step.v_prev, step.v, step.space, step.coeffs, r))
        iters.append(step.result.iterations)
        resid.append(step.result.residual)
    sigma2 = 0.0
    for t in terms:  # fixed left-to-right order
        sigma2 += t
    m = mean_a_xi(field, xi, chain_domains(cfg)[0].radius)
    return EstimatorSample(
        seed=cfg.seed, n=cfg.n, n_ref=cfg.n_ref, c_bl=cfg.c_bl, alpha=cfg.alpha, beta=cfg.beta,
        sigma2=sigma2, mean_a_xi=m, estimate=m - sigma2,
        scale_terms=terms, mg_iters=iters, mg_residuals=resid,
        wall_s=time.perf_counter() - t0,
    )
