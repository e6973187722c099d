"""Matrix-free P1 finite elements on locally uniform (HHG) partitions.

A global P1 function is stored as a :class:`FieldVector` whose row ``j``
holds the nodal values on coarse element ``K_j`` in the local numbering of
the refined reference simplex. Nodes on coarse interfaces are duplicated;
the operator applies ``sum_pq c_pq A^pq`` element by element and then sums
the copies of each shared node (the interface reduction).

Sign convention for loads: ``b_i = -int grad(phi_i) . a xi``, i.e. the
weak form of ``(kappa - div a grad) v = div(a xi)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp

from . import _kernels as kern
from .coeffield import ElementCoefficients
from .mesh import (
    CoarsePartition,
    InterfaceIndex,
    ReferenceHierarchy,
    build_coarse_cube_mesh,
    build_interface_index,
    build_reference_hierarchy,
    local_coordinates,
)

__all__ = [
    "ReferenceOperators",
    "DirichletMask",
    "FieldVector",
    "LevelData",
    "HHGSpace",
    "ElementOperator",
    "InconsistentVectorError",
    "reference_operators",
    "build_dirichlet_mask",
    "local_stiffness_action",
    "local_load",
    "assemble_load",
    "operator_apply",
    "mass_apply",
    "dot",
    "cube_space",
    "dump_field_vector_csv",
]

# Classes of identical element matrices are materialised only while this is
# small compared with the number of elements.
_MAX_CLASS_FRACTION = 0.25


class InconsistentVectorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ReferenceOperators:
    """Reference stiffness blocks ``A^pq``, mass ``M`` and gradient integrals.

    All matrices share the CSR pattern ``(indptr, indices)``;
    ``stiff[e, p, q]`` is the value of ``A^pq`` at pattern entry ``e``.
    ``grad[i, p]`` is the integral of ``d phi_i / dx_p`` over the simplex.
    """

    level: int
    dimension: int
    n: int
    indptr: np.ndarray
    indices: np.ndarray
    stiff: np.ndarray  # (nnz, d, d)
    mass: np.ndarray  # (nnz,)
    grad: np.ndarray  # (n, d)

    def _csr(self, vals) -> sp.csr_matrix:
        return sp.csr_matrix((vals, self.indices, self.indptr), shape=(self.n, self.n))

    def A(self, p: int, q: int) -> sp.csr_matrix:
        return self._csr(self.stiff[:, p, q])

    @property
    def M(self) -> sp.csr_matrix:
        return self._csr(self.mass)

    @cached_property
    def sym_pairs(self) -> list[tuple[int, int]]:
        d = self.dimension
        return [(p, q) for p in range(d) for q in range(p, d)]

    @cached_property
    def channels(self) -> np.ndarray:
        """``(nnz, T)``: ``A^pp``, ``A^pq + A^qp`` (p < q), then ``M``."""
        cols = []
        for p, q in self.sym_pairs:
            cols.append(self.stiff[:, p, p] if p == q else self.stiff[:, p, q] + self.stiff[:, q, p])
        cols.append(self.mass)
        return np.ascontiguousarray(np.stack(cols, axis=1))


def reference_operators(hier: ReferenceHierarchy, level: int) -> ReferenceOperators:
    """Exact integrals on the ``level``-times refined reference simplex.

    P1 gradients are constant on each fine simplex, so a one-point rule is
    exact for stiffness entries; mass uses the closed-form P1 element matrix.
    """
    ref = hier[level]
    d = hier.dimension
    n = ref.n_nodes
    P = ref.coords[ref.elements]  # (nt, d+1, d)
    E = np.transpose(P[:, 1:, :] - P[:, :1, :], (0, 2, 1))  # columns are edges
    Einv = np.linalg.inv(E)
    vol = np.abs(np.linalg.det(E)) / (2.0 if d == 2 else 6.0)
    G = np.concatenate([-Einv.sum(axis=1, keepdims=True), Einv], axis=1)  # (nt, d+1, d)

    el = ref.elements
    rows = np.repeat(el, d + 1, axis=1).reshape(-1)
    cols = np.tile(el, (1, d + 1)).reshape(-1)
    key = rows * n + cols
    ukey, inv = np.unique(key, return_inverse=True)
    nnz = len(ukey)
    stiff = np.empty((nnz, d, d))
    for p in range(d):
        for q in range(d):
            loc = vol[:, None, None] * G[:, :, None, p] * G[:, None, :, q]
            stiff[:, p, q] = np.bincount(inv, weights=loc.reshape(-1), minlength=nnz)
    mloc = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    mass = np.bincount(inv, weights=(vol[:, None, None] * mloc).reshape(-1), minlength=nnz)
    grad = np.zeros((n, d))
    for p in range(d):
        grad[:, p] = np.bincount(el.reshape(-1), weights=(vol[:, None] * G[:, :, p]).reshape(-1), minlength=n)

    urows = ukey // n
    indptr = np.r_[0, np.cumsum(np.bincount(urows, minlength=n))].astype(np.int64)
    indices = (ukey % n).astype(np.int64)
    return ReferenceOperators(level, d, n, indptr, indices, stiff, mass, grad)


@dataclass(frozen=True, eq=False)
class DirichletMask:
    """Flat indices ``K * n_local + i`` of fine nodes on the domain boundary."""

    level: int
    flat: np.ndarray

    def apply(self, data: np.ndarray) -> None:
        data.reshape(-1)[self.flat] = 0.0


def build_dirichlet_mask(coarse: CoarsePartition, hier: ReferenceHierarchy, level: int) -> DirichletMask:
    ref = hier[level]
    bnd = ref.boundary_nodes
    s = 2**level
    pos = np.rint(local_coordinates(coarse, ref, local=bnd)).astype(np.int64)  # (m, nb, d)
    lo = np.asarray(coarse.box_lo) * s
    hi = np.asarray(coarse.box_hi) * s
    on = ((pos == lo) | (pos == hi)).any(axis=2)
    K, i = np.nonzero(on)
    flat = np.sort(K.astype(np.int64) * ref.n_nodes + bnd[i])
    return DirichletMask(level, flat)


@dataclass(eq=False)
class FieldVector:
    """Columns ``R_K x`` stored row-wise: ``data[j]`` belongs to coarse element ``j``."""

    level: int
    data: np.ndarray
    consistent: bool = True

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def copy(self) -> "FieldVector":
        return FieldVector(self.level, self.data.copy(), self.consistent)

    @classmethod
    def zeros(cls, level: int, n_elements: int, n_local: int) -> "FieldVector":
        return cls(level, np.zeros((n_elements, n_local)))


@dataclass(frozen=True, eq=False)
class LevelData:
    ops: ReferenceOperators
    interfaces: InterfaceIndex
    mask: DirichletMask
    n_elements: int

    @property
    def level(self) -> int:
        return self.ops.level

    @property
    def n_local(self) -> int:
        return self.ops.n

    def zeros(self) -> FieldVector:
        return FieldVector.zeros(self.level, self.n_elements, self.n_local)


class HHGSpace:
    """Coarse partition plus reference hierarchy; per-level data built lazily."""

    def __init__(self, coarse: CoarsePartition, hier: ReferenceHierarchy):
        if coarse.dimension != hier.dimension:
            raise ValueError("dimension mismatch between coarse mesh and hierarchy")
        self.coarse = coarse
        self.hier = hier
        self._levels: dict[int, LevelData] = {}

    @property
    def n_ref(self) -> int:
        return self.hier.n_ref

    @property
    def dimension(self) -> int:
        return self.coarse.dimension

    def level(self, k: int) -> LevelData:
        if k not in self._levels:
            self._levels[k] = LevelData(
                reference_operators(self.hier, k),
                build_interface_index(self.coarse, self.hier, k),
                build_dirichlet_mask(self.coarse, self.hier, k),
                self.coarse.n_elements,
            )
        return self._levels[k]

    def nodal_values(self, fn, k: int) -> FieldVector:
        """Interpolate ``fn`` (vectorised over an ``(..., d)`` array of points)."""
        pts = local_coordinates(self.coarse, self.hier[k]) / float(2**k)
        return FieldVector(k, np.ascontiguousarray(fn(pts), dtype=float))


@lru_cache(maxsize=8)
def cube_space(dimension: int, half_width: int, n_ref: int) -> HHGSpace:
    """Space on ``(-L, L)^d`` tiled by unit cells; cached because campaigns reuse the geometry."""
    lo = (-half_width,) * dimension
    hi = (half_width,) * dimension
    return HHGSpace(build_coarse_cube_mesh(dimension, lo, hi), build_reference_hierarchy(dimension, n_ref))


def local_stiffness_action(c: np.ndarray, ops: ReferenceOperators, x_col: np.ndarray) -> np.ndarray:
    """``sum_pq c[p, q] A^pq x`` for one column, without forming the element matrix."""
    d = ops.dimension
    y = np.zeros(ops.n)
    for p in range(d):
        for q in range(d):
            if c[p, q] != 0.0:
                y += c[p, q] * (ops.A(p, q) @ x_col)
    return y


def _check_consistent(X: FieldVector, ld: LevelData) -> None:
    if not X.consistent:
        raise InconsistentVectorError("operator input must be interface-consistent")
    if X.level != ld.level or X.data.shape != (ld.n_elements, ld.n_local):
        raise ValueError(f"vector at level {X.level} does not match level {ld.level}")


class ElementOperator:
    """``kappa M + A`` on one level, bound to a set of element coefficients.

    Elements sharing the same ``(c, kappa |det B|)`` share one assembled
    reference matrix (checkerboard fields have only a handful of such
    classes). Otherwise the combination is formed on the fly per element.
    """

    def __init__(self, kappa: float, coeffs: ElementCoefficients, ld: LevelData, use_classes: bool | None = None):
        if kappa < 0:
            raise ValueError("kappa must be non-negative")
        self.kappa = float(kappa)
        self.ld = ld
        ops = ld.ops
        m = len(coeffs.abs_det)
        w = [coeffs.c[:, p, q] for p, q in ops.sym_pairs]
        w.append(self.kappa * coeffs.abs_det)
        w = np.ascontiguousarray(np.stack(w, axis=1))
        uw, inv = np.unique(w, axis=0, return_inverse=True)
        if use_classes is None:
            use_classes = len(uw) <= max(8, _MAX_CLASS_FRACTION * m)
        if use_classes:
            self.class_vals = np.ascontiguousarray(uw @ ops.channels.T)
            self.elem_class = inv.reshape(-1).astype(np.int64)
            self.weights = None
        else:
            self.class_vals = None
            self.elem_class = None
            self.weights = w

    @property
    def n_classes(self) -> int:
        return 0 if self.class_vals is None else len(self.class_vals)

    def _local(self, x: np.ndarray, out: np.ndarray) -> float:
        ops = self.ld.ops
        if self.class_vals is not None:
            return kern.class_apply(x, out, ops.indptr, ops.indices, self.class_vals, self.elem_class)
        return kern.weighted_apply(x, out, ops.indptr, ops.indices, ops.channels, self.weights)

    def local_apply(self, x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """Step one only: per-element products, before interface reduction."""
        if out is None:
            out = np.empty_like(x)
        self._local(x, out)
        return out

    def apply(self, X: FieldVector, out: FieldVector | None = None, mask_input: bool = True) -> FieldVector:
        return self.apply_energy(X, out, mask_input)[0]

    def apply_energy(self, X: FieldVector, out: FieldVector | None = None, mask_input: bool = True):
        """Like :meth:`apply`, also returning ``X^T (kappa M + A) X`` of the (masked) input.

        The quadratic form is summed element by element before the interface
        reduction, so it costs no extra pass over memory.
        """
        ld = self.ld
        _check_consistent(X, ld)
        x = X.data
        if mask_input and ld.mask.flat.size and np.any(x.reshape(-1)[ld.mask.flat]):
            x = x.copy()
            ld.mask.apply(x)
        y = out.data if out is not None else np.empty_like(x)
        energy = self._local(x, y)
        kern.interface_sum(y.reshape(-1), ld.interfaces.ptr, ld.interfaces.members)
        ld.mask.apply(y)
        if out is None:
            out = FieldVector(ld.level, y, True)
        out.consistent = True
        return out, energy

    def element_energy(self, X: FieldVector) -> float:
        """``sum_K x_K^T A_K x_K``: the global quadratic form, valid with any boundary values."""
        return self._local(X.data, np.empty_like(X.data))


def operator_apply(kappa, elem_coeffs, ops, interfaces, mask, X: FieldVector) -> FieldVector:
    """``(kappa M + A) X`` via the per-element product and the interface reduction."""
    ld = LevelData(ops, interfaces, mask, X.data.shape[0])
    return ElementOperator(kappa, elem_coeffs, ld).apply(X)


def mass_apply(abs_det: np.ndarray, ld: LevelData, X: FieldVector, scale: float = 1.0) -> FieldVector:
    """``scale * M X`` with unmasked input and masked output.

    Boundary values of ``X`` are kept on purpose: the data being multiplied
    may come from a larger domain where those nodes are interior.
    """
    _check_consistent(X, ld)
    ops = ld.ops
    udet, cls = np.unique(scale * np.asarray(abs_det, dtype=float), return_inverse=True)
    vals = np.ascontiguousarray(udet[:, None] * ops.mass[None, :])
    y = np.empty_like(X.data)
    kern.class_apply(X.data, y, ops.indptr, ops.indices, vals, cls.reshape(-1).astype(np.int64))
    kern.interface_sum(y.reshape(-1), ld.interfaces.ptr, ld.interfaces.members)
    ld.mask.apply(y)
    return FieldVector(ld.level, y, True)


def dot(X: FieldVector, Z: FieldVector, interfaces: InterfaceIndex) -> float:
    """Inner product of the underlying global vectors (each shared node counted once)."""
    if X.level != Z.level or X.level != interfaces.level:
        raise ValueError("level mismatch in dot")
    if not (X.consistent and Z.consistent):
        raise InconsistentVectorError("dot needs consistent vectors")
    return kern.dup_dot(X.flat, Z.flat, interfaces.owner_weight)


def local_load(elem_coeffs: ElementCoefficients, xi, ops: ReferenceOperators) -> np.ndarray:
    """Unassembled load ``-int_K grad(phi_i) . a xi`` per element, shape ``(m, n)``."""
    xi = np.asarray(xi, dtype=float)
    g = elem_coeffs.flux @ xi  # (m, d): |det B| B^{-1} a xi
    return -(g @ ops.grad.T)


def assemble_load(elem_coeffs: ElementCoefficients, xi, ops: ReferenceOperators,
                  interfaces: InterfaceIndex, mask: DirichletMask) -> FieldVector:
    xi = np.asarray(xi, dtype=float)
    if not np.isclose(np.linalg.norm(xi), 1.0, rtol=0, atol=1e-12):
        raise ValueError("xi must be a unit vector")
    b = np.ascontiguousarray(local_load(elem_coeffs, xi, ops))
    kern.interface_sum(b.reshape(-1), interfaces.ptr, interfaces.members)
    mask.apply(b)
    return FieldVector(ops.level, b, True)


def dump_field_vector_csv(X: FieldVector, path) -> None:
    m, n = X.data.shape
    with open(path, "w") as fh:
        fh.write("element,local_node,value\n")
        for j in range(m):
            for i in range(n):
                fh.write(f"{j},{i},{float(X.data[j, i])!r}\n")
