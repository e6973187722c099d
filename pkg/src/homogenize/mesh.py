"""Coarse cube-tiled partitions, nested refinements of the reference simplex
and the interface index tying duplicated fine nodes together.

The fine mesh is never stored. A fine node is addressed by a pair
``(coarse element, local index)``; local indices refer to the nodes of the
refined reference simplex, whose integer coordinates at level ``l`` are
scaled by ``2**l`` so that every geometric test below is exact.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "CoarsePartition",
    "RefLevel",
    "ReferenceHierarchy",
    "InterfaceIndex",
    "MeshError",
    "build_coarse_cube_mesh",
    "build_reference_hierarchy",
    "build_interface_index",
    "local_coordinates",
    "global_numbering",
    "export_level_mesh",
]

VERTEX, EDGE, FACE = 0, 1, 2


class MeshError(ValueError):
    """Raised for invalid mesh requests or inconsistent mesh construction."""


@dataclass(frozen=True, eq=False)
class CoarsePartition:
    """Unstructured simplicial coarse mesh with per-element affine maps.

    ``F_K(x) = B[K] @ x + v[K]`` sends the reference vertices
    ``0, e_1, ..., e_d`` to ``nodes[elements[K]]``.
    """

    dimension: int
    nodes: np.ndarray  # (n_nodes, d) float
    elements: np.ndarray  # (n_elem, d + 1) int
    B: np.ndarray  # (n_elem, d, d)
    v: np.ndarray  # (n_elem, d)
    cells: np.ndarray  # (n_elem, d) int, lattice cell containing each element
    box_lo: tuple[int, ...]
    box_hi: tuple[int, ...]
    types_per_cell: int = 0  # > 0 when elements are ordered cell-major

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @cached_property
    def abs_det(self) -> np.ndarray:
        return np.abs(np.linalg.det(self.B))

    def volume(self) -> float:
        return float(self.abs_det.sum() / _factorial(self.dimension))

    @classmethod
    def from_simplices(cls, nodes, elements, box_lo, box_hi, types_per_cell=0):
        nodes = np.asarray(nodes, dtype=float)
        elements = np.asarray(elements, dtype=np.int64)
        d = nodes.shape[1]
        verts = nodes[elements]  # (m, d+1, d)
        v = verts[:, 0, :].copy()
        B = np.transpose(verts[:, 1:, :] - verts[:, :1, :], (0, 2, 1)).copy()
        if np.any(np.abs(np.linalg.det(B)) <= 0):
            raise MeshError("degenerate coarse element")
        lo = verts.min(axis=1)
        cells = np.floor(lo + 1e-12).astype(np.int64)
        if np.any(verts.max(axis=1) > cells + 1 + 1e-12):
            raise MeshError("coarse element straddles a lattice cell")
        return cls(d, nodes, elements, B, v, cells, tuple(box_lo), tuple(box_hi), types_per_cell)


def _factorial(d: int) -> int:
    return 2 if d == 2 else 6


def _check_dimension(dimension: int) -> None:
    if dimension not in (2, 3):
        raise MeshError(f"dimension must be 2 or 3, got {dimension}")


def build_coarse_cube_mesh(dimension: int, box_lo, box_hi) -> CoarsePartition:
    """Split every unit cell of the integer box ``[lo, hi]`` into simplices.

    Each cell is cut into ``d!`` Kuhn simplices sharing the diagonal from
    ``z`` to ``z + (1, ..., 1)``; the orientation is the same in every cell, so
    neighbouring cells induce identical triangulations on shared facets.
    Elements are ordered cell-major (lexicographic in ``z``), then by
    permutation.
    """
    _check_dimension(dimension)
    lo = np.asarray(box_lo, dtype=np.int64).reshape(-1)
    hi = np.asarray(box_hi, dtype=np.int64).reshape(-1)
    if lo.size != dimension or hi.size != dimension:
        raise MeshError("box corners must have one entry per dimension")
    if np.any(hi - lo < 1):
        raise MeshError("box must contain at least one unit cell per axis")
    shape = hi - lo
    npts = shape + 1

    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dimension)
    strides = np.ones(dimension, dtype=np.int64)
    for i in range(dimension - 2, -1, -1):
        strides[i] = strides[i + 1] * npts[i + 1]

    cell_axes = [np.arange(a, b) for a, b in zip(lo, hi)]
    cells = np.stack(np.meshgrid(*cell_axes, indexing="ij"), axis=-1).reshape(-1, dimension)
    base = (cells - lo) @ strides

    perms = list(itertools.permutations(range(dimension)))
    elements = np.empty((len(cells), len(perms), dimension + 1), dtype=np.int64)
    for t, perm in enumerate(perms):
        offset = 0
        elements[:, t, 0] = base
        for j, axis in enumerate(perm):
            offset += strides[axis]
            elements[:, t, j + 1] = base + offset
    elements = elements.reshape(-1, dimension + 1)
    part = CoarsePartition.from_simplices(nodes, elements, tuple(lo), tuple(hi), len(perms))
    return part


# ---------------------------------------------------------------------------
# reference hierarchy


@dataclass(frozen=True, eq=False)
class RefLevel:
    """One uniform refinement level of the reference simplex.

    ``int_coords`` are node coordinates scaled by ``2**level``.  Nodes of the
    previous level form a prefix; node ``n_prev + m`` is the midpoint of
    ``(parents[m, 0], parents[m, 1])``.
    """

    level: int
    int_coords: np.ndarray  # (n, d) int
    elements: np.ndarray  # (n_fine, d+1)
    parents: np.ndarray  # (n - n_prev, 2)
    n_prev: int

    @property
    def n_nodes(self) -> int:
        return len(self.int_coords)

    @property
    def coords(self) -> np.ndarray:
        return self.int_coords / float(2**self.level)

    @cached_property
    def barycentric_int(self) -> np.ndarray:
        """Integer barycentric coordinates (scaled by ``2**level``), shape (n, d+1)."""
        s = 2**self.level
        lam0 = s - self.int_coords.sum(axis=1, keepdims=True)
        return np.hstack([lam0, self.int_coords])

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        """Local indices of nodes on the boundary of the reference simplex."""
        return np.flatnonzero((self.barycentric_int == 0).any(axis=1))


@dataclass(frozen=True, eq=False)
class ReferenceHierarchy:
    dimension: int
    levels: tuple[RefLevel, ...]

    @property
    def n_ref(self) -> int:
        return len(self.levels) - 1

    def __getitem__(self, k: int) -> RefLevel:
        return self.levels[k]


def _bey_children(el: np.ndarray, mid: dict, dimension: int) -> np.ndarray:
    """Children of each element given the midpoint lookup ``mid[(a, b)]``."""
    if dimension == 2:
        x0, x1, x2 = el.T
        m01, m02, m12 = mid[0, 1], mid[0, 2], mid[1, 2]
        kids = [
            (x0, m01, m02),
            (m01, x1, m12),
            (m02, m12, x2),
            (m01, m02, m12),
        ]
    else:
        x0, x1, x2, x3 = el.T
        m01, m02, m03 = mid[0, 1], mid[0, 2], mid[0, 3]
        m12, m13, m23 = mid[1, 2], mid[1, 3], mid[2, 3]
        kids = [
            (x0, m01, m02, m03),
            (m01, x1, m12, m13),
            (m02, m12, x2, m23),
            (m03, m13, m23, x3),
            (m01, m02, m03, m13),
            (m01, m02, m12, m13),
            (m02, m03, m13, m23),
            (m02, m12, m13, m23),
        ]
    out = np.stack([np.stack(k, axis=1) for k in kids], axis=1)
    return out.reshape(-1, dimension + 1)


def build_reference_hierarchy(dimension: int, n_ref: int) -> ReferenceHierarchy:
    """Nested red refinements ``T_0 = {K} , T_1, ..., T_n_ref`` of the standard simplex.

    Children follow Bey's ordering, which keeps every child a Kuhn simplex
    when the parent is one, so refined cube meshes remain globally conforming
    and shape-regular.
    """
    _check_dimension(dimension)
    if n_ref < 0:
        raise MeshError("n_ref must be non-negative")
    d = dimension
    coords = np.vstack([np.zeros(d, dtype=np.int64), np.eye(d, dtype=np.int64)])
    elements = np.arange(d + 1, dtype=np.int64).reshape(1, -1)
    levels = [RefLevel(0, coords, elements, np.zeros((0, 2), np.int64), 0)]
    pairs = list(itertools.combinations(range(d + 1), 2))
    for k in range(1, n_ref + 1):
        n_prev = len(coords)
        edges = np.stack([np.sort(elements[:, [a, b]], axis=1) for a, b in pairs], axis=1)
        flat = edges.reshape(-1, 2)
        keys = flat[:, 0] * n_prev + flat[:, 1]
        ukeys, inv = np.unique(keys, return_inverse=True)
        parents = np.stack([ukeys // n_prev, ukeys % n_prev], axis=1)
        new_ids = (n_prev + inv).reshape(len(elements), len(pairs))
        mid = {pair: new_ids[:, j] for j, pair in enumerate(pairs)}
        coords = np.vstack([2 * coords, coords[parents[:, 0]] + coords[parents[:, 1]]])
        elements = _bey_children(elements, mid, d)
        levels.append(RefLevel(k, coords, elements, parents, n_prev))
    return ReferenceHierarchy(d, tuple(levels))


# ---------------------------------------------------------------------------
# interface index


@dataclass(frozen=True, eq=False)
class InterfaceIndex:
    """Groups of flat indices ``K * n_local + i`` that denote one global node.

    Groups are sorted by their first (owner) member, members are sorted
    inside a group. Nodes interior to a coarse element never appear.
    """

    level: int
    n_elements: int
    n_local: int
    ptr: np.ndarray  # (n_groups + 1,)
    members: np.ndarray  # flat indices
    kind: np.ndarray  # VERTEX / EDGE / FACE per group

    @property
    def n_groups(self) -> int:
        return len(self.ptr) - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.ptr)

    @property
    def owners(self) -> np.ndarray:
        return self.members[self.ptr[:-1]]

    @cached_property
    def non_owners(self) -> np.ndarray:
        keep = np.ones(len(self.members), dtype=bool)
        keep[self.ptr[:-1]] = False
        return self.members[keep]

    @cached_property
    def owner_weight(self) -> np.ndarray:
        """1 on every entry except non-owner copies (0), flat over ``(n_elements, n_local)``."""
        w = np.ones(self.n_elements * self.n_local, dtype=np.uint8)
        w[self.non_owners] = 0
        return w

    def groups(self):
        for g in range(self.n_groups):
            yield self.members[self.ptr[g]:self.ptr[g + 1]]


def local_coordinates(coarse: CoarsePartition, ref: RefLevel, elems=None, local=None) -> np.ndarray:
    """Physical coordinates of local nodes, scaled by ``2**level``.

    Returns shape ``(len(elems), len(local), d)``.
    """
    if elems is None:
        elems = np.arange(coarse.n_elements)
    if local is None:
        local = np.arange(ref.n_nodes)
    s = float(2**ref.level)
    c = ref.int_coords[local].astype(float)
    return np.einsum("kpq,iq->kip", coarse.B[elems], c) + s * coarse.v[elems][:, None, :]


def _round_exact(x: np.ndarray, what: str) -> np.ndarray:
    r = np.rint(x)
    if np.any(np.abs(x - r) > 1e-9):
        raise MeshError(f"{what}: fine node coordinates are not on the dyadic lattice")
    return r.astype(np.int64)


def _pack_rows(rows: np.ndarray) -> np.ndarray:
    """Injective int64 key for each row of a small non-negative integer array."""
    rows = np.asarray(rows, dtype=np.int64)
    span = int(rows.max()) + 1 if rows.size else 1
    if span ** rows.shape[1] >= 2**62:
        _, inv = np.unique(rows, axis=0, return_inverse=True)
        return inv.reshape(-1).astype(np.int64)
    key = np.zeros(len(rows), dtype=np.int64)
    for j in range(rows.shape[1]):
        key = key * span + rows[:, j]
    return key


def _carrier_keys(coarse: CoarsePartition, ref: RefLevel, local: np.ndarray):
    """Global coarse sub-simplex (as packed sorted vertex ids) carrying each local node."""
    d = coarse.dimension
    bary = ref.barycentric_int[local] > 0  # (nl, d+1)
    nodes = coarse.elements  # (m, d+1)
    # -1 padding sorts first; shift by one so packing sees non-negatives
    ids = np.where(bary[None, :, :], nodes[:, None, :], -1)  # (m, nl, d+1)
    ids = np.sort(ids, axis=2)[:, :, 1:] + 1  # boundary nodes use <= d vertices
    size = bary.sum(axis=1)
    return ids.reshape(-1, d), np.broadcast_to(size, (len(nodes), len(local))).reshape(-1)


def _subsimplex_multiplicity(coarse: CoarsePartition):
    """Packed vertex-set key -> number of coarse elements containing that sub-simplex."""
    d = coarse.dimension
    rows = []
    for size in range(1, d + 1):
        for sub in itertools.combinations(range(d + 1), size):
            ids = np.sort(coarse.elements[:, list(sub)], axis=1) + 1
            rows.append(np.hstack([np.zeros((len(ids), d - size), np.int64), ids]))
    return np.vstack(rows)


def build_interface_index(coarse: CoarsePartition, hier: ReferenceHierarchy, level: int) -> InterfaceIndex:
    """Identify duplicated fine nodes by coordinate coincidence.

    The geometric grouping is validated against coarse connectivity: every
    member of a group must sit on the same coarse vertex/edge/face, and the
    group must contain one copy per coarse element owning that sub-simplex.
    """
    if level > hier.n_ref:
        raise MeshError(f"level {level} exceeds hierarchy depth {hier.n_ref}")
    ref = hier[level]
    m, n_loc, d = coarse.n_elements, ref.n_nodes, coarse.dimension
    bnd = ref.boundary_nodes
    flat = (np.arange(m, dtype=np.int64)[:, None] * n_loc + bnd[None, :]).reshape(-1)

    if m == 1:
        return InterfaceIndex(level, m, n_loc, np.zeros(1, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int8))

    pos = _round_exact(local_coordinates(coarse, ref, local=bnd), "interface index").reshape(-1, d)
    pos -= pos.min(axis=0)
    key = _pack_rows(pos)
    order = np.lexsort((flat, key))
    key_sorted = key[order]
    starts = np.flatnonzero(np.r_[True, key_sorted[1:] != key_sorted[:-1]])
    sizes = np.diff(np.r_[starts, len(key_sorted)])
    shared = sizes > 1

    # combinatorial cross-check
    carrier, csize = _carrier_keys(coarse, ref, bnd)
    all_sub = _subsimplex_multiplicity(coarse)
    ckey_all = _pack_rows(np.vstack([carrier, all_sub]))
    ckey, subkey = ckey_all[: len(carrier)], ckey_all[len(carrier):]
    usub, mult = np.unique(subkey, return_counts=True)
    mult_of = mult[np.searchsorted(usub, ckey)]
    ck = ckey[order]
    same = np.minimum.reduceat(ck, starts) == np.maximum.reduceat(ck, starts)
    if not np.all(same):
        raise MeshError("coincident fine nodes lie on different coarse sub-simplices")
    if not np.array_equal(sizes, mult_of[order][starts]):
        raise MeshError("interface group size disagrees with coarse adjacency")

    in_shared = np.repeat(shared, sizes)
    members = flat[order][in_shared]
    kind = (csize[order][starts[shared]] - 1).astype(np.int8)
    sizes = sizes[shared]
    # canonical order: groups sorted by owner (smallest member, members sorted inside)
    ptr = np.r_[0, np.cumsum(sizes)].astype(np.int64)
    rank = np.empty(len(sizes), dtype=np.int64)
    rank[np.argsort(members[ptr[:-1]], kind="stable")] = np.arange(len(sizes))
    gid = np.repeat(rank, sizes)
    members = members[np.lexsort((members, gid))]
    sizes = sizes[np.argsort(rank)]
    kind = kind[np.argsort(rank)]
    ptr = np.r_[0, np.cumsum(sizes)].astype(np.int64)
    return InterfaceIndex(level, m, n_loc, ptr, members.astype(np.int64), kind)


def global_numbering(coarse: CoarsePartition, hier: ReferenceHierarchy, level: int):
    """Explicit map ``(K, i) -> global node id`` and the global coordinates.

    Intended for test oracles and exports on small meshes only; it touches
    every fine node.
    """
    ref = hier[level]
    d = coarse.dimension
    pos = _round_exact(local_coordinates(coarse, ref), "global numbering").reshape(-1, d)
    shift = pos.min(axis=0)
    upos, inv = np.unique(pos - shift, axis=0, return_inverse=True)
    sigma = inv.reshape(coarse.n_elements, ref.n_nodes)
    return sigma, (upos + shift) / float(2**level)


def export_level_mesh(coarse: CoarsePartition, hier: ReferenceHierarchy, level: int, path) -> None:
    """Write the global fine mesh as plain text: node lines, blank line, element lines."""
    sigma, xyz = global_numbering(coarse, hier, level)
    fine = sigma[:, hier[level].elements].reshape(-1, coarse.dimension + 1)
    with open(path, "w") as fh:
        for row in xyz:
            fh.write(" ".join(repr(float(c)) for c in row) + "\n")
        fh.write("\n")
        for row in fine:
            fh.write(" ".join(str(int(c)) for c in row) + "\n")
