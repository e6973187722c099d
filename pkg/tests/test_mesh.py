import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homogenize.mesh import (
    EDGE,
    FACE,
    VERTEX,
    CoarsePartition,
    MeshError,
    build_coarse_cube_mesh,
    build_interface_index,
    build_reference_hierarchy,
    export_level_mesh,
    global_numbering,
    local_coordinates,
)


def brute_force_groups(coarse, hier, level):
    """Group (K, i) pairs by coincident physical coordinates, the slow way."""
    ref = hier[level]
    pts = local_coordinates(coarse, ref)
    buckets = {}
    for K in range(coarse.n_elements):
        for i in range(ref.n_nodes):
            key = tuple(np.round(pts[K, i]).astype(int))
            buckets.setdefault(key, []).append(K * ref.n_nodes + i)
    return sorted(sorted(g) for g in buckets.values() if len(g) > 1)


@pytest.mark.parametrize("d, box, n_el, n_nodes", [
    (2, ((0, 0), (1, 1)), 2, 4),
    (3, ((0, 0, 0), (1, 1, 1)), 6, 8),
    (2, ((-1, -1), (1, 1)), 8, 9),
])
def test_coarse_counts(d, box, n_el, n_nodes):
    m = build_coarse_cube_mesh(d, *box)
    assert m.n_elements == n_el
    assert len(m.nodes) == n_nodes
    assert m.volume() == pytest.approx(np.prod(np.subtract(box[1], box[0])), abs=1e-12)


@pytest.mark.parametrize("d", [2, 3])
def test_affine_maps_and_cells(d):
    m = build_coarse_cube_mesh(d, (-2,) * d, (1, 2, 3)[:d])
    verts = m.nodes[m.elements]
    np.testing.assert_array_equal(m.v, verts[:, 0])
    np.testing.assert_array_equal(np.transpose(m.B, (0, 2, 1)), verts[:, 1:] - verts[:, :1])
    assert np.all(m.abs_det > 0)
    # closure of every element inside its cell
    assert np.all(verts >= m.cells[:, None, :]) and np.all(verts <= m.cells[:, None, :] + 1)
    assert m.types_per_cell == (2 if d == 2 else 6)


def test_coarse_rejects_bad_input():
    with pytest.raises(MeshError):
        build_coarse_cube_mesh(4, (0,) * 4, (1,) * 4)
    with pytest.raises(MeshError):
        build_coarse_cube_mesh(2, (0, 0), (0, 3))


def test_reference_counts():
    for d, top in ((2, 6), (3, 4)):
        hier = build_reference_hierarchy(d, top)
        for k in range(top + 1):
            s = 2**k
            expect = (s + 1) * (s + 2) // 2 if d == 2 else (s + 1) * (s + 2) * (s + 3) // 6
            assert hier[k].n_nodes == expect
            assert len(hier[k].elements) == (4 if d == 2 else 8) ** k


@pytest.mark.parametrize("d", [2, 3])
def test_reference_nesting_and_midpoints(d):
    hier = build_reference_hierarchy(d, 3)
    assert hier[0].n_nodes == d + 1
    for k in range(1, 4):
        prev, cur = hier[k - 1], hier[k]
        assert cur.n_prev == prev.n_nodes
        np.testing.assert_allclose(cur.coords[: cur.n_prev], prev.coords)
        mid = 0.5 * (prev.coords[cur.parents[:, 0]] + prev.coords[cur.parents[:, 1]])
        np.testing.assert_allclose(cur.coords[cur.n_prev:], mid)
        # fine simplices tile the reference simplex
        P = cur.coords[cur.elements]
        vol = np.abs(np.linalg.det(P[:, 1:] - P[:, :1])).sum() / (2 if d == 2 else 6)
        assert vol == pytest.approx(1.0 / (2 if d == 2 else 6), abs=1e-14)


def test_single_element_has_no_interfaces():
    hier = build_reference_hierarchy(2, 2)
    m = CoarsePartition.from_simplices(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]),
                                       (0, 0), (1, 1))
    idx = build_interface_index(m, hier, 2)
    assert idx.n_groups == 0


def test_two_triangles_level1():
    hier = build_reference_hierarchy(2, 1)
    m = build_coarse_cube_mesh(2, (0, 0), (1, 1))
    idx = build_interface_index(m, hier, 1)
    assert idx.n_groups == 3
    assert list(idx.sizes) == [2, 2, 2]
    assert sorted(idx.kind.tolist()) == [VERTEX, VERTEX, EDGE]


def test_center_group_size_2x2():
    # six triangles meet at the centre of a 2x2 box under the main-diagonal split
    hier = build_reference_hierarchy(2, 0)
    m = build_coarse_cube_mesh(2, (-1, -1), (1, 1))
    idx = build_interface_index(m, hier, 0)
    pts = local_coordinates(m, hier[0]).reshape(-1, 2)
    centre = [g for g in idx.groups() if np.all(pts[g[0]] == 0)]
    assert len(centre) == 1 and len(centre[0]) == 6
    assert len(brute_force_groups(m, hier, 0)) == idx.n_groups


@pytest.mark.parametrize("d, level", [(2, 0), (2, 2), (3, 0), (3, 2)])
def test_interface_matches_brute_force(d, level):
    hier = build_reference_hierarchy(d, level)
    m = build_coarse_cube_mesh(d, (-1,) * d, (1,) + (2,) * (d - 1))
    idx = build_interface_index(m, hier, level)
    got = sorted(sorted(g.tolist()) for g in idx.groups())
    assert got == brute_force_groups(m, hier, level)
    assert np.all(idx.owners == [g.min() for g in idx.groups()])
    kinds = {VERTEX, EDGE} | ({FACE} if d == 3 else set())
    assert set(idx.kind.tolist()) <= kinds


def test_interior_nodes_not_in_groups():
    hier = build_reference_hierarchy(2, 3)
    m = build_coarse_cube_mesh(2, (0, 0), (2, 2))
    idx = build_interface_index(m, hier, 3)
    interior = np.setdiff1d(np.arange(hier[3].n_nodes), hier[3].boundary_nodes)
    flat = (np.arange(m.n_elements)[:, None] * hier[3].n_nodes + interior).ravel()
    assert not np.isin(flat, idx.members).any()
    assert len(np.unique(idx.members)) == len(idx.members)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([2, 3]))
def test_make_consistent_is_projection(seed, d):
    from homogenize import _kernels as kern

    hier = build_reference_hierarchy(d, 1)
    m = build_coarse_cube_mesh(d, (0,) * d, (2,) * d)
    idx = build_interface_index(m, hier, 1)
    x = np.random.default_rng(seed).standard_normal(m.n_elements * hier[1].n_nodes)

    def project(v):
        # average of copies: sum, broadcast, divide by multiplicity
        v = v.copy()
        kern.interface_sum(v, idx.ptr, idx.members)
        v[idx.members] /= np.repeat(idx.sizes, idx.sizes)
        return v

    once = project(x)
    np.testing.assert_allclose(project(once), once, rtol=0, atol=1e-13)


@pytest.mark.parametrize("d", [2, 3])
def test_conformity_global_numbering(d):
    # every fine node position appears once in the global numbering, and the
    # global count matches the structured lattice count
    level = 2
    hier = build_reference_hierarchy(d, level)
    m = build_coarse_cube_mesh(d, (0,) * d, (2,) * d)
    sigma, xyz = global_numbering(m, hier, level)
    assert len(xyz) == (2 * 2**level + 1) ** d
    assert sigma.max() + 1 == len(xyz)


def test_export(tmp_path):
    hier = build_reference_hierarchy(2, 1)
    m = build_coarse_cube_mesh(2, (0, 0), (1, 1))
    path = tmp_path / "mesh.txt"
    export_level_mesh(m, hier, 1, path)
    text = path.read_text().split("\n\n")
    nodes = [l for l in text[0].splitlines() if l.strip()]
    elems = [l for l in text[1].splitlines() if l.strip()]
    assert len(nodes) == 9 and len(elems) == 8
    ids = np.array([[int(t) for t in l.split()] for l in elems])
    assert ids.min() == 0 and ids.max() == 8


def test_kuhn_split_shares_diagonal():
    m = build_coarse_cube_mesh(3, (0, 0, 0), (1, 1, 1))
    for el in m.elements:
        pts = {tuple(p) for p in m.nodes[el]}
        assert (0, 0, 0) in pts and (1, 1, 1) in pts
    perms = {tuple(map(tuple, m.nodes[el])) for el in m.elements}
    assert len(perms) == len(list(itertools.permutations(range(3))))
