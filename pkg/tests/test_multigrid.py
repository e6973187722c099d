import numpy as np
import pytest
from oracles import (
    assemble_global,
    barycentric_eval,
    boundary_nodes,
    direct_solve,
    energy_rel_error,
    interpolation_global,
    to_global,
)

from homogenize.coeffield import FieldDistribution, constant_field, element_coefficients, sample_field
from homogenize.fem import FieldVector, HHGSpace, InconsistentVectorError, assemble_load, dot, mass_apply, reference_operators
from homogenize.mesh import build_coarse_cube_mesh, build_reference_hierarchy, global_numbering
from homogenize.multigrid import (
    MgHierarchy,
    SolverConfig,
    interpolate,
    interpolation_matrix,
    restrict,
    restrict_residual,
    solve,
    vcycle,
)


def make_space(d, lo, hi, n_ref):
    return HHGSpace(build_coarse_cube_mesh(d, lo, hi), build_reference_hierarchy(d, n_ref))


def checkerboard(space, seed, alpha=1.0, beta=9.0):
    c = space.coarse
    return element_coefficients(sample_field(FieldDistribution(c.dimension, alpha, beta), c.box_lo, c.box_hi, seed), c)


def random_consistent(space, level, rng, masked=True):
    sigma, xyz = global_numbering(space.coarse, space.hier, level)
    g = rng.standard_normal(len(xyz))
    if masked:
        g[boundary_nodes(space.coarse, xyz)] = 0.0
    return FieldVector(level, g[sigma], True)


def residual_norm(hier, b, X):
    r = hier.residual(b, X)
    return np.sqrt(dot(r, r, hier.level(b.level).interfaces))


@pytest.mark.parametrize("d, level", [(2, 1), (2, 4), (3, 1), (3, 3)])
def test_interpolation_matrix_structure(d, level):
    hier = build_reference_hierarchy(d, level)
    ref = hier[level]
    I = interpolation_matrix(ref).toarray()
    np.testing.assert_array_equal(I[: ref.n_prev], np.eye(ref.n_prev))
    new = I[ref.n_prev:]
    assert np.all((new == 0) | (new == 0.5))
    assert np.all((new == 0.5).sum(axis=1) == 2)


@pytest.mark.parametrize("d, top", [(2, 4), (3, 3)])
def test_galerkin_identity(d, top):
    hier = build_reference_hierarchy(d, top)
    for k in range(1, top + 1):
        I = interpolation_matrix(hier[k])
        fine, coarse = reference_operators(hier, k), reference_operators(hier, k - 1)
        for p in range(d):
            for q in range(d):
                diff = (I.T @ fine.A(p, q) @ I - coarse.A(p, q)).toarray()
                assert np.abs(diff).max() <= 1e-14
        assert np.abs((I.T @ fine.M @ I - coarse.M).toarray()).max() <= 1e-14


@pytest.mark.parametrize("d", [2, 3])
def test_interpolate_constant_and_affine(d):
    space = make_space(d, (-1,) * d, (1,) * d, 3)
    ec = checkerboard(space, 0)
    hier = MgHierarchy(space, ec, 1.0)
    g = np.array([0.3, -1.2, 0.7][:d])
    for fn in (lambda x: np.ones(x.shape[:-1]), lambda x: x @ g + 0.25):
        Y = interpolate(space.nodal_values(fn, 1), hier)
        expect = space.nodal_values(fn, 2).data
        space.level(2).mask.apply(expect)
        np.testing.assert_allclose(Y.data, expect, atol=1e-14)


def test_interpolate_preserves_function():
    space = make_space(2, (0, 0), (2, 2), 3)
    hier = MgHierarchy(space, checkerboard(space, 1), 1.0)
    rng = np.random.default_rng(3)
    X = random_consistent(space, 2, rng)
    Y = interpolate(X, hier)
    pts = rng.uniform(0, 2, size=(20, 2))
    a = barycentric_eval(space.coarse, space.hier, 2, X.data, pts)
    b = barycentric_eval(space.coarse, space.hier, 3, Y.data, pts)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_interpolate_beyond_top():
    space = make_space(2, (0, 0), (2, 2), 2)
    hier = MgHierarchy(space, checkerboard(space, 1), 1.0, top=1)
    with pytest.raises(ValueError):
        interpolate(space.level(1).zeros(), hier)


@pytest.mark.parametrize("d", [2, 3])
def test_restrict_is_adjoint(d):
    space = make_space(d, (-1,) * d, (1,) + (2,) * (d - 1), 2)
    hier = MgHierarchy(space, checkerboard(space, 2), 0.0)
    rng = np.random.default_rng(d)
    for k in (1, 2):
        Y = random_consistent(space, k - 1, rng)
        Z = random_consistent(space, k, rng)
        lhs = dot(interpolate(Y, hier), Z, space.level(k).interfaces)
        rhs = dot(Y, restrict(Z, hier), space.level(k - 1).interfaces)
        assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("d, kappa", [(2, 1.0), (2, 0.25), (3, 0.5)])
def test_restrict_residual_matches_global(d, kappa):
    level = 2
    space = make_space(d, (0,) * d, (2,) * d, level)
    ec = checkerboard(space, 5)
    hier = MgHierarchy(space, ec, kappa)
    rng = np.random.default_rng(11)
    X = random_consistent(space, level, rng)
    b = random_consistent(space, level, rng)
    got = restrict_residual(b, X, hier)

    A, _, sigma, xyz = assemble_global(space.coarse, space.hier, level, ec.a_diag, kappa)
    N = len(xyz)
    r = to_global(b.data, sigma, N) - A @ to_global(X.data, sigma, N)
    r[boundary_nodes(space.coarse, xyz)] = 0.0
    rc = interpolation_global(space, level).T @ r
    sc, xc = global_numbering(space.coarse, space.hier, level - 1)
    rc[boundary_nodes(space.coarse, xc)] = 0.0
    np.testing.assert_allclose(got.data, rc[sc], rtol=0, atol=1e-12 * np.abs(rc).max())


def test_restrict_residual_of_solution_vanishes():
    space = make_space(2, (-2, -2), (2, 2), 3)
    ec = checkerboard(space, 8)
    hier = MgHierarchy(space, ec, 1.0)
    ld = space.level(3)
    b = assemble_load(ec, np.array([1.0, 0.0]), ld.ops, ld.interfaces, ld.mask)
    res = solve(b, hier, SolverConfig(tol=1e-12))
    assert res.converged
    r = restrict_residual(b, res.x, hier)
    bc = restrict(b, hier)
    assert np.abs(r.data).max() <= 1e-10 * np.abs(bc.data).max()


def test_restrict_rejects_inconsistent():
    space = make_space(2, (0, 0), (2, 2), 2)
    hier = MgHierarchy(space, checkerboard(space, 1), 1.0)
    with pytest.raises(InconsistentVectorError):
        restrict(FieldVector(2, space.level(2).zeros().data, False), hier)


def test_vcycle_zero():
    space = make_space(2, (0, 0), (3, 3), 2)
    hier = MgHierarchy(space, checkerboard(space, 4), 1.0)
    z = space.level(2).zeros()
    out = vcycle(z, z, hier, SolverConfig())
    assert np.all(out.data == 0)


@pytest.mark.parametrize("seed", range(20))
def test_vcycle_decreases_residual(seed):
    rng = np.random.default_rng(seed)
    d = 2 if seed % 4 else 3
    level = 2
    space = make_space(d, (0,) * d, (2 + seed % 3,) + (2,) * (d - 1), level)
    hier = MgHierarchy(space, checkerboard(space, seed, 1.0, float(rng.integers(1, 10))), float(rng.choice([0.1, 1.0])))
    b = random_consistent(space, level, rng)
    X = space.level(level).zeros()
    prev = residual_norm(hier, b, X)
    for _ in range(3):
        X = vcycle(b, X, hier, SolverConfig(smoother_steps=2))
        cur = residual_norm(hier, b, X)
        assert cur < prev
        prev = cur


def test_ten_cycles_match_direct_solve():
    level = 3
    space = make_space(2, (-2, -2), (2, 2), level)
    ec = checkerboard(space, 17)
    hier = MgHierarchy(space, ec, 1.0)
    ld = space.level(level)
    b = assemble_load(ec, np.array([1.0, 0.0]), ld.ops, ld.interfaces, ld.mask)
    res = solve(b, hier, SolverConfig(max_cycles=10))
    assert res.converged and res.iterations <= 10 and res.residual <= 1e-8
    x_ref, A, sigma = direct_solve(space, level, ec, 1.0, b.data)
    assert energy_rel_error(A, to_global(res.x.data, sigma, len(x_ref)), x_ref) <= 1e-7


def test_mass_weighted_constant_gives_one():
    level = 1
    space = make_space(2, (-10, -10), (10, 10), level)
    c = space.coarse
    ec = element_coefficients(constant_field(c.box_lo, c.box_hi, lambda z: np.ones(z.shape)), c)
    ld = space.level(level)
    ones = FieldVector(level, np.ones((ld.n_elements, ld.n_local)), True)
    b = mass_apply(ec.abs_det, ld, ones)
    res = solve(b, MgHierarchy(space, ec, 1.0))
    assert res.converged
    x_ref, _, sigma = direct_solve(space, level, ec, 1.0, b.data)
    np.testing.assert_allclose(to_global(res.x.data, sigma, len(x_ref)), x_ref, atol=1e-6)
    _, xyz = global_numbering(c, space.hier, level)
    far = np.all(np.abs(xyz) <= 5, axis=1)
    assert np.abs(x_ref[far] - 1).max() <= 0.1


def test_zero_rhs_zero_iterations():
    space = make_space(2, (0, 0), (2, 2), 2)
    res = solve(space.level(2).zeros(), MgHierarchy(space, checkerboard(space, 0), 1.0))
    assert res.iterations == 0 and res.converged and np.all(res.x.data == 0)


@pytest.mark.parametrize("d, n_ref, kappa", [(2, 3, 1.0), (2, 3, 2.0**-4), (2, 4, 2.0**-2), (3, 2, 0.25)])
def test_contraction_at_least_two(d, n_ref, kappa):
    space = make_space(d, (-3,) * d, (3,) * d, n_ref)
    ec = checkerboard(space, 21)
    hier = MgHierarchy(space, ec, kappa)
    ld = space.level(n_ref)
    b = assemble_load(ec, np.eye(d)[0], ld.ops, ld.interfaces, ld.mask)
    X = ld.zeros()
    prev = residual_norm(hier, b, X)
    for _ in range(6):
        X = vcycle(b, X, hier, SolverConfig())
        cur = residual_norm(hier, b, X)
        assert cur <= 0.5 * prev
        prev = cur


def test_pcg_outer_agrees():
    level = 3
    space = make_space(2, (-3, -3), (3, 3), level)
    ec = checkerboard(space, 6)
    hier = MgHierarchy(space, ec, 0.5)
    ld = space.level(level)
    b = assemble_load(ec, np.array([0.0, 1.0]), ld.ops, ld.interfaces, ld.mask)
    a = solve(b, hier, SolverConfig())
    p = solve(b, hier, SolverConfig(outer="pcg"))
    assert a.converged and p.converged
    assert p.iterations <= a.iterations
    x_ref, A, sigma = direct_solve(space, level, ec, 0.5, b.data)
    for res in (a, p):
        assert energy_rel_error(A, to_global(res.x.data, sigma, len(x_ref)), x_ref) <= 1e-7


def test_nonconvergence_is_flagged():
    space = make_space(2, (-2, -2), (2, 2), 3)
    ec = checkerboard(space, 2)
    ld = space.level(3)
    b = assemble_load(ec, np.array([1.0, 0.0]), ld.ops, ld.interfaces, ld.mask)
    res = solve(b, MgHierarchy(space, ec, 1.0), SolverConfig(max_cycles=1, tol=1e-14))
    assert not res.converged and res.residual > 1e-14


def test_coarse_only_hierarchy_is_direct():
    space = make_space(2, (-2, -2), (2, 2), 1)
    ec = checkerboard(space, 9)
    hier = MgHierarchy(space, ec, 1.0, top=0)
    ld = space.level(0)
    b = assemble_load(ec, np.array([1.0, 0.0]), ld.ops, ld.interfaces, ld.mask)
    res = solve(b, hier)
    assert res.iterations == 1 and res.residual == 0.0
    assert residual_norm(hier, b, res.x) <= 1e-13 * np.sqrt(dot(b, b, ld.interfaces))


@pytest.mark.parametrize("kw", [dict(smoother_steps=0), dict(max_cycles=0), dict(tol=0.0), dict(outer="fmg")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)
