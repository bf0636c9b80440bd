import numpy as np
import pytest

from neuraldd.boundary import BoundaryTrace, boundary_node_indices, trace_from_field, trace_from_params, draw_boundary_params
from neuraldd.fd_solver import (
    SolverError,
    ValidationError,
    assemble,
    build_rhs,
    dirichlet_mask,
    gradient,
    pcg,
    scatter_trace,
    solve_assembled,
    solve_dirichlet,
    solve_manufactured,
)
from neuraldd.grid import GridFunction, GridSpec, l2_norm, unit_square
from neuraldd.microstructure import CoefficientField, MicrostructureRecipe, generate_voronoi, make_rng


def unit_coefficient(spec, value=1.0):
    return CoefficientField(spec, np.full((spec.ny, spec.nx), value), np.zeros((spec.ny, spec.nx), dtype=np.int64))


def voronoi(spec, seed, cells=50):
    return generate_voronoi(MicrostructureRecipe("voronoi", cell_count=cells, seed=seed), spec)


class TestSolve:
    def test_linear_solution_exact(self):
        spec = unit_square(17)
        exact = GridFunction.from_callable(spec, lambda X, Y: X + Y)
        u = solve_dirichlet(unit_coefficient(spec), trace_from_field(exact.values, spec))
        assert np.max(np.abs(u.values - exact.values)) < 1e-10

    def test_coefficient_scaling_drops_out(self):
        spec = unit_square(33)
        g = trace_from_params(draw_boundary_params(make_rng(1)), spec)
        u1 = solve_dirichlet(unit_coefficient(spec, 1.0), g)
        u7 = solve_dirichlet(unit_coefficient(spec, 7.3), g)
        assert np.max(np.abs(u1.values - u7.values)) < 1e-9

    def test_single_interior_node_by_hand(self):
        # one 5-point row: center = mean of its four edge neighbors = 2.5;
        # corners do not couple and are set to a poison value to prove it
        spec = unit_square(3)
        iy, ix = boundary_node_indices(spec)
        vals = np.full(8, 99.0)
        coords = {(1, 2): 1.0, (2, 1): 2.0, (1, 0): 3.0, (0, 1): 4.0}  # (ix, iy) -> g
        for k in range(8):
            key = (int(ix[k]), int(iy[k]))
            if key in coords:
                vals[k] = coords[key]
        u = solve_dirichlet(unit_coefficient(spec), BoundaryTrace(spec, vals))
        assert u.values[1, 1] == pytest.approx(2.5, abs=1e-12)

    def test_residual_postcondition(self):
        spec = unit_square(33)
        a = voronoi(spec, seed=4)
        g = trace_from_params(draw_boundary_params(make_rng(2)), spec)
        u = solve_dirichlet(a, g)
        asm = assemble(a)
        b = build_rhs(asm, scatter_trace(g))
        r = b - asm.matrix @ u.values.ravel()[asm.unknown_flat]
        assert np.max(np.abs(r)) <= 1e-10 * np.max(np.abs(b))

    def test_discrete_maximum_principle(self):
        spec = unit_square(33)
        for seed in range(5):
            a = voronoi(spec, seed=seed)
            g = trace_from_params(draw_boundary_params(make_rng(100 + seed)), spec)
            u = solve_dirichlet(a, g)
            assert u.values.min() >= g.values.min() - 1e-10
            assert u.values.max() <= g.values.max() + 1e-10

    def test_mirror_symmetry(self):
        # coefficient and data symmetric about x = 1/2 give a symmetric field
        spec = unit_square(33)
        X, Y = spec.meshgrid()
        a = CoefficientField(spec, 1.0 + 4.0 * (X - 0.5) ** 2 + Y, np.zeros((33, 33), dtype=np.int64))
        gfield = np.cos(2 * np.pi * X) * (1.0 + Y)
        u = solve_dirichlet(a, trace_from_field(gfield, spec))
        assert np.max(np.abs(u.values - u.values[:, ::-1])) < 1e-9

    def test_linearity_in_g(self):
        spec = unit_square(33)
        a = voronoi(spec, seed=6)
        nb = 2 * 32 * 2
        rng = make_rng(3)
        g1 = BoundaryTrace(spec, rng.standard_normal(nb))
        g2 = BoundaryTrace(spec, rng.standard_normal(nb))
        al, be = 0.3, -1.2
        lhs = solve_dirichlet(a, BoundaryTrace(spec, al * g1.values + be * g2.values)).values
        rhs = al * solve_dirichlet(a, g1).values + be * solve_dirichlet(a, g2).values
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_spec_mismatch(self):
        a = unit_coefficient(unit_square(9))
        g = trace_from_params(draw_boundary_params(make_rng(0)), unit_square(17))
        with pytest.raises(ValueError):
            solve_dirichlet(a, g)


class TestSystemInvariants:
    def test_symmetry_and_dominance(self):
        spec = unit_square(17)
        asm = assemble(voronoi(spec, seed=5, cells=20))
        A = asm.matrix
        assert abs(A - A.T).max() < 1e-12
        # weak diagonal dominance everywhere (relative tolerance: entries are
        # O(1/h^2)), strict for rows coupling to the boundary
        D = np.asarray(A.todense())
        dia = np.diag(D)
        off = np.abs(D).sum(axis=1) - np.abs(dia)
        assert np.all(dia - off >= -1e-12 * np.abs(dia))
        assert np.any(dia > off + 1e-6 * np.abs(dia))

    def test_pcg_budget_error(self):
        spec = unit_square(17)
        asm = assemble(unit_coefficient(spec))
        b = np.ones(asm.matrix.shape[0])
        with pytest.raises(SolverError):
            pcg(asm.matrix, b, asm.diag, target_inf=1e-14, maxiter=2)

    def test_masked_assembly_dirichlet_ring(self):
        # an interior hole exposes its rim as Dirichlet nodes
        spec = unit_square(9)
        material = np.ones((9, 9), dtype=bool)
        material[4, 4] = False
        bm = dirichlet_mask(spec, material)
        assert bm[4, 3] and bm[4, 5] and bm[3, 4] and bm[5, 4]
        assert not bm[2, 2]
        assert bm[0, 0] and bm[8, 8]

    def test_masked_solve_maximum_principle(self):
        spec = unit_square(17)
        material = np.ones((17, 17), dtype=bool)
        material[10:, 10:] = False  # L-shaped domain
        a = voronoi(spec, seed=9, cells=10)
        asm = assemble(a, mask=material)
        rng = make_rng(4)
        bvals = np.zeros((17, 17))
        bvals[asm.boundary_mask] = rng.uniform(0.0, 1.0, int(asm.boundary_mask.sum()))
        u = solve_assembled(asm, bvals)
        inside = material & ~asm.boundary_mask
        assert u[inside].min() >= 0.0 - 1e-10 and u[inside].max() <= 1.0 + 1e-10
        assert np.all(u[~material] == 0.0)


class TestGradient:
    def test_linear_field(self):
        spec = unit_square(17)
        g = gradient(GridFunction.from_callable(spec, lambda X, Y: X))
        assert np.max(np.abs(g.data[:, :, 0] - 1.0)) < 1e-12
        assert np.max(np.abs(g.data[:, :, 1])) < 1e-12

    def test_quadratic_exact(self):
        # central and one-sided second-order stencils are exact for x^2
        spec = unit_square(17)
        g = gradient(GridFunction.from_callable(spec, lambda X, Y: X**2))
        X, _ = spec.meshgrid()
        assert np.max(np.abs(g.data[:, :, 0] - 2.0 * X)) < 1e-12
        assert abs(g.data[8, 8, 0] - 1.0) < 1e-12  # at x = 0.5

    def test_constant_field(self):
        g = gradient(GridFunction(unit_square(9), np.full((9, 9), 3.3)))
        assert np.max(np.abs(g.data)) < 1e-12


class TestManufactured:
    def test_sine_order_two(self):
        rep = solve_manufactured("sine")
        assert all(o >= 1.9 for o in rep.orders)

    def test_variable_coefficient_order_two(self):
        rep = solve_manufactured("variable")
        assert all(o >= 1.9 for o in rep.orders)

    def test_linear_case_exact(self):
        # linear fields are in the stencil's null space of truncation error;
        # what remains is the conjugate-gradient noise floor
        rep = solve_manufactured("linear")
        assert all(e < 1e-10 for e in rep.errors)

    def test_validation_error_path(self):
        with pytest.raises(KeyError):
            solve_manufactured("no-such-case")
