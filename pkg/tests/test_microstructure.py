import numpy as np
import pytest

from neuraldd.grid import GridSpec, unit_square
from neuraldd.microstructure import (
    CoefficientField,
    MicrostructureRecipe,
    PackingError,
    generate,
    generate_fiber,
    generate_graded,
    generate_hexagonal,
    generate_voronoi,
    load_coefficient_field,
    make_rng,
    restrict,
    save_coefficient_field,
)


class Window:
    def __init__(self, ix0, iy0, nx, ny):
        self.ix0, self.iy0, self.nx, self.ny = ix0, iy0, nx, ny


class TestVoronoi:
    def test_single_cell_constant(self):
        rec = MicrostructureRecipe("voronoi", cell_count=1, value_range=(3.0, 3.0), seed=1)
        fld = generate_voronoi(rec, unit_square(33))
        assert np.all(fld.values == 3.0)
        assert np.all(fld.cell_ids == 0)

    def test_fifty_distinct_cells(self):
        rec = MicrostructureRecipe("voronoi", cell_count=50, value_range=(0.0, 10.0), seed=42)
        fld = generate_voronoi(rec, unit_square(129))
        assert len(np.unique(fld.cell_ids)) == 50

    def test_two_forced_centers(self):
        # centers at (0.25, 0.5) and (0.75, 0.5): split along x = 0.5,
        # the node at (0.4, 0.5) belongs to the first cell
        rec = MicrostructureRecipe("voronoi", cell_count=2, seed=0)
        spec = unit_square(11)
        fld = generate_voronoi(rec, spec, centers=np.array([[0.25, 0.5], [0.75, 0.5]]))
        assert fld.cell_ids[5, 4] == 0  # node (x=0.4, y=0.5)
        assert fld.cell_ids[5, 8] == 1  # node (x=0.8, y=0.5)

    def test_determinism(self):
        rec = MicrostructureRecipe("voronoi", cell_count=20, seed=7)
        f1 = generate_voronoi(rec, unit_square(65))
        f2 = generate_voronoi(rec, unit_square(65))
        assert np.array_equal(f1.values, f2.values)
        assert np.array_equal(f1.cell_ids, f2.cell_ids)

    def test_nearest_center_oracle(self):
        # brute-force distance loop over a random node sample
        rec = MicrostructureRecipe("voronoi", cell_count=40, seed=3)
        spec = unit_square(129)
        rng = make_rng(99)
        centers_rng = make_rng(rec.seed)
        u = centers_rng.random((40, 2))
        fld = generate_voronoi(rec, spec)
        xs, ys = spec.xs(), spec.ys()
        for _ in range(10_000):
            i = int(rng.integers(0, spec.nx))
            j = int(rng.integers(0, spec.ny))
            d2 = (u[:, 0] - xs[i]) ** 2 + (u[:, 1] - ys[j]) ** 2
            assert fld.cell_ids[j, i] == int(np.argmin(d2))

    def test_ellipticity_battery(self):
        for seed in range(10):
            rec = MicrostructureRecipe("voronoi", cell_count=50, value_range=(0.0, 10.0), seed=seed)
            fld = generate_voronoi(rec, unit_square(65))
            assert fld.values.min() > 0.0

    def test_zero_cells_rejected(self):
        with pytest.raises(ValueError):
            MicrostructureRecipe("voronoi", cell_count=0)


class TestGraded:
    def test_exponent_one_matches_voronoi(self):
        spec = unit_square(65)
        plain = generate_voronoi(MicrostructureRecipe("voronoi", cell_count=30, seed=5), spec)
        graded = generate_graded(
            MicrostructureRecipe("graded_voronoi", cell_count=30, seed=5, grading=(1.0, 1.0)), spec
        )
        assert np.array_equal(plain.values, graded.values)
        assert np.array_equal(plain.cell_ids, graded.cell_ids)

    def test_bottom_left_bias_monte_carlo(self):
        # with exponent 2 per axis, P(center in [0, 1/2]^2) = (3/4)^2 = 9/16
        hits = 0
        total = 0
        for seed in range(1000):
            rng = make_rng(seed)
            u = rng.random((200, 2))
            v = 1.0 - np.sqrt(1.0 - u)
            hits += int(np.sum((v[:, 0] < 0.5) & (v[:, 1] < 0.5)))
            total += 200
        p = 9.0 / 16.0
        sigma = np.sqrt(p * (1 - p) / total)
        assert abs(hits / total - p) < 3.0 * sigma

        # the generator itself shows the bias: the bottom-left quadrant
        # carries far more distinct cells than the top-right one
        rec = MicrostructureRecipe("graded_voronoi", cell_count=200, seed=11, grading=(2.0, 2.0))
        fld = generate_graded(rec, unit_square(65))
        ids_bl = np.unique(fld.cell_ids[:33, :33])
        ids_tr = np.unique(fld.cell_ids[33:, 33:])
        assert len(ids_bl) > 1.5 * len(ids_tr)

    def test_x_graded_cell_area_ratio(self):
        # grading only in x: mean cell area grows left to right by > 10x
        rec = MicrostructureRecipe("graded_voronoi", cell_count=200, seed=13, grading=(3.0, 1.0))
        fld = generate_graded(rec, unit_square(129))
        q = 129 // 4
        left, right = fld.cell_ids[:, :q], fld.cell_ids[:, -q:]
        area_left = left.size / len(np.unique(left))
        area_right = right.size / len(np.unique(right))
        assert area_right / area_left > 10.0


class TestHexagonal:
    def test_single_cell(self):
        rec = MicrostructureRecipe("hexagonal", cell_count=1, value_range=(2.0, 2.0), seed=0)
        fld = generate_hexagonal(rec, unit_square(33))
        assert np.all(fld.values == 2.0)
        assert len(np.unique(fld.cell_ids)) == 1

    def test_interior_cells_have_six_neighbors(self):
        rec = MicrostructureRecipe("hexagonal", cell_count=50, seed=2)
        fld = generate_hexagonal(rec, unit_square(129))
        ids = fld.cell_ids
        # adjacency via horizontal/vertical transitions of the id raster
        pairs = set()
        h = ids[:, :-1] != ids[:, 1:]
        for j, i in zip(*np.nonzero(h)):
            pairs.add((ids[j, i], ids[j, i + 1]))
            pairs.add((ids[j, i + 1], ids[j, i]))
        v = ids[:-1, :] != ids[1:, :]
        for j, i in zip(*np.nonzero(v)):
            pairs.add((ids[j, i], ids[j + 1, i]))
            pairs.add((ids[j + 1, i], ids[j, i]))
        border_ids = set(np.unique(np.concatenate([ids[0], ids[-1], ids[:, 0], ids[:, -1]])))
        interior = [c for c in np.unique(ids) if c not in border_ids]
        assert len(interior) >= 10
        for c in interior:
            neighbors = {b for (x, b) in pairs if x == c}
            assert len(neighbors) == 6

    def test_value_range(self):
        rec = MicrostructureRecipe("hexagonal", cell_count=50, value_range=(0.0, 10.0), seed=4)
        fld = generate_hexagonal(rec, unit_square(65))
        assert fld.values.min() >= 0.0 and fld.values.max() <= 10.0


class TestFiber:
    def test_zero_fibers_pure_matrix(self):
        rec = MicrostructureRecipe("fiber", cell_count=0, matrix_value=1.5, seed=1)
        fld = generate_fiber(rec, unit_square(33))
        assert np.all(fld.values == 1.5)
        assert np.all(fld.cell_ids == 0)

    def test_point_in_disk(self):
        rec = MicrostructureRecipe(
            "fiber", cell_count=1, fiber_radius=0.2, fiber_value=10.0, matrix_value=1.0, seed=0
        )
        spec = unit_square(21)
        fld = generate_fiber(rec, spec, centers=np.array([[0.5, 0.5]]))
        assert fld.values[12, 10] == 10.0   # (0.5, 0.60) inside the disk
        assert fld.values[15, 10] == 1.0    # (0.5, 0.75) outside
        assert fld.cell_ids[12, 10] == 1 and fld.cell_ids[15, 10] == 0

    def test_non_overlap(self):
        rec = MicrostructureRecipe("fiber", cell_count=20, fiber_radius=0.05, seed=8)
        fld = generate_fiber(rec, unit_square(129))
        # recover centers from the raster: mean node position per fiber id
        X, Y = fld.spec.meshgrid()
        centers = []
        for i in range(1, 21):
            m = fld.cell_ids == i
            assert m.any()
            centers.append((X[m].mean(), Y[m].mean()))
        centers = np.asarray(centers)
        d = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
        d[np.diag_indices(20)] = np.inf
        assert d.min() >= 0.1 - 0.02  # raster centroid error stays well below h

    def test_packing_failure(self):
        rec = MicrostructureRecipe("fiber", cell_count=500, fiber_radius=0.05, seed=3)
        with pytest.raises(PackingError, match="packing failure"):
            generate_fiber(rec, unit_square(33))


class TestRestrict:
    def test_full_window_identity(self):
        rec = MicrostructureRecipe("voronoi", cell_count=10, seed=1)
        fld = generate_voronoi(rec, unit_square(33))
        sub = restrict(fld, Window(0, 0, 33, 33))
        assert np.array_equal(sub.values, fld.values)
        assert sub.spec == fld.spec

    def test_top_left_window_indexwise(self):
        rec = MicrostructureRecipe("voronoi", cell_count=25, seed=9)
        fld = generate_voronoi(rec, unit_square(65))
        sub = restrict(fld, Window(0, 32, 33, 33))
        for j in range(33):
            for i in range(33):
                assert sub.values[j, i] == fld.values[32 + j, i]
        assert sub.spec.nx == 33 and sub.spec.y0 == pytest.approx(0.5)

    def test_out_of_bounds(self):
        rec = MicrostructureRecipe("voronoi", cell_count=4, seed=1)
        fld = generate_voronoi(rec, unit_square(17))
        with pytest.raises(ValueError):
            restrict(fld, Window(8, 8, 17, 17))


class TestDispatchAndIO:
    def test_dispatch(self):
        spec = unit_square(17)
        for kind in ("voronoi", "graded_voronoi", "hexagonal", "fiber"):
            fld = generate(MicrostructureRecipe(kind, cell_count=5, seed=2), spec)
            assert isinstance(fld, CoefficientField)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown"):
            generate(MicrostructureRecipe("perlin", cell_count=5), unit_square(9))

    def test_cfn_round_trip(self, tmp_path):
        rec = MicrostructureRecipe("voronoi", cell_count=12, seed=6)
        fld = generate_voronoi(rec, unit_square(33))
        p = tmp_path / "a.cfn"
        save_coefficient_field(fld, p)
        back = load_coefficient_field(p)
        assert np.array_equal(back.values, fld.values)
        assert np.array_equal(back.cell_ids, fld.cell_ids)
        raw = p.read_bytes()
        assert raw[:4] == b"CFN1"
