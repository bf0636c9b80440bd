"""Piecewise-constant coefficient fields a(x) for -div(a grad u) = 0.

Four generator families: random Voronoi tessellations, graded Voronoi
tessellations (cell centers biased toward the bottom-left corner), hexagonal
lattices, and circular-fiber composites.  Fields are rasterized per node:
every grid node carries the value of its generating cell, which is all the
finite-difference solver and the neural operator ever consume.

Randomness comes from numpy's counter-based Philox generator so that a
(recipe, seed) pair reproduces the same field bit-for-bit on any platform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .grid import GridSpec

CFN_MAGIC = b"CFN1"

# Coefficient values are resampled above this floor to keep the operator
# uniformly elliptic; a raw draw of a ~ 0 would destroy solver conditioning.
VALUE_FLOOR = 1e-3


class PackingError(RuntimeError):
    """Raised when fiber rejection sampling exhausts its attempt budget."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream; the repo-wide PRNG for reproducibility."""
    return np.random.Generator(np.random.Philox(key=seed))


@dataclass(frozen=True)
class MicrostructureRecipe:
    """Declarative description of one coefficient-field draw."""

    kind: str  # voronoi | graded_voronoi | hexagonal | fiber
    cell_count: int = 50
    value_range: tuple[float, float] = (0.0, 10.0)
    seed: int = 0
    # graded_voronoi: per-axis grading exponents; 1.0 keeps the axis uniform
    grading: tuple[float, float] = (2.0, 2.0)
    # fiber: disk radius and phase values
    fiber_radius: float = 0.05
    fiber_value: float = 10.0
    matrix_value: float = 1.0

    def __post_init__(self):
        # fiber composites admit an empty inclusion set; tessellations do not
        floor = 0 if self.kind == "fiber" else 1
        if self.cell_count < floor:
            raise ValueError(f"cell_count must be >= {floor} for kind {self.kind!r}")
        lo, hi = self.value_range
        if not (0.0 <= lo <= hi):
            raise ValueError(f"bad value range [{lo}, {hi}]")


class CoefficientField:
    """Scalar isotropic coefficient sampled on grid nodes.

    ``values`` holds a > 0 per node, ``cell_ids`` the generating cell index.
    """

    __slots__ = ("spec", "values", "cell_ids")

    def __init__(self, spec: GridSpec, values: np.ndarray, cell_ids: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        cell_ids = np.asarray(cell_ids, dtype=np.int64)
        if values.shape != (spec.ny, spec.nx) or cell_ids.shape != values.shape:
            raise ValueError("values/cell_ids shape must match the grid")
        if not np.all(values > 0.0):
            raise ValueError("coefficient must be strictly positive (ellipticity)")
        self.spec = spec
        self.values = values
        self.cell_ids = cell_ids

    def copy(self) -> "CoefficientField":
        return CoefficientField(self.spec, self.values.copy(), self.cell_ids.copy())


def _sample_values(rng: np.random.Generator, n: int, value_range: tuple[float, float]) -> np.ndarray:
    """Uniform draws with resampling below the ellipticity floor."""
    lo, hi = value_range
    vals = rng.uniform(lo, hi, size=n)
    if hi <= VALUE_FLOOR:
        raise ValueError("value range lies entirely below the ellipticity floor")
    while True:
        bad = vals < VALUE_FLOOR
        if not bad.any():
            return vals
        vals[bad] = rng.uniform(lo, hi, size=int(bad.sum()))


def _node_points(spec: GridSpec) -> np.ndarray:
    X, Y = spec.meshgrid()
    return np.column_stack([X.ravel(), Y.ravel()])


def _rasterize(spec: GridSpec, centers: np.ndarray, values: np.ndarray) -> CoefficientField:
    """Nearest-center assignment per node; Euclidean metric."""
    tree = cKDTree(centers)
    _, ids = tree.query(_node_points(spec))
    ids = ids.reshape(spec.ny, spec.nx)
    return CoefficientField(spec, values[ids], ids)


def generate_voronoi(recipe: MicrostructureRecipe, spec: GridSpec,
                     centers: np.ndarray | None = None) -> CoefficientField:
    """Random Voronoi crystal: uniform cell centers, uniform cell values.

    ``centers`` overrides the random draw (used for hand-constructed tests).
    """
    if recipe.kind not in ("voronoi", "graded_voronoi"):
        raise ValueError(f"recipe kind {recipe.kind!r} is not a Voronoi variant")
    rng = make_rng(recipe.seed)
    if centers is None:
        u = rng.random((recipe.cell_count, 2))
        if recipe.kind == "graded_voronoi":
            u = _grade(u, recipe.grading)
        centers = np.column_stack([
            spec.x0 + u[:, 0] * (spec.x1 - spec.x0),
            spec.y0 + u[:, 1] * (spec.y1 - spec.y0),
        ])
    values = _sample_values(rng, len(centers), recipe.value_range)
    return _rasterize(spec, centers, values)


def _grade(u: np.ndarray, grading: tuple[float, float]) -> np.ndarray:
    """Bias unit-square samples toward the origin.

    Per axis with exponent g the transform is u -> 1 - (1 - u)^(1/g), whose
    CDF is 1 - (1 - x)^g: with g = 2 three quarters of the draws land below
    one half.  g = 1 leaves the stream untouched so the graded generator
    degenerates to the plain Voronoi one on the same seed path.
    """
    out = u.copy()
    for axis, g in enumerate(grading):
        if g != 1.0:
            out[:, axis] = 1.0 - (1.0 - u[:, axis]) ** (1.0 / g)
    return out


def generate_graded(recipe: MicrostructureRecipe, spec: GridSpec) -> CoefficientField:
    """Graded Voronoi: center density decays away from the bottom-left."""
    if recipe.kind != "graded_voronoi":
        raise ValueError("recipe kind must be 'graded_voronoi'")
    return generate_voronoi(recipe, spec)


def hexagonal_centers(spec: GridSpec, cell_count: int) -> np.ndarray:
    """Hexagonal close-packed lattice sized for ~cell_count cells inside."""
    if cell_count == 1:
        return np.array([[0.5 * (spec.x0 + spec.x1), 0.5 * (spec.y0 + spec.y1)]])
    area = (spec.x1 - spec.x0) * (spec.y1 - spec.y0)
    pitch = np.sqrt(2.0 * area / (np.sqrt(3.0) * cell_count))
    dy = pitch * np.sqrt(3.0) / 2.0
    centers = []
    row = 0
    y = spec.y0 - dy
    # one ring of extra centers outside the domain keeps edge cells from
    # swallowing the whole boundary band
    while y <= spec.y1 + dy:
        offset = 0.5 * pitch if row % 2 else 0.0
        x = spec.x0 - pitch + offset
        while x <= spec.x1 + pitch:
            centers.append((x, y))
            x += pitch
        y += dy
        row += 1
    return np.asarray(centers)


def generate_hexagonal(recipe: MicrostructureRecipe, spec: GridSpec) -> CoefficientField:
    """Hexagonal crystal approximation: per-cell constant values."""
    if recipe.kind != "hexagonal":
        raise ValueError("recipe kind must be 'hexagonal'")
    rng = make_rng(recipe.seed)
    centers = hexagonal_centers(spec, recipe.cell_count)
    values = _sample_values(rng, len(centers), recipe.value_range)
    return _rasterize(spec, centers, values)


def generate_fiber(recipe: MicrostructureRecipe, spec: GridSpec,
                   centers: np.ndarray | None = None) -> CoefficientField:
    """Matrix with non-overlapping circular inclusions.

    Centers are rejection-sampled with pairwise distance >= 2 r and kept a
    radius away from the boundary.  cell id 0 is the matrix, i the i-th fiber.
    """
    if recipe.kind != "fiber":
        raise ValueError("recipe kind must be 'fiber'")
    if min(recipe.fiber_value, recipe.matrix_value) <= 0.0:
        raise ValueError("phase values must be positive")
    r = recipe.fiber_radius
    if centers is None:
        rng = make_rng(recipe.seed)
        n = recipe.cell_count
        lo_x, hi_x = spec.x0 + r, spec.x1 - r
        lo_y, hi_y = spec.y0 + r, spec.y1 - r
        if n > 0 and (lo_x >= hi_x or lo_y >= hi_y):
            raise PackingError("packing failure: fiber radius exceeds the domain")
        placed: list[tuple[float, float]] = []
        budget = 1000 * max(n, 1)
        while len(placed) < n:
            if budget == 0:
                raise PackingError(f"packing failure: placed {len(placed)} of {n} fibers")
            budget -= 1
            cx = rng.uniform(lo_x, hi_x)
            cy = rng.uniform(lo_y, hi_y)
            if all((cx - px) ** 2 + (cy - py) ** 2 >= (2.0 * r) ** 2 for px, py in placed):
                placed.append((cx, cy))
        centers = np.asarray(placed).reshape(-1, 2)

    values = np.full((spec.ny, spec.nx), recipe.matrix_value)
    ids = np.zeros((spec.ny, spec.nx), dtype=np.int64)
    X, Y = spec.meshgrid()
    for i, (cx, cy) in enumerate(centers, start=1):
        inside = (X - cx) ** 2 + (Y - cy) ** 2 <= r * r
        values[inside] = recipe.fiber_value
        ids[inside] = i
    return CoefficientField(spec, values, ids)


_GENERATORS = {
    "voronoi": generate_voronoi,
    "graded_voronoi": generate_graded,
    "hexagonal": generate_hexagonal,
    "fiber": generate_fiber,
}


def generate(recipe: MicrostructureRecipe, spec: GridSpec) -> CoefficientField:
    """Dispatch on recipe.kind."""
    try:
        gen = _GENERATORS[recipe.kind]
    except KeyError:
        raise ValueError(f"unknown microstructure kind {recipe.kind!r}") from None
    return gen(recipe, spec)


def restrict(fld: CoefficientField, window) -> CoefficientField:
    """Nodal extraction of a grid-aligned window (no resampling).

    ``window`` provides node offsets ``ix0, iy0`` and node counts ``nx, ny``.
    The restricted field keeps the physical sub-rectangle of the source grid.
    """
    ix0, iy0, nx, ny = window.ix0, window.iy0, window.nx, window.ny
    if ix0 < 0 or iy0 < 0 or ix0 + nx > fld.spec.nx or iy0 + ny > fld.spec.ny:
        raise ValueError("window out of bounds")
    s = fld.spec
    sub = GridSpec(
        nx, ny,
        s.x0 + ix0 * s.hx, s.y0 + iy0 * s.hy,
        s.x0 + (ix0 + nx - 1) * s.hx, s.y0 + (iy0 + ny - 1) * s.hy,
    )
    return CoefficientField(
        sub,
        fld.values[iy0:iy0 + ny, ix0:ix0 + nx].copy(),
        fld.cell_ids[iy0:iy0 + ny, ix0:ix0 + nx].copy(),
    )


def save_coefficient_field(fld: CoefficientField, path) -> None:
    """CFN1 container: GFN-style header and f64 values, then u32 cell ids."""
    with open(path, "wb") as fh:
        fh.write(CFN_MAGIC)
        fh.write(struct.pack("<III", fld.spec.nx, fld.spec.ny, 1))
        fh.write(np.ascontiguousarray(fld.values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(fld.cell_ids, dtype="<u4").tobytes())


def load_coefficient_field(path, extents: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)) -> CoefficientField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CFN_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {CFN_MAGIC!r}")
        nx, ny, _ = struct.unpack("<III", fh.read(12))
        values = np.frombuffer(fh.read(8 * nx * ny), dtype="<f8").reshape(ny, nx).copy()
        ids = np.frombuffer(fh.read(4 * nx * ny), dtype="<u4").reshape(ny, nx).astype(np.int64)
    x0, y0, x1, y1 = extents
    return CoefficientField(GridSpec(nx, ny, x0, y0, x1, y1), values, ids)
