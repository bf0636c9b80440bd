"""Uniform rectangular grids and the function fields that live on them.

Fields are stored nodal, row-major with shape ``(ny, nx, channels)``.
Norms use trapezoidal quadrature, consistent with the piecewise-bilinear
interpretation of nodal data, and resampling between grids is linear-spline
(bilinear) interpolation.  Dyadic node counts follow the nesting convention
``n -> (n + 1) // 2`` when halving and ``n -> 2 n - 1`` when doubling, so
grids like 33 -> 17 -> 9 share nodes exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

GFN_MAGIC = b"GFN1"


@dataclass(frozen=True)
class GridSpec:
    """Uniform tensor grid on the rectangle [x0, x1] x [y0, y1].

    ``nx`` and ``ny`` are node counts (not cell counts), both >= 2.
    """

    nx: int
    ny: int
    x0: float = 0.0
    y0: float = 0.0
    x1: float = 1.0
    y1: float = 1.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"node counts must be >= 2, got {self.nx}x{self.ny}")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("degenerate physical extents")

    @property
    def hx(self) -> float:
        return (self.x1 - self.x0) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (self.y1 - self.y0) / (self.ny - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def xs(self) -> np.ndarray:
        return np.linspace(self.x0, self.x1, self.nx)

    def ys(self) -> np.ndarray:
        return np.linspace(self.y0, self.y1, self.ny)

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates as (X, Y) arrays of shape (ny, nx)."""
        return np.meshgrid(self.xs(), self.ys())

    def same_extents(self, other: "GridSpec", tol: float = 1e-12) -> bool:
        return (
            abs(self.x0 - other.x0) <= tol
            and abs(self.y0 - other.y0) <= tol
            and abs(self.x1 - other.x1) <= tol
            and abs(self.y1 - other.y1) <= tol
        )

    def with_nodes(self, nx: int, ny: int) -> "GridSpec":
        return GridSpec(nx, ny, self.x0, self.y0, self.x1, self.y1)


def unit_square(n: int) -> GridSpec:
    """n x n grid on the unit square."""
    return GridSpec(n, n)


class GridFunction:
    """Scalar or vector field sampled on the nodes of a :class:`GridSpec`.

    ``data`` has shape ``(ny, nx, channels)`` and dtype float64.
    """

    __slots__ = ("spec", "data")

    def __init__(self, spec: GridSpec, data: np.ndarray):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.shape[:2] != (spec.ny, spec.nx):
            raise ValueError(f"data shape {data.shape} does not match spec {spec.ny}x{spec.nx}")
        if not np.all(np.isfinite(data)):
            raise ValueError("field contains non-finite values")
        self.spec = spec
        self.data = data

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def values(self) -> np.ndarray:
        """2-D view (ny, nx) of a single-channel field."""
        if self.channels != 1:
            raise ValueError("values view requires a single-channel field")
        return self.data[:, :, 0]

    def copy(self) -> "GridFunction":
        return GridFunction(self.spec, self.data.copy())

    @classmethod
    def zeros(cls, spec: GridSpec, channels: int = 1) -> "GridFunction":
        return cls(spec, np.zeros((spec.ny, spec.nx, channels)))

    @classmethod
    def from_callable(cls, spec: GridSpec, fn) -> "GridFunction":
        """Sample fn(X, Y) on the nodes; fn must broadcast over arrays."""
        X, Y = spec.meshgrid()
        return cls(spec, np.asarray(fn(X, Y), dtype=np.float64))


@dataclass(frozen=True)
class SplineBasis:
    """Resolution index of the nested linear-spline hierarchy.

    Level ``n`` corresponds to ``2**n + 1`` nodes per axis, so consecutive
    levels are related by the halving/doubling node convention.
    """

    level: int

    def __post_init__(self):
        if self.level < 1:
            raise ValueError("level must be >= 1")

    @property
    def node_count(self) -> int:
        return 2**self.level + 1


def halve_nodes(n: int) -> int:
    """Down-sampled node count: 33 -> 17 -> 9; dyadic grids stay nested."""
    return (n + 1) // 2


def double_nodes(n: int) -> int:
    """Up-sampled node count: 9 -> 17 -> 33."""
    return 2 * n - 1


def trapezoid_weights_1d(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def quadrature_weights(spec: GridSpec) -> np.ndarray:
    """Tensor-product trapezoid weights, shape (ny, nx); sums to the area."""
    wx = trapezoid_weights_1d(spec.nx, spec.hx)
    wy = trapezoid_weights_1d(spec.ny, spec.hy)
    return np.outer(wy, wx)


def l2_norm(f: GridFunction, mask: np.ndarray | None = None) -> float:
    """Discrete L2 norm; channels add in quadrature.

    ``mask`` (bool, shape (ny, nx)) restricts the sum to the marked nodes;
    nodes outside the mask contribute nothing.
    """
    w = quadrature_weights(f.spec)
    if mask is not None:
        w = w * mask
    return float(np.sqrt(np.sum(w[:, :, None] * f.data**2)))


def relative_l2(pred: GridFunction, truth: GridFunction, mask: np.ndarray | None = None) -> float:
    """Squared-ratio relative L2 error: ||pred - truth||^2 / ||truth||^2."""
    if pred.spec != truth.spec or pred.channels != truth.channels:
        raise ValueError("pred and truth must share spec and channel count")
    denom = l2_norm(truth, mask)
    if denom == 0.0:
        raise ValueError("degenerate reference: truth has zero norm")
    diff = GridFunction(pred.spec, pred.data - truth.data)
    return (l2_norm(diff, mask) / denom) ** 2


def _axis_interp(src_n: int, dst_n: int) -> tuple[np.ndarray, np.ndarray]:
    """Lower node index and fractional weight for 1-D linear resampling."""
    t = np.linspace(0.0, src_n - 1.0, dst_n)
    i0 = np.clip(np.floor(t).astype(np.int64), 0, src_n - 2)
    return i0, t - i0


def project(f: GridFunction, target: GridSpec) -> GridFunction:
    """Resample f onto ``target`` by bilinear (linear-spline) interpolation.

    Both specs must cover the same physical rectangle.  The map is the
    identity when the specs match, and it reproduces functions that are
    bilinear per cell exactly at any resolution.
    """
    if not f.spec.same_extents(target):
        raise ValueError("projection requires matching physical extents")
    if (f.spec.nx, f.spec.ny) == (target.nx, target.ny):
        return f.copy()
    ix, wx = _axis_interp(f.spec.nx, target.nx)
    iy, wy = _axis_interp(f.spec.ny, target.ny)
    d = f.data
    d = d[:, ix, :] * (1.0 - wx)[None, :, None] + d[:, ix + 1, :] * wx[None, :, None]
    d = d[iy, :, :] * (1.0 - wy)[:, None, None] + d[iy + 1, :, :] * wy[:, None, None]
    return GridFunction(target, d)


def count_dof(f: GridFunction) -> int:
    """Resolution level of a square-grid field: the per-axis node count."""
    if f.spec.nx != f.spec.ny:
        raise ValueError("count_dof is defined for square grids only")
    return f.spec.nx


def save_grid_function(f: GridFunction, path) -> None:
    """Binary container: magic GFN1, little-endian u32 nx/ny/channels, then
    the f64 payload row-major over (y, x, channel).  Round trip is bit-exact.

    Physical extents are not part of the container; they travel out of band
    (most fields live on the unit square or a documented scaling of it).
    """
    with open(path, "wb") as fh:
        fh.write(GFN_MAGIC)
        fh.write(struct.pack("<III", f.spec.nx, f.spec.ny, f.channels))
        fh.write(np.ascontiguousarray(f.data, dtype="<f8").tobytes())


def load_grid_function(path, extents: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)) -> GridFunction:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GFN_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {GFN_MAGIC!r}")
        nx, ny, d = struct.unpack("<III", fh.read(12))
        payload = fh.read(8 * nx * ny * d)
        data = np.frombuffer(payload, dtype="<f8").reshape(ny, nx, d).copy()
    x0, y0, x1, y1 = extents
    return GridFunction(GridSpec(nx, ny, x0, y0, x1, y1), data)
