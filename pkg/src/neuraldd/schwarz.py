"""Online phase: overlapping domain decomposition with pluggable local
solvers.

The global domain is a connected union of congruent square windows placed
on a lattice with a prescribed overlap.  Each iteration restricts the
coefficient field and the current iterate's boundary values to every
window, solves the local Dirichlet problem (exactly, or with the neural
surrogate), and glues the local solutions with a piecewise-linear partition
of unity.  The loop stops when the successive error, the L2 distance
between consecutive iterates, falls below tolerance.

Rectangles, L-shaped, and I-shaped domains are supported as masked tile
unions; the exterior boundary is walked in the same orientation as the
unit-square perimeter map (top-left corner, top edge first).
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from .boundary import (
    BoundaryTrace,
    FourierBoundaryParams,
    boundary_node_indices,
    kernel_extend,
    sample_gtilde,
    trace_from_field,
)
from .fd_solver import Assembly, assemble, dirichlet_mask, gradient, scatter_trace, solve_assembled
from .grid import GridFunction, GridSpec, quadrature_weights
from .microstructure import CoefficientField, restrict
from .operator import NeuralOperator, apply_operator


class DecompositionError(ValueError):
    """Inconsistent layout request (overlap, tiles, or window size)."""


@dataclass(frozen=True)
class DomainShape:
    """Union of window-sized tiles on a rows x cols lattice."""

    tag: str
    rows: int
    cols: int
    tiles: tuple[tuple[int, int], ...]  # (row, col), row 0 at the bottom

    def __post_init__(self):
        if not self.tiles:
            raise DecompositionError("shape has no tiles")
        seen = set(self.tiles)
        if len(seen) != len(self.tiles):
            raise DecompositionError("duplicate tiles")
        for r, c in self.tiles:
            if not (0 <= r < self.rows and 0 <= c < self.cols):
                raise DecompositionError(f"tile {(r, c)} outside the {self.rows}x{self.cols} lattice")
        # connectivity via 4-neighborhood flood fill
        frontier = [self.tiles[0]]
        reached = {self.tiles[0]}
        while frontier:
            r, c = frontier.pop()
            for nb in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
                if nb in seen and nb not in reached:
                    reached.add(nb)
                    frontier.append(nb)
        if reached != seen:
            raise DecompositionError("tiles are not connected")


def rectangle_shape(rows: int, cols: int) -> DomainShape:
    tiles = tuple((r, c) for r in range(rows) for c in range(cols))
    return DomainShape("rectangle", rows, cols, tiles)


def l_shape(rows: int = 4, cols: int = 4) -> DomainShape:
    """Rectangle minus its top-right quadrant (12 tiles at 4x4)."""
    if rows < 2 or cols < 2:
        raise DecompositionError("L-shape needs at least a 2x2 lattice")
    cut_r, cut_c = rows - rows // 2, cols - cols // 2
    tiles = tuple(
        (r, c) for r in range(rows) for c in range(cols)
        if not (r >= cut_r and c >= cut_c)
    )
    return DomainShape("L", rows, cols, tiles)


def i_shape(rows: int = 3, cols: int = 11) -> DomainShape:
    """Two full flange rows joined by a central web column (23 tiles at 3x11)."""
    if rows < 3 or cols < 3:
        raise DecompositionError("I-shape needs at least a 3x3 lattice")
    web = cols // 2
    tiles = tuple(
        (r, c) for r in range(rows) for c in range(cols)
        if r == 0 or r == rows - 1 or c == web
    )
    return DomainShape("I", rows, cols, tiles)


SHAPE_BUILDERS = {"rectangle": rectangle_shape, "square": rectangle_shape, "L": l_shape, "I": i_shape}


@dataclass(frozen=True)
class SubdomainWindow:
    """One congruent square window: node offsets in the global grid plus the
    canonical unit-square spec every local solver works on."""

    index: int
    ix0: int
    iy0: int
    nx: int
    ny: int
    local_spec: GridSpec


@dataclass
class SubdomainLayout:
    """Windows, partition of unity, material mask, and the ordered exterior
    boundary of the decomposed domain."""

    shape: DomainShape
    global_spec: GridSpec
    window_nodes: int
    stride_cells: int
    overlap_fraction: float
    windows: list[SubdomainWindow]
    phi: list[np.ndarray]              # window-local weights, shape (wn, wn)
    mask: np.ndarray                   # (ny, nx) bool, material nodes
    exterior_iy: np.ndarray            # perimeter order
    exterior_ix: np.ndarray
    exterior_s: np.ndarray             # arc-length parameters in [0, 1)
    exterior_arc: np.ndarray           # arc weights (node's perimeter share)
    exterior_xy: np.ndarray            # (nb, 2) physical coordinates

    def window_slice(self, w: SubdomainWindow) -> tuple[slice, slice]:
        return slice(w.iy0, w.iy0 + w.ny), slice(w.ix0, w.ix0 + w.nx)

    def masked_l2(self, values: np.ndarray) -> float:
        w = quadrature_weights(self.global_spec) * self.mask
        return float(np.sqrt(np.sum(w * values**2)))

    def masked_relative_l2(self, pred: np.ndarray, truth: np.ndarray) -> float:
        """Squared-ratio relative L2 error over the material mask."""
        denom = self.masked_l2(truth)
        if denom == 0.0:
            raise ValueError("degenerate reference: zero norm over the mask")
        return (self.masked_l2(pred - truth) / denom) ** 2


def _axis_profile(n_cells: int, left_overlap: int, right_overlap: int) -> np.ndarray:
    """1 on the core, linear ramp to 0 across each overlap band."""
    p = np.ones(n_cells + 1)
    idx = np.arange(n_cells + 1, dtype=np.float64)
    if left_overlap > 0:
        p = np.minimum(p, idx / left_overlap)
    if right_overlap > 0:
        p = np.minimum(p, (n_cells - idx) / right_overlap)
    return p


def _trace_exterior(cell_mask: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Walk the outer boundary of the material cell union.

    Edges are directed with material on the right, which reproduces the
    unit-square perimeter orientation: start at the top-left corner, top
    edge first.  Returns (iy, ix) node indices in walk order.
    """
    ncy, ncx = cell_mask.shape
    pad = np.zeros((ncy + 2, ncx + 2), dtype=bool)
    pad[1:-1, 1:-1] = cell_mask
    edges: dict[tuple[int, int], tuple[int, int]] = {}

    def add(a, b):
        if a in edges:
            raise DecompositionError("degenerate boundary (pinched corner)")
        edges[a] = b

    for cy, cx in zip(*np.nonzero(cell_mask)):
        if not pad[cy + 2, cx + 1]:  # nothing above: edge runs +x
            add((cx, cy + 1), (cx + 1, cy + 1))
        if not pad[cy, cx + 1]:      # nothing below: edge runs -x
            add((cx + 1, cy), (cx, cy))
        if not pad[cy + 1, cx + 2]:  # nothing right: edge runs -y
            add((cx + 1, cy + 1), (cx + 1, cy))
        if not pad[cy + 1, cx]:      # nothing left: edge runs +y
            add((cx, cy), (cx, cy + 1))

    start = max(edges, key=lambda v: (v[1], -v[0]))  # topmost, then leftmost
    loop = [start]
    cur = edges[start]
    while cur != start:
        loop.append(cur)
        cur = edges[cur]
    if len(loop) != len(edges):
        raise DecompositionError("boundary is not a single loop (holes unsupported)")
    ix = np.array([v[0] for v in loop], dtype=np.int64)
    iy = np.array([v[1] for v in loop], dtype=np.int64)
    return iy, ix


def decompose(shape: DomainShape, window_nodes: int = 33,
              overlap: float = 0.3125) -> SubdomainLayout:
    """Build windows and partition of unity for a tiled shape.

    Windows span the unit square each; the lattice stride is
    round((window_nodes - 1) * (1 - overlap)) cells, so the requested
    overlap is honored exactly whenever it divides the cell count.  The
    partition of unity is exact by pointwise normalization.
    """
    if not 0.0 < overlap < 1.0:
        raise DecompositionError(f"overlap fraction {overlap} outside (0, 1)")
    if window_nodes < 3:
        raise DecompositionError("windows need at least 3 nodes")
    wc = window_nodes - 1  # cells per window axis
    stride = round(wc * (1.0 - overlap))
    if stride < 1 or stride >= wc:
        raise DecompositionError(f"overlap {overlap} leaves no usable stride")
    actual_overlap = (wc - stride) / wc

    ncx = (shape.cols - 1) * stride + wc
    ncy = (shape.rows - 1) * stride + wc
    h = 1.0 / wc
    spec = GridSpec(ncx + 1, ncy + 1, 0.0, 0.0, ncx * h, ncy * h)
    local = GridSpec(window_nodes, window_nodes, 0.0, 0.0, 1.0, 1.0)

    windows = []
    mask = np.zeros((spec.ny, spec.nx), dtype=bool)
    cell_mask = np.zeros((spec.ny - 1, spec.nx - 1), dtype=bool)
    for idx, (r, c) in enumerate(sorted(shape.tiles)):
        ix0, iy0 = c * stride, r * stride
        windows.append(SubdomainWindow(idx, ix0, iy0, window_nodes, window_nodes, local))
        mask[iy0:iy0 + window_nodes, ix0:ix0 + window_nodes] = True
        cell_mask[iy0:iy0 + wc, ix0:ix0 + wc] = True

    ov = wc - stride
    total = np.zeros((spec.ny, spec.nx))
    raw = []
    for win, (r, c) in zip(windows, sorted(shape.tiles)):
        px = _axis_profile(wc, ov if c > 0 else 0, ov if c < shape.cols - 1 else 0)
        py = _axis_profile(wc, ov if r > 0 else 0, ov if r < shape.rows - 1 else 0)
        w = np.outer(py, px)
        raw.append(w)
        sly, slx = slice(win.iy0, win.iy0 + window_nodes), slice(win.ix0, win.ix0 + window_nodes)
        total[sly, slx] += w

    iy_b, ix_b = _trace_exterior(cell_mask, spec)
    exterior = np.zeros((spec.ny, spec.nx), dtype=bool)
    exterior[iy_b, ix_b] = True
    # any node all covering windows ramp to zero on sits on the exterior edge
    dead = mask & (total == 0.0)
    if np.any(dead & ~exterior):
        raise DecompositionError("partition of unity vanished at an interior node")

    phi = []
    claimed = np.zeros((spec.ny, spec.nx), dtype=bool)
    for win, w in zip(windows, raw):
        sly, slx = slice(win.iy0, win.iy0 + window_nodes), slice(win.ix0, win.ix0 + window_nodes)
        t = total[sly, slx]
        p = np.zeros_like(w)
        good = t > 0.0
        p[good] = w[good] / t[good]
        # dead boundary nodes: hand the full weight to the first window there
        patch = (t == 0.0) & ~claimed[sly, slx]
        p[patch] = 1.0
        claimed[sly, slx] |= good | patch
        phi.append(p)

    xs, ys = spec.xs(), spec.ys()
    pts = np.column_stack([xs[ix_b], ys[iy_b]])
    seg = np.linalg.norm(np.diff(np.vstack([pts, pts[:1]]), axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg[:-1])])
    arc_s = cum / seg.sum()
    arc_w = 0.5 * (seg + np.roll(seg, 1))

    # the Dirichlet ring detected from the mask must agree with the walk
    ring = dirichlet_mask(spec, mask)
    if not np.array_equal(ring, exterior):
        raise DecompositionError("exterior walk disagrees with the Dirichlet ring")

    return SubdomainLayout(
        shape, spec, window_nodes, stride, actual_overlap,
        windows, phi, mask, iy_b, ix_b, arc_s, arc_w, pts,
    )


def exterior_trace(layout: SubdomainLayout, params: FourierBoundaryParams) -> np.ndarray:
    """Dirichlet data on the exterior nodes: the periodic master function
    composed with the constant-speed perimeter walk."""
    return np.asarray(sample_gtilde(params, layout.exterior_s))


def initialize(layout: SubdomainLayout, g_vals: np.ndarray) -> np.ndarray:
    """Initial iterate: kernel extension of the exterior data over the
    (possibly non-convex) domain; exterior nodes copy g exactly."""
    u0 = np.zeros((layout.global_spec.ny, layout.global_spec.nx))
    u0[layout.exterior_iy, layout.exterior_ix] = g_vals
    interior = layout.mask.copy()
    interior[layout.exterior_iy, layout.exterior_ix] = False
    jj, ii = np.nonzero(interior)
    if len(jj):
        xs, ys = layout.global_spec.xs(), layout.global_spec.ys()
        q = np.column_stack([xs[ii], ys[jj]])
        u0[jj, ii] = kernel_extend(layout.exterior_xy, layout.exterior_arc, g_vals, q)
    return u0


# ---------------------------------------------------------------------------
# local solvers
# ---------------------------------------------------------------------------

class OracleLocalSolver:
    """Exact finite-difference local solver with per-window assembly cache
    and warm starts (matrices depend only on the local coefficient)."""

    def __init__(self):
        self._assemblies: dict[bytes, Assembly] = {}
        self._warm: dict[bytes, np.ndarray] = {}

    def _assembly(self, a: CoefficientField) -> tuple[bytes, Assembly]:
        key = hashlib.sha1(a.values.tobytes()).digest()
        asm = self._assemblies.get(key)
        if asm is None:
            asm = assemble(a)
            self._assemblies[key] = asm
        return key, asm

    def solve(self, a: CoefficientField, g: BoundaryTrace) -> GridFunction:
        key, asm = self._assembly(a)
        vals = solve_assembled(asm, scatter_trace(g), x0=self._warm.get(key))
        self._warm[key] = vals.ravel()[asm.unknown_flat].copy()
        return GridFunction(a.spec, vals)


class OracleGradientSolver:
    """Exact local solve followed by finite-difference gradients."""

    def __init__(self):
        self._inner = OracleLocalSolver()

    def solve(self, a: CoefficientField, g: BoundaryTrace) -> GridFunction:
        return gradient(self._inner.solve(a, g))


class NeuralLocalSolver:
    """Pretrained operator as the universal local solver.

    Outputs are corrected to satisfy the boundary trace exactly before
    gluing, which keeps interface data consistent across windows.
    """

    def __init__(self, model: NeuralOperator):
        if model.config.out_channels != 1:
            raise ValueError("local solver needs a single-output model")
        self.model = model

    def solve(self, a: CoefficientField, g: BoundaryTrace) -> GridFunction:
        out = apply_operator(self.model, a, g)
        vals = out.values.copy()
        iy, ix = boundary_node_indices(a.spec)
        vals[iy, ix] = g.values
        return GridFunction(a.spec, vals)


class NeuralGradientSolver:
    """Pretrained gradient-target operator for the gradient pipeline."""

    def __init__(self, model: NeuralOperator):
        if model.config.out_channels != 2:
            raise ValueError("gradient solver needs a two-output model")
        self.model = model

    def solve(self, a: CoefficientField, g: BoundaryTrace) -> GridFunction:
        return apply_operator(self.model, a, g)


# ---------------------------------------------------------------------------
# sweeps and the iteration driver
# ---------------------------------------------------------------------------

def _local_inputs(layout: SubdomainLayout, a_global: CoefficientField,
                  win: SubdomainWindow, state: np.ndarray) -> tuple[CoefficientField, BoundaryTrace]:
    a_loc = restrict(a_global, win)
    a_loc = CoefficientField(win.local_spec, a_loc.values, a_loc.cell_ids)
    sly, slx = layout.window_slice(win)
    trace = trace_from_field(state[sly, slx], win.local_spec)
    return a_loc, trace


def _pin_trace(vals: np.ndarray, trace: BoundaryTrace) -> np.ndarray:
    iy, ix = boundary_node_indices(trace.spec)
    out = vals.copy()
    out[iy, ix] = trace.values
    return out


def additive_sweep(layout: SubdomainLayout, a_global: CoefficientField,
                   u_prev: np.ndarray, g_vals: np.ndarray, solver) -> np.ndarray:
    """One parallel update: every window solves against the previous global
    iterate, then the partition of unity glues all local solutions."""
    u_next = np.zeros_like(u_prev)
    for win, phi in zip(layout.windows, layout.phi):
        a_loc, trace = _local_inputs(layout, a_global, win, u_prev)
        u_loc = solver.solve(a_loc, trace)
        sly, slx = layout.window_slice(win)
        u_next[sly, slx] += phi * _pin_trace(u_loc.values, trace)
    u_next[layout.exterior_iy, layout.exterior_ix] = g_vals
    return u_next


def alternating_sweep(layout: SubdomainLayout, a_global: CoefficientField,
                      u_prev: np.ndarray, g_vals: np.ndarray, solver) -> np.ndarray:
    """Sequential update: windows in index order, each seeing the freshest
    glued state."""
    work = u_prev.copy()
    for win, phi in zip(layout.windows, layout.phi):
        a_loc, trace = _local_inputs(layout, a_global, win, work)
        u_loc = solver.solve(a_loc, trace)
        sly, slx = layout.window_slice(win)
        work[sly, slx] = (1.0 - phi) * work[sly, slx] + phi * _pin_trace(u_loc.values, trace)
    work[layout.exterior_iy, layout.exterior_ix] = g_vals
    return work


@dataclass
class IterationResult:
    u: np.ndarray
    converged: bool
    iterations: int
    history: list[tuple[int, float, float]]  # (iteration, successive, vs-truth)
    threshold: float

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "successive_error", "iterative_error"])
            for row in self.history:
                w.writerow(row)


def iterate(layout: SubdomainLayout, a_global: CoefficientField, g_vals: np.ndarray,
            solver, tol: float = 1e-6, tol_mode: str = "rel", max_iter: int = 200,
            mode: str = "additive", truth: np.ndarray | None = None,
            init: np.ndarray | str = "extend") -> IterationResult:
    """Run Schwarz sweeps until the successive error drops below tolerance.

    ``tol_mode`` 'rel' scales the tolerance by the L2 norm of the first
    iterate; 'abs' uses it directly.  ``truth`` adds the iterative error
    column to the history.  ``init`` is 'extend' (boundary-kernel lift),
    'zero', or an explicit starting field.
    """
    if tol <= 0.0:
        raise ValueError("tolerance must be positive")
    sweep = {"additive": additive_sweep, "alternating": alternating_sweep}[mode]
    if isinstance(init, str):
        if init == "extend":
            u = initialize(layout, g_vals)
        elif init == "zero":
            u = np.zeros((layout.global_spec.ny, layout.global_spec.nx))
            u[layout.exterior_iy, layout.exterior_ix] = g_vals
        else:
            raise ValueError(f"unknown init {init!r}")
    else:
        u = init.copy()
        u[layout.exterior_iy, layout.exterior_ix] = g_vals

    threshold = tol
    history: list[tuple[int, float, float]] = []
    for n in range(1, max_iter + 1):
        u_next = sweep(layout, a_global, u, g_vals, solver)
        s = layout.masked_l2(u_next - u)
        if n == 1 and tol_mode == "rel":
            ref = layout.masked_l2(u_next)
            threshold = tol * (ref if ref > 0.0 else 1.0)
        err = layout.masked_l2(u_next - truth) if truth is not None else float("nan")
        history.append((n, s, err))
        u = u_next
        if s < threshold:
            return IterationResult(u, True, n, history, threshold)
    return IterationResult(u, False, max_iter, history, threshold)


def gradient_pipeline(layout: SubdomainLayout, a_global: CoefficientField,
                      u_converged: np.ndarray, grad_solver) -> np.ndarray:
    """Glue per-window gradient outputs driven by the converged iterate."""
    out = np.zeros((layout.global_spec.ny, layout.global_spec.nx, 2))
    for win, phi in zip(layout.windows, layout.phi):
        a_loc, trace = _local_inputs(layout, a_global, win, u_converged)
        g_loc = grad_solver.solve(a_loc, trace)
        sly, slx = layout.window_slice(win)
        out[sly, slx, :] += phi[:, :, None] * g_loc.data
    return out


def direct_solve(layout: SubdomainLayout, a_global: CoefficientField,
                 g_vals: np.ndarray) -> np.ndarray:
    """Masked global finite-difference solve; the iteration's ground truth."""
    asm = assemble(a_global, mask=layout.mask)
    bvals = np.zeros((layout.global_spec.ny, layout.global_spec.nx))
    bvals[layout.exterior_iy, layout.exterior_ix] = g_vals
    return solve_assembled(asm, bvals)
