"""Resolution-invariant U-shaped neural operator for the local Dirichlet
problem.

The parameterization is independent of the input discretization:

* convolution kernels are matrix-valued functions given by nodal values on
  a fixed physical support and evaluated anywhere by linear-spline
  interpolation, so the same parameters apply at any grid spacing that
  resolves the support;
* normalization layers use trapezoid-rule spatial integrals rather than
  per-pixel statistics;
* transitions between resolutions are linear-spline projections onto the
  nested dyadic grids of the ``grid`` module.

The network maps the channel stack (coefficient field, extended boundary
data) to the solution field (or its gradient).  Everything runs in float64
so reverse-mode gradients can be checked against central finite differences
at tight tolerances.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .boundary import BoundaryTrace, extend
from .grid import GridFunction, GridSpec, double_nodes, halve_nodes
from .microstructure import CoefficientField

PPN_MAGIC = b"PPN1"

_ACTIVATIONS = {
    "gelu": F.gelu,
    "silu": F.silu,
    "tanh": torch.tanh,
}


@dataclass(frozen=True)
class OperatorConfig:
    """Architecture hyperparameters.

    ``depth`` is the number of resolution stages: depth - 1 down-sampling
    blocks, one middle block, depth - 1 up-sampling blocks.  ``widths`` are
    the channel counts per stage.  Kernels carry ``kernel_nodes`` nodal
    values per axis; their physical support at stage s spans
    (kernel_nodes - 1) * 2^(s-1) cells of the nominal grid, capped at
    ``max_support`` so deep hierarchies on coarse grids stay inside the
    domain.
    """

    depth: int = 3
    widths: tuple[int, ...] = (16, 32, 64)
    in_channels: int = 2
    out_channels: int = 1
    kernel_nodes: int = 5
    nominal_level: int = 33
    group_size: int = 8
    eps: float = 1e-5
    activation: str = "gelu"
    max_support: float = 0.5

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if len(self.widths) != self.depth:
            raise ValueError(f"need {self.depth} widths, got {len(self.widths)}")
        if self.kernel_nodes < 3 or self.kernel_nodes % 2 == 0:
            raise ValueError("kernel_nodes must be odd and >= 3")
        if self.nominal_level < 2 or (self.nominal_level - 1) % 2 ** (self.depth - 1):
            raise ValueError("nominal_level must support depth-1 dyadic halvings")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def stage_support(self, stage: int) -> float:
        """Physical kernel support at resolution stage (1-based)."""
        cells = (self.kernel_nodes - 1) * 2 ** (stage - 1)
        return min(cells / (self.nominal_level - 1), self.max_support)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OperatorConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def tiny_config(**overrides) -> OperatorConfig:
    """Small configuration for gradient checks and smoke tests."""
    base = dict(depth=3, widths=(4, 8, 16), kernel_nodes=3, nominal_level=9, group_size=8)
    base.update(overrides)
    return OperatorConfig(**base)


def _resample_field(x: torch.Tensor, n: int) -> torch.Tensor:
    """Linear-spline projection of (B, C, N, N) onto n nodes per axis."""
    if x.shape[-1] == n:
        return x
    return F.interpolate(x, size=(n, n), mode="bilinear", align_corners=True)


class InterpConv(nn.Module):
    """Convolution with a spline-interpolated nodal kernel.

    The kernel is a (out, in) matrix field on the square support
    [-a/2, a/2]^2 defined by ``nodes`` x ``nodes`` nodal matrices.  For an
    input sampled with spacing h the kernel is evaluated at all node
    offsets l*h inside the support and the sum carries the uniform
    quadrature weight h (K - 1) / (a K) per axis: 1/K on the grid whose
    spacing equals the kernel's nodal spacing, 1/(2K) at doubled
    resolution, and so on.  Scaling the weight linearly with h keeps the
    discrete sums consistent approximations of one continuum integral, so
    one parameter set evaluates at any resolution that resolves the
    support.  Inputs are zero-extended outside the domain.
    """

    def __init__(self, in_channels: int, out_channels: int, nodes: int,
                 support: float, generator: torch.Generator | None = None):
        super().__init__()
        if not 0.0 < support < 1.0:
            raise ValueError(f"support must lie in (0, 1), got {support}")
        scale = 1.0 / np.sqrt(in_channels * nodes * nodes)
        weight = torch.randn(
            out_channels, in_channels, nodes, nodes,
            generator=generator, dtype=torch.float64,
        )
        self.weight = nn.Parameter(weight * scale)
        self.support = float(support)
        self.nodes = nodes

    def sample_kernel(self, n: int) -> tuple[torch.Tensor, int]:
        """Kernel samples at the node offsets of an n-node unit-square grid.

        Returns the (out, in, K', K') sample stack and the offset radius r
        (K' = 2 r + 1).  The grid spacing must divide the support.
        """
        h = 1.0 / (n - 1)
        m = self.support / h
        if abs(m - round(m)) > 1e-6 * max(1.0, m) or round(m) < 1:
            raise ValueError(
                f"kernel support {self.support} is not a positive multiple of the"
                f" grid spacing 1/{n - 1}"
            )
        r = int(np.floor(m / 2.0 + 1e-9))
        if r == 0:
            # support is shorter than one cell on each side: center tap only
            center = (self.nodes - 1) / 2.0
            idx = int(center)
            if center == idx:
                samples = self.weight[:, :, idx:idx + 1, idx:idx + 1]
            else:
                block = self.weight[:, :, idx:idx + 2, idx:idx + 2]
                samples = 0.25 * block.sum(dim=(-1, -2), keepdim=True)
            return samples, 0
        offs = torch.arange(-r, r + 1, dtype=torch.float64) * h / (self.support / 2.0)
        gx, gy = torch.meshgrid(offs, offs, indexing="xy")
        grid = torch.stack([gx, gy], dim=-1).unsqueeze(0)
        out_c, in_c, K, _ = self.weight.shape
        stacked = self.weight.reshape(1, out_c * in_c, K, K)
        samples = F.grid_sample(stacked, grid, mode="bilinear", align_corners=True)
        return samples.reshape(out_c, in_c, 2 * r + 1, 2 * r + 1), r

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[-1]
        samples, r = self.sample_kernel(n)
        h = 1.0 / (n - 1)
        w_axis = h * (self.nodes - 1) / (self.support * self.nodes)
        kernel = torch.flip(samples, dims=(-1, -2))  # true convolution
        return F.conv2d(x, kernel, padding=r) * float(w_axis**2)


_WEIGHT_CACHE: dict[tuple[int, int], torch.Tensor] = {}


def _integral_weights(ny: int, nx: int) -> torch.Tensor:
    """Trapezoid quadrature weights normalized to unit total mass."""
    key = (ny, nx)
    w = _WEIGHT_CACHE.get(key)
    if w is None:
        wy = torch.full((ny,), 1.0, dtype=torch.float64)
        wy[0] = wy[-1] = 0.5
        wx = torch.full((nx,), 1.0, dtype=torch.float64)
        wx[0] = wx[-1] = 0.5
        w = torch.outer(wy, wx)
        w = w / w.sum()
        _WEIGHT_CACHE[key] = w
    return w


class IntegralGroupNorm(nn.Module):
    """Group normalization with spatial integrals instead of pixel means.

    Channels are partitioned into contiguous groups of ``group_size`` (one
    group when the count is smaller or not divisible).  Each group is
    centered and scaled by its integral mean and standard deviation, then
    every channel gets its own affine pair.
    """

    def __init__(self, channels: int, group_size: int, eps: float):
        super().__init__()
        if channels >= group_size and channels % group_size == 0:
            self.groups = channels // group_size
        else:
            self.groups = 1
        self.channels = channels
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels, dtype=torch.float64))
        self.beta = nn.Parameter(torch.zeros(channels, dtype=torch.float64))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, ny, nx = x.shape
        w = _integral_weights(ny, nx)
        xg = x.reshape(b, self.groups, c // self.groups, ny, nx)
        mean = (xg * w).sum(dim=(-1, -2, -3), keepdim=True) / (c // self.groups)
        var = (((xg - mean) ** 2) * w).sum(dim=(-1, -2, -3), keepdim=True) / (c // self.groups)
        std = torch.sqrt(var)
        normed = ((xg - mean) / (self.eps + std)).reshape(b, c, ny, nx)
        return normed * self.gamma.view(1, c, 1, 1) + self.beta.view(1, c, 1, 1)


class OperatorLayer(nn.Module):
    """Residual layer: skip(x) + conv2(act(norm2(conv1(act(norm1(x)))))).

    The skip branch is the identity when the channel count is unchanged and
    its own interpolated convolution otherwise.
    """

    def __init__(self, in_channels: int, out_channels: int, nodes: int, support: float,
                 group_size: int, eps: float, activation: str,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.norm1 = IntegralGroupNorm(in_channels, group_size, eps)
        self.conv1 = InterpConv(in_channels, out_channels, nodes, support, generator)
        self.norm2 = IntegralGroupNorm(out_channels, group_size, eps)
        self.conv2 = InterpConv(out_channels, out_channels, nodes, support, generator)
        if in_channels == out_channels:
            self.skip = None
        else:
            self.skip = InterpConv(in_channels, out_channels, nodes, support, generator)
        self.act = _ACTIVATIONS[activation]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.conv2(self.act(self.norm2(self.conv1(self.act(self.norm1(x))))))
        residual = x if self.skip is None else self.skip(x)
        return residual + y


class OperatorBlock(nn.Module):
    """Two layers followed by a resolution move.

    Layers run on the incoming grid (inner projections are the identity
    there); the trailing projection halves the node count for ``down``
    blocks, doubles it for ``up`` blocks, and keeps it for ``middle``.
    """

    def __init__(self, kind: str, in_channels: int, out_channels: int, nodes: int,
                 support: float, group_size: int, eps: float, activation: str,
                 generator: torch.Generator | None = None):
        super().__init__()
        if kind not in ("down", "up", "middle"):
            raise ValueError(f"unknown block kind {kind!r}")
        self.kind = kind
        args = (nodes, support, group_size, eps, activation, generator)
        self.layer1 = OperatorLayer(in_channels, in_channels, *args)
        self.layer2 = OperatorLayer(in_channels, out_channels, *args)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.layer2(self.layer1(x))
        n = x.shape[-1]
        if self.kind == "down":
            return _resample_field(x, halve_nodes(n))
        if self.kind == "up":
            return _resample_field(x, double_nodes(n))
        return x


class NeuralOperator(nn.Module):
    """U-shaped stack: lift, down path, middle, up path with skips, project.

    The up path concatenates (current output, matching down-path state)
    along channels, in that order.  The same parameters evaluate at any
    dyadic resolution whose spacing resolves the kernel supports.
    """

    def __init__(self, config: OperatorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        T = config.depth
        w = config.widths
        K = config.kernel_nodes
        gse = (config.group_size, config.eps, config.activation)
        self.lift = InterpConv(config.in_channels, w[0], K, config.stage_support(1), gen)
        self.down = nn.ModuleList(
            OperatorBlock("down", w[j], w[j + 1], K, config.stage_support(j + 1), *gse, gen)
            for j in range(T - 1)
        )
        self.middle = OperatorBlock("middle", w[T - 1], w[T - 1], K, config.stage_support(T), *gse, gen)
        self.up = nn.ModuleList(
            OperatorBlock("up", 2 * w[T - 1 - j], w[T - 2 - j], K, config.stage_support(T - j), *gse, gen)
            for j in range(T - 1)
        )
        self.proj = InterpConv(w[0], config.out_channels, K, config.stage_support(1), gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, N, N) input, got {tuple(x.shape)}")
        n = x.shape[-1]
        if x.shape[-2] != n:
            raise ValueError("operator inputs must be square")
        if (n - 1) % 2 ** (self.config.depth - 1):
            raise ValueError(f"non-dyadic resolution {n} for depth {self.config.depth}")
        h = self.lift(x)
        skips = [h]
        for blk in self.down:
            h = blk(h)
            skips.append(h)
        h = self.middle(h)
        for j, blk in enumerate(self.up):
            h = blk(torch.cat([h, skips[-1 - j]], dim=1))
        return self.proj(h)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def model_input(a: CoefficientField, g: BoundaryTrace) -> torch.Tensor:
    """Stack (coefficient, extended boundary) as a (1, 2, N, N) tensor."""
    if a.spec != g.spec:
        raise ValueError("coefficient and trace must share a grid")
    lifted = extend(g)
    x = np.stack([a.values, lifted.values])
    return torch.from_numpy(x).unsqueeze(0)


def apply_operator(model: NeuralOperator, a: CoefficientField, g: BoundaryTrace) -> GridFunction:
    """Evaluate the operator on one (a, g) pair, returned as a GridFunction."""
    with torch.no_grad():
        out = model(model_input(a, g))
    data = out.squeeze(0).permute(1, 2, 0).numpy()
    return GridFunction(a.spec, data)


def parameter_gradients(model: NeuralOperator, a: CoefficientField, g: BoundaryTrace,
                        upstream: GridFunction) -> dict[str, torch.Tensor]:
    """Reverse-mode parameter gradients for a given upstream field.

    Computes grad of <output, upstream> with respect to every parameter;
    the returned tree mirrors ``model.named_parameters()``.
    """
    out = model(model_input(a, g))
    if tuple(out.shape[1:]) != (upstream.channels, a.spec.ny, a.spec.nx):
        raise ValueError("upstream shape does not match the forward output")
    cotangent = torch.from_numpy(np.ascontiguousarray(upstream.data)).permute(2, 0, 1).unsqueeze(0)
    params = dict(model.named_parameters())
    grads = torch.autograd.grad((out * cotangent).sum(), list(params.values()))
    return {name: gr.detach().clone() for name, gr in zip(params, grads)}


def save_checkpoint(model: NeuralOperator, path) -> None:
    """PPN1 container: magic, u32 version, JSON config header, u64 count,
    then all parameters flattened to little-endian f64 in state_dict order
    (module registration order).  Round trip is bit-exact.
    """
    header = json.dumps(model.config.to_dict()).encode()
    state = model.state_dict()
    flat = np.concatenate([t.detach().numpy().ravel() for t in state.values()])
    with open(path, "wb") as fh:
        fh.write(PPN_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path) -> NeuralOperator:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PPN_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {PPN_MAGIC!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        config = OperatorConfig.from_dict(json.loads(fh.read(hlen).decode()))
        (count,) = struct.unpack("<Q", fh.read(8))
        flat = np.frombuffer(fh.read(8 * count), dtype="<f8")
    model = NeuralOperator(config)
    state = model.state_dict()
    offset = 0
    for name, tensor in state.items():
        size = tensor.numel()
        chunk = torch.from_numpy(flat[offset:offset + size].copy()).reshape(tensor.shape)
        state[name] = chunk
        offset += size
    if offset != count:
        raise ValueError("parameter payload does not match the architecture")
    model.load_state_dict(state)
    return model
