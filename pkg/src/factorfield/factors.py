"""Field representations: dense feature grids, hashed tables, MLPs and the
raw-coordinate pass-through."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape, transforms
from .params import ParamStore, dct_init
from .tape import Node

DENSE_GRID = "dense_grid"
HASHED_VECTORS = "hashed_vectors"
MLP = "mlp"
RAW_COORDS = "raw_coords"

FACTOR_KINDS = (DENSE_GRID, HASHED_VECTORS, MLP, RAW_COORDS)


@dataclass(frozen=True)
class FactorSpec:
    kind: str = DENSE_GRID
    transform: transforms.TransformSpec = field(default_factory=transforms.TransformSpec)
    # Channels per pyramid level (or per orthogonal slot). A level entry of 1
    # against a wider partner broadcasts inside that level's product, which is
    # how single-channel coefficient grids pair with K_l basis channels.
    channels_per_level: tuple = (1,)
    # Dense grids: one (per-axis extents) tuple per level. Hashed vectors:
    # one lattice resolution per level.
    grid_resolutions: tuple = ()
    mlp_layers: int = 2
    mlp_width: int = 32
    mlp_activation: str = "relu"
    table_log2_size: int = 19
    # Orthogonal transforms only: rotate the slot order so multi-factor
    # products mix different axes (vector triple products).
    axis_rotation: int = 0
    shared: bool = False

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        object.__setattr__(self, "channels_per_level", tuple(int(c) for c in self.channels_per_level))
        res = tuple(
            tuple(int(v) for v in r) if isinstance(r, (tuple, list)) else int(r)
            for r in self.grid_resolutions
        )
        object.__setattr__(self, "grid_resolutions", res)

    @property
    def channels(self) -> int:
        return sum(self.channels_per_level)

    def levels(self) -> int:
        return self.transform.levels if self.kind != RAW_COORDS else 1


@dataclass
class FactorOutput:
    """Per-level feature slices; ``features`` is their channel concatenation."""

    slices: list

    @property
    def features(self) -> Node:
        if len(self.slices) == 1:
            return self.slices[0]
        return tape.concat(self.slices, axis=-1)


def corner_weights(coords: np.ndarray, extents) -> tuple[np.ndarray, np.ndarray]:
    """Flattened corner indices and multilinear weights for a dense grid.

    Grid nodes sit at i / (M_d - 1) per axis; queries are clamped to [0, 1].
    Weights form a partition of unity, so d(output)/d(corner) is the weight.
    """
    coords = np.asarray(coords, dtype=np.float64)
    b, d = coords.shape
    extents = tuple(int(m) for m in extents)
    if len(extents) != d:
        raise ValueError("extents rank does not match coordinates")
    if any(m < 2 for m in extents):
        raise ValueError("grid extents must be >= 2")
    lo = np.empty((b, d), dtype=np.int64)
    frac = np.empty((b, d), dtype=np.float64)
    for axis, m in enumerate(extents):
        scaled = np.clip(coords[:, axis], 0.0, 1.0) * (m - 1)
        lo[:, axis] = np.minimum(np.floor(scaled), m - 2)
        frac[:, axis] = scaled - lo[:, axis]
    n_corners = 1 << d
    idx = np.zeros((b, n_corners), dtype=np.int64)
    weights = np.ones((b, n_corners), dtype=np.float64)
    strides = np.empty(d, dtype=np.int64)
    acc = 1
    for axis in range(d - 1, -1, -1):
        strides[axis] = acc
        acc *= extents[axis]
    for j in range(n_corners):
        for axis in range(d):
            bit = (j >> axis) & 1
            idx[:, j] += (lo[:, axis] + bit) * strides[axis]
            weights[:, j] *= frac[:, axis] if bit else 1.0 - frac[:, axis]
    return idx, weights


def _slot_coords(spec: FactorSpec, x: np.ndarray) -> list[np.ndarray]:
    slots = transforms.pyramid(spec.transform, x)
    if spec.transform.kind in (transforms.ORTHO_1D, transforms.ORTHO_2D) and spec.axis_rotation:
        r = spec.axis_rotation % len(slots)
        slots = slots[r:] + slots[:r]
    return slots


def slot_channels(spec: FactorSpec) -> tuple:
    """Channels owned by each parameter slot (one grid/table per slot).

    Transform slots normally match pyramid levels one-to-one. A single-slot
    transform (identity) backing a multi-level channel layout stores all
    level channels in one grid and slices the output per level.
    """
    n_slots = spec.transform.levels if spec.kind != RAW_COORDS else 1
    per_level = spec.channels_per_level
    if len(per_level) == n_slots:
        return per_level
    if n_slots == 1:
        return (sum(per_level),)
    raise ValueError(
        f"cannot map {len(per_level)} channel levels onto {n_slots} transform slots"
    )


def grid_param_shapes(spec: FactorSpec, dims: int) -> list[tuple]:
    """Parameter tensor shapes for one grid/table factor, per slot."""
    shapes = []
    if spec.kind == DENSE_GRID:
        for slot, c in enumerate(slot_channels(spec)):
            res = spec.grid_resolutions[slot]
            if not isinstance(res, tuple):
                if spec.transform.kind == transforms.ORTHO_1D:
                    res = (res,)
                elif spec.transform.kind == transforms.ORTHO_2D:
                    res = (res, res)
                else:
                    res = (res,) * dims
            shapes.append(res + (c,))
    elif spec.kind == HASHED_VECTORS:
        for c in slot_channels(spec):
            shapes.append((1 << spec.table_log2_size, c))
    return shapes


def build_factor_params(spec: FactorSpec, store: ParamStore, prefix: str, dims: int) -> None:
    """Create this factor's tensors: DCT-II patterns for basis grids,
    uniform random init elsewhere."""
    is_basis = spec.transform.kind != transforms.IDENTITY
    if spec.kind == DENSE_GRID:
        for level, shape in enumerate(grid_param_shapes(spec, dims)):
            pt = store.create(f"{prefix}.level{level}", shape, init=0.1)
            if is_basis:
                dct_init(pt, shape[-1])
    elif spec.kind == HASHED_VECTORS:
        for level, shape in enumerate(grid_param_shapes(spec, dims)):
            store.create(f"{prefix}.level{level}", shape, init=0.1)
    elif spec.kind == MLP:
        fan_in = spec.transform.output_dim(dims)
        widths = [fan_in] + [spec.mlp_width] * spec.mlp_layers + [spec.channels]
        for i, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
            store.create(f"{prefix}.w{i}", (n_in, n_out), init=1.0 / np.sqrt(n_in))
            store.create(f"{prefix}.b{i}", (n_out,), init="zeros")
    # RAW_COORDS owns no parameters.


def _reslice(spec: FactorSpec, slot_outs: list) -> FactorOutput:
    """Rearrange per-slot outputs into per-level channel slices."""
    per_slot = slot_channels(spec)
    if per_slot == spec.channels_per_level:
        return FactorOutput(slot_outs)
    full = slot_outs[0] if len(slot_outs) == 1 else tape.concat(slot_outs, axis=-1)
    slices = []
    offset = 0
    for c in spec.channels_per_level:
        slices.append(full[:, offset : offset + c])
        offset += c
    return FactorOutput(slices)


def eval_dense_grid(spec: FactorSpec, store: ParamStore, prefix: str, slot_coords) -> FactorOutput:
    """Multilinear interpolation of each slot's grid at that slot's coords."""
    slot_outs = []
    for slot, coords in enumerate(slot_coords):
        pt = store[f"{prefix}.level{slot}"]
        c = pt.shape[-1]
        idx, w = corner_weights(coords, pt.shape[:-1])
        table = tape.reshape(store.node(pt.name), (-1, c))
        slot_outs.append(tape.weighted_gather(table, idx, w.astype(store.dtype)))
    return _reslice(spec, slot_outs)


def eval_hashed_vectors(spec: FactorSpec, store: ParamStore, prefix: str, slot_coords) -> FactorOutput:
    """Multilinear blend of hashed corner features per level."""
    table_size = 1 << spec.table_log2_size
    slot_outs = []
    for slot, coords in enumerate(slot_coords):
        resolution = spec.grid_resolutions[slot]
        idx, w = transforms.hash_index(coords, resolution, table_size)
        table = store.node(f"{prefix}.level{slot}")
        slot_outs.append(tape.weighted_gather(table, idx, w.astype(store.dtype)))
    return _reslice(spec, slot_outs)


def mlp_forward(store: ParamStore, prefix: str, x: Node, n_layers: int, activation: str = "relu") -> Node:
    h = x
    for i in range(n_layers + 1):
        h = tape.matmul(h, store.node(f"{prefix}.w{i}")) + store.node(f"{prefix}.b{i}")
        if i < n_layers:
            h = _activate(h, activation)
    return h


def _activate(h: Node, activation: str) -> Node:
    if activation == "relu":
        return tape.relu(h)
    if activation == "softplus":
        return tape.softplus(h)
    if activation == "sigmoid":
        return tape.sigmoid(h)
    raise ValueError(f"unknown activation {activation!r}")


def eval_mlp_factor(spec: FactorSpec, store: ParamStore, prefix: str, slot_coords) -> FactorOutput:
    """Fully-connected network over the flattened pyramid coordinates."""
    flat = np.concatenate(slot_coords, axis=-1).astype(store.dtype)
    out = mlp_forward(store, prefix, Node(flat), spec.mlp_layers, spec.mlp_activation)
    slices = []
    offset = 0
    for c in spec.channels_per_level:
        slices.append(out[:, offset : offset + c])
        offset += c
    return FactorOutput(slices)


def eval_factor(spec: FactorSpec, store: ParamStore, prefix: str, x: np.ndarray) -> FactorOutput:
    """Transform already-contracted coordinates and evaluate the factor."""
    slot_coords = _slot_coords(spec, x)
    if spec.kind == RAW_COORDS:
        flat = np.concatenate(slot_coords, axis=-1).astype(store.dtype)
        return FactorOutput([Node(flat)])
    if spec.kind == DENSE_GRID:
        return eval_dense_grid(spec, store, prefix, slot_coords)
    if spec.kind == HASHED_VECTORS:
        return eval_hashed_vectors(spec, store, prefix, slot_coords)
    if spec.kind == MLP:
        return eval_mlp_factor(spec, store, prefix, slot_coords)
    raise ValueError(f"unknown factor kind {spec.kind!r}")
