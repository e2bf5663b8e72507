"""Coordinate transformations, multi-scale pyramids and space contraction.

All functions here are pure and stateless. Transformed coordinates are
treated as constants by the autodiff tape: gradients flow only into
parameters, never back through a transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IDENTITY = "identity"
SAWTOOTH = "sawtooth"
TRIANGULAR = "triangular"
SINUSOIDAL = "sinusoidal"
HASHING = "hashing"
ORTHO_1D = "orthogonal_1d"
ORTHO_2D = "orthogonal_2d"

TRANSFORM_KINDS = (IDENTITY, SAWTOOTH, TRIANGULAR, SINUSOIDAL, HASHING, ORTHO_1D, ORTHO_2D)

# Linearly increasing level frequencies used by the default 6-level pyramid.
DEFAULT_FREQUENCIES = (2.0, 3.2, 4.4, 5.6, 6.8, 8.0)

_HASH_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class TransformSpec:
    kind: str = IDENTITY
    frequencies: tuple = ()  # empty means a single level with f = 1
    hash_table_log2_size: int = 19
    # Sinusoidal only: emit raw (sin, cos) pairs per level instead of the
    # [0, 1]-remapped wave used for grid indexing.
    pairs: bool = False

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        freqs = tuple(float(f) for f in self.frequencies)
        if any(f <= 0 for f in freqs):
            raise ValueError("frequencies must be positive")
        if len(freqs) > 1 and any(b <= a for a, b in zip(freqs, freqs[1:])):
            raise ValueError("frequencies must be strictly increasing")
        object.__setattr__(self, "frequencies", freqs)

    @property
    def levels(self) -> int:
        if self.kind in (ORTHO_1D, ORTHO_2D):
            return 3
        return max(1, len(self.frequencies))

    def level_frequencies(self) -> tuple:
        return self.frequencies if self.frequencies else (1.0,)

    def output_dim(self, dims: int) -> int:
        """Arity of the flattened transform output for D-dimensional input."""
        if self.kind in (ORTHO_1D, ORTHO_2D):
            if dims != 3:
                raise ValueError("orthogonal transforms require D=3")
            return 3 if self.kind == ORTHO_1D else 6
        per_level = 2 * dims if (self.kind == SINUSOIDAL and self.pairs) else dims
        return per_level * self.levels


@dataclass(frozen=True)
class ContractionSpec:
    mode: str = "bounded"  # "bounded" | "unbounded"
    bbox_min: tuple = (0.0, 0.0)
    bbox_max: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.mode not in ("bounded", "unbounded"):
            raise ValueError(f"unknown contraction mode {self.mode!r}")
        u = tuple(float(v) for v in self.bbox_min)
        v = tuple(float(v) for v in self.bbox_max)
        if len(u) != len(v):
            raise ValueError("bbox_min and bbox_max differ in length")
        if self.mode == "bounded" and any(b <= a for a, b in zip(u, v)):
            raise ValueError("bbox_max must exceed bbox_min component-wise")
        object.__setattr__(self, "bbox_min", u)
        object.__setattr__(self, "bbox_max", v)


def contract(spec: ContractionSpec, x: np.ndarray) -> np.ndarray:
    """Normalize raw coordinates into the grid-indexable domain.

    Bounded: (x - u) / (v - u), landing in [0, 1]^D for in-box points.
    Unbounded: identity inside the unit ball, (2 - 1/|x|) x/|x| outside,
    then remapped into the 0.5-centered ball inside [0, 1]^D so feature
    grids never see negative coordinates.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(spec.bbox_min)
    v = np.asarray(spec.bbox_max)
    if spec.mode == "bounded":
        return (x - u) / (v - u)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.maximum(norm, 1e-12)
    ball = np.where(norm <= 1.0, x, (2.0 - 1.0 / safe) * (x / safe))
    return ball / 4.0 + 0.5


def contract_unbounded_raw(x: np.ndarray) -> np.ndarray:
    """The two-branch contraction before the [0, 1]^D remap (radius-2 ball)."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.maximum(norm, 1e-12)
    return np.where(norm <= 1.0, x, (2.0 - 1.0 / safe) * (x / safe))


def sawtooth(x):
    """Fractional part, in [0, 1); mathematical mod so negatives wrap up."""
    x = np.asarray(x, dtype=np.float64)
    return x - np.floor(x)


def triangular(x):
    """Period-1 tent wave in [0, 1], continuous everywhere."""
    return 1.0 - 2.0 * np.abs(sawtooth(x) - 0.5)


def sinusoidal(x):
    """(sin(2 pi x) + 1) / 2, kept in [0, 1] for grid indexing."""
    x = np.asarray(x, dtype=np.float64)
    return (np.sin(2.0 * np.pi * x) + 1.0) / 2.0


def sinusoidal_pairs(x):
    """Raw (sin, cos) features per coordinate, interleaved along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    s = np.sin(2.0 * np.pi * x)
    c = np.cos(2.0 * np.pi * x)
    return np.stack([s, c], axis=-1).reshape(*x.shape[:-1], -1)


def hash_corner_coords(x: np.ndarray, resolution: int):
    """Lattice corners and multilinear weights around x at a level resolution.

    Nodes sit at i / (resolution - 1), matching the dense-grid convention so
    a collision-free table reproduces a dense grid exactly.
    Returns integer corners (B, 2^D, D) and weights (B, 2^D) summing to 1.
    """
    x = np.asarray(x, dtype=np.float64)
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    b, d = x.shape
    scaled = np.clip(x, 0.0, 1.0) * (resolution - 1)
    lo = np.minimum(np.floor(scaled), resolution - 2).astype(np.int64)
    frac = scaled - lo
    n_corners = 1 << d
    corners = np.empty((b, n_corners, d), dtype=np.int64)
    weights = np.ones((b, n_corners), dtype=np.float64)
    for j in range(n_corners):
        for axis in range(d):
            bit = (j >> axis) & 1
            corners[:, j, axis] = lo[:, axis] + bit
            weights[:, j] *= frac[:, axis] if bit else 1.0 - frac[:, axis]
    return corners, weights


def spatial_hash(corners: np.ndarray, table_size: int) -> np.ndarray:
    """XOR of per-dimension prime products, 32-bit wrapped, modulo table size."""
    d = corners.shape[-1]
    h = np.zeros(corners.shape[:-1], dtype=np.uint64)
    for axis in range(d):
        h ^= (corners[..., axis].astype(np.uint64) * np.uint64(_HASH_PRIMES[axis])) & np.uint64(0xFFFFFFFF)
    return (h % np.uint64(table_size)).astype(np.int64)


def hash_index(x: np.ndarray, level_resolution: int, table_size: int):
    """Table slots and multilinear weights for the corners surrounding x."""
    corners, weights = hash_corner_coords(x, level_resolution)
    return spatial_hash(corners, table_size), weights


def orthogonal_project(x: np.ndarray, kind: str):
    """Axis/plane sub-coordinates of 3D points.

    1D: per-axis coordinates in (z, y, x) order; 2D: planes (xy, xz, yz).
    The orders are paired so 1D component k matches the plane that does not
    contain its axis (vector-matrix pairing).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 3:
        raise ValueError("orthogonal projections require D=3")
    if kind == ORTHO_1D:
        return [x[:, [2]], x[:, [1]], x[:, [0]]]
    if kind == ORTHO_2D:
        return [x[:, [0, 1]], x[:, [0, 2]], x[:, [1, 2]]]
    raise ValueError(f"unknown orthogonal kind {kind!r}")


def _single_level(kind: str, x: np.ndarray, pairs: bool) -> np.ndarray:
    if kind == IDENTITY:
        return np.asarray(x, dtype=np.float64)
    if kind == SAWTOOTH:
        return sawtooth(x)
    if kind == TRIANGULAR:
        return triangular(x)
    if kind == SINUSOIDAL:
        return sinusoidal_pairs(x) if pairs else sinusoidal(x)
    if kind == HASHING:
        # Hash levels keep raw normalized coordinates; the per-level lattice
        # resolution lives with the factor that owns the table.
        return np.asarray(x, dtype=np.float64)
    raise ValueError(f"transform kind {kind!r} has no per-level form")


def pyramid(spec: TransformSpec, x: np.ndarray) -> list[np.ndarray]:
    """Per-level transformed coordinates, one array per level.

    Level l applies the base transform to x * f_l. Orthogonal transforms
    have no frequency pyramid; their "levels" are the axis/plane slots.
    """
    x = np.asarray(x, dtype=np.float64)
    if spec.kind in (ORTHO_1D, ORTHO_2D):
        return orthogonal_project(x, spec.kind)
    if spec.kind == HASHING:
        # Hash levels differ by lattice resolution, not coordinate scale.
        return [x for _ in spec.level_frequencies()]
    return [_single_level(spec.kind, x * f, spec.pairs) for f in spec.level_frequencies()]


def pyramid_flat(spec: TransformSpec, x: np.ndarray) -> np.ndarray:
    """Flat concatenation of the pyramid levels (MLP-factor input form)."""
    return np.concatenate(pyramid(spec, x), axis=-1)
