"""Learnable parameters, Adam, dropout sparsity and DCT initialization."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .tape import Node


@dataclass
class ParamTensor:
    """Named learnable array with a paired gradient buffer."""

    name: str
    values: np.ndarray
    grad: np.ndarray
    learnable: bool = True

    @property
    def shape(self):
        return self.values.shape


class ParamStore:
    """Owns every parameter of one model instance.

    Single-writer: one training loop mutates values/grads; forward
    evaluation reads a frozen snapshot and is pure.
    """

    def __init__(self, dtype=np.float32, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, ParamTensor] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> ParamTensor:
        return self._params[name]

    def names(self) -> list[str]:
        return sorted(self._params)

    def tensors(self) -> list[ParamTensor]:
        return [self._params[n] for n in self.names()]

    def create(self, name: str, shape, init="zeros", learnable: bool = True) -> ParamTensor:
        """Create a tensor; ``init`` is an ndarray, a scalar scale for
        uniform [-s, s] init, or "zeros"."""
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if isinstance(init, np.ndarray):
            values = np.ascontiguousarray(init, dtype=self.dtype).reshape(shape)
        elif init == "zeros":
            values = np.zeros(shape, dtype=self.dtype)
        else:
            s = float(init)
            values = self.rng.uniform(-s, s, size=shape).astype(self.dtype)
        pt = ParamTensor(name, values, np.zeros(shape, dtype=self.dtype), learnable)
        self._params[name] = pt
        return pt

    def adopt(self, pt: ParamTensor) -> None:
        """Register an existing tensor (used for cross-signal sharing)."""
        if pt.name in self._params and self._params[pt.name] is not pt:
            raise ValueError(f"parameter {pt.name!r} already exists")
        self._params[pt.name] = pt

    def node(self, name: str) -> Node:
        pt = self._params[name]
        return Node(pt.values, param=pt)

    def total_elements(self) -> int:
        return sum(p.values.size for p in self._params.values())


def zero_grads(params) -> None:
    """Zero every gradient buffer (learnable or not, uniformly)."""
    if isinstance(params, ParamStore):
        params = params.tensors()
    for pt in params:
        pt.grad[...] = 0


@dataclass
class AdamState:
    """Bias-corrected Adam, keyed by tensor name so registration order is
    irrelevant to the trajectory."""

    lr: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params) -> None:
    """Update learnable tensors in place.

    ``params`` is a ParamStore, an iterable of tensors, or a mapping from
    state key to tensor (used when tensors from several signals share names).
    """
    if isinstance(params, ParamStore):
        params = params.tensors()
    if isinstance(params, dict):
        keyed = sorted(params.items())
    else:
        keyed = sorted((pt.name, pt) for pt in params)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for key, pt in keyed:
        if not pt.learnable:
            continue
        if key not in state.m:
            state.m[key] = np.zeros_like(pt.values)
            state.v[key] = np.zeros_like(pt.values)
        m, v = state.m[key], state.v[key]
        g = pt.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        # update = lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps), with the
        # temporaries fused in place.
        denom = v / (1 - b2**t)
        np.sqrt(denom, out=denom)
        denom += state.eps
        np.divide(m, denom, out=denom)
        denom *= state.lr / (1 - b1**t)
        pt.values -= denom.astype(pt.values.dtype, copy=False)


@dataclass
class DropoutMask:
    k: int
    mu: float
    mask: np.ndarray


def sample_dropout_mask(k: int, mu: float, rng: np.random.Generator) -> DropoutMask:
    """Binary channel mask; entry is 0 with probability mu.

    Applied multiplicatively to the factor product during training only.
    """
    if not 0.0 <= mu < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {mu}")
    mask = (rng.random(k) >= mu).astype(np.float64)
    return DropoutMask(k=k, mu=mu, mask=mask)


def dct_frequency_vectors(dims: int, count: int) -> list[tuple[int, ...]]:
    """First ``count`` frequency index vectors, ordered by increasing L1
    norm with lexicographic tie-break."""
    out = []
    total = 0
    while len(out) < count:
        for kappa in itertools.product(range(total + 1), repeat=dims):
            if sum(kappa) == total:
                out.append(kappa)
                if len(out) == count:
                    break
        total += 1
    return out


def dct_pattern(shape, kappa) -> np.ndarray:
    """Separable DCT-II pattern: prod_d cos(pi * kappa_d * (2 i_d + 1) / (2 M_d))."""
    out = np.ones(shape, dtype=np.float64)
    for d, (m, k) in enumerate(zip(shape, kappa)):
        i = np.arange(m, dtype=np.float64)
        axis = np.cos(np.pi * k * (2 * i + 1) / (2 * m))
        view = [1] * len(shape)
        view[d] = m
        out = out * axis.reshape(view)
    return out


def dct_init(grid: ParamTensor, channels: int) -> None:
    """Fill a basis grid (spatial dims + channel axis last) with low-frequency
    DCT-II patterns, one frequency vector per channel."""
    spatial = grid.shape[:-1]
    if grid.shape[-1] != channels:
        raise ValueError("channel count does not match grid shape")
    for c, kappa in enumerate(dct_frequency_vectors(len(spatial), channels)):
        grid.values[..., c] = dct_pattern(spatial, kappa).astype(grid.values.dtype)
