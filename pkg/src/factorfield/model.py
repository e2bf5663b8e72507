"""Model assembly: factors + connector + projection, presets and parameter
accounting."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import factors, tape, transforms
from .factors import FactorSpec
from .params import ParamStore, sample_dropout_mask
from .tape import Node
from .transforms import ContractionSpec, TransformSpec

PRODUCT = "product"
CONCAT = "concat"

LINEAR = "linear"
MLP_PROJ = "mlp"
VOLUME = "volume"

# Per-level channel template: K_l = (4,4,4,2,2,2) * 2^eta.
CHANNEL_TEMPLATE = (4, 4, 4, 2, 2, 2)

PRESET_NAMES = (
    "occnet",
    "nerf",
    "dvgo",
    "eg3d",
    "ingp",
    "tensorf_vm",
    "tensorf_cp",
    "dif_grid",
    "dif_mlp_b",
    "dif_mlp_c",
    "dif_no_c",
    "dif_sl",
)


@dataclass(frozen=True)
class ProjectionSpec:
    kind: str = MLP_PROJ
    output_dim: int = 3
    layers: int = 2
    width: int = 64
    activation: str = "relu"
    # Volume rendering head only.
    view_pe_levels: int = 2
    density_activation: str = "softplus"
    background: float = 1.0

    def __post_init__(self):
        if self.kind not in (LINEAR, MLP_PROJ, VOLUME):
            raise ValueError(f"unknown projection kind {self.kind!r}")


@dataclass(frozen=True)
class ModelConfig:
    dims: int = 2
    factors: tuple = ()
    connector: str = PRODUCT
    projection: ProjectionSpec = field(default_factory=ProjectionSpec)
    contraction: ContractionSpec = field(default_factory=ContractionSpec)
    dropout_mu: float = 0.1

    def __post_init__(self):
        if self.connector not in (PRODUCT, CONCAT):
            raise ValueError(f"unknown connector {self.connector!r}")
        object.__setattr__(self, "factors", tuple(self.factors))
        validate(self)

    def with_bbox(self, bbox_min, bbox_max) -> "ModelConfig":
        mode = self.contraction.mode
        return replace(self, contraction=ContractionSpec(mode, tuple(bbox_min), tuple(bbox_max)))


def _non_raw(config: ModelConfig):
    return [(i, f) for i, f in enumerate(config.factors) if f.kind != factors.RAW_COORDS]


def _raw(config: ModelConfig):
    return [(i, f) for i, f in enumerate(config.factors) if f.kind == factors.RAW_COORDS]


def validate(config: ModelConfig) -> None:
    if not config.factors:
        raise ValueError("a model needs at least one factor")
    if not 0.0 <= config.dropout_mu < 1.0:
        raise ValueError("dropout_mu must be in [0, 1)")
    non_raw = _non_raw(config)
    if config.connector == PRODUCT and len(non_raw) > 1:
        level_layouts = [f.channels_per_level for _, f in non_raw]
        depth = len(level_layouts[0])
        if any(len(lay) != depth for lay in level_layouts):
            raise ValueError("product factors must agree on the number of levels")
        for level in range(depth):
            widths = {lay[level] for lay in level_layouts} - {1}
            if len(widths) > 1:
                raise ValueError(
                    f"level {level}: product factors disagree on channel count {sorted(widths)}"
                )
    for _, f in non_raw:
        factors.slot_channels(f)  # raises on slot/level mismatch


def product_channels(config: ModelConfig) -> tuple:
    """Per-level channel counts of the connected (non-raw) feature block."""
    non_raw = _non_raw(config)
    if not non_raw:
        return ()
    if config.connector == CONCAT:
        out = []
        for _, f in non_raw:
            out.extend(f.channels_per_level)
        return tuple(out)
    layouts = [f.channels_per_level for _, f in non_raw]
    return tuple(max(lay[level] for lay in layouts) for level in range(len(layouts[0])))


def feature_dim(config: ModelConfig) -> int:
    """Width of the projection input: connected block plus raw pass-throughs."""
    k = sum(product_channels(config))
    for _, f in _raw(config):
        k += f.transform.output_dim(config.dims)
    return k


# ---------------------------------------------------------------------------
# parameters


def _view_pe_dim(levels: int) -> int:
    return 3 + 6 * levels


def projection_widths(config: ModelConfig) -> list[int]:
    p = config.projection
    k = feature_dim(config)
    if p.kind == LINEAR:
        return [k, p.output_dim]
    if p.kind == MLP_PROJ:
        return [k] + [p.width] * p.layers + [p.output_dim]
    return [k + _view_pe_dim(p.view_pe_levels)] + [p.width] * p.layers + [4]


def build_params(config: ModelConfig, store: ParamStore) -> None:
    """Create every tensor the config owns: factors then projection."""
    for i, spec in enumerate(config.factors):
        factors.build_factor_params(spec, store, f"factor{i}", config.dims)
    widths = projection_widths(config)
    if config.projection.kind == LINEAR:
        store.create("proj.w0", (widths[0], widths[1]), init=1.0 / np.sqrt(widths[0]))
    else:
        for i, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
            store.create(f"proj.w{i}", (n_in, n_out), init=1.0 / np.sqrt(n_in))
            store.create(f"proj.b{i}", (n_out,), init="zeros")


def new_store(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    store = ParamStore(dtype=dtype, seed=seed)
    build_params(config, store)
    return store


def param_count(config: ModelConfig) -> dict:
    """Analytic parameter counts per component; matches built tensors exactly."""
    proj = 0
    widths = projection_widths(config)
    if config.projection.kind == LINEAR:
        proj = widths[0] * widths[1]
    else:
        for n_in, n_out in zip(widths, widths[1:]):
            proj += n_in * n_out + n_out
    coef = basis = 0
    for spec in config.factors:
        if spec.kind == factors.RAW_COORDS:
            continue
        if spec.kind == factors.MLP:
            fan_in = spec.transform.output_dim(config.dims)
            sizes = [fan_in] + [spec.mlp_width] * spec.mlp_layers + [spec.channels]
            n = sum(a * b + b for a, b in zip(sizes, sizes[1:]))
        else:
            n = sum(int(np.prod(s)) for s in factors.grid_param_shapes(spec, config.dims))
        if spec.transform.kind == transforms.IDENTITY:
            coef += n
        else:
            basis += n
    return {
        "projection": proj,
        "coefficients": coef,
        "basis": basis,
        "total": proj + coef + basis,
    }


def param_group(config: ModelConfig, name: str) -> str:
    """Classify a tensor name as projection / coefficients / basis."""
    if name.startswith("proj."):
        return "projection"
    idx = int(name.split(".", 1)[0][len("factor") :])
    spec = config.factors[idx]
    return "coefficients" if spec.transform.kind == transforms.IDENTITY else "basis"


def shared_param_names(config: ModelConfig, store: ParamStore) -> list[str]:
    """Tensors reused across signals: flagged factors plus the projection."""
    out = []
    for name in store.names():
        if name.startswith("proj."):
            out.append(name)
        else:
            idx = int(name.split(".", 1)[0][len("factor") :])
            if config.factors[idx].shared:
                out.append(name)
    return out


# ---------------------------------------------------------------------------
# forward evaluation


def connected_features(
    config: ModelConfig,
    store: ParamStore,
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Node:
    """contract -> per-factor eval -> connect -> (training dropout)."""
    xc = transforms.contract(config.contraction, x)
    outputs = [factors.eval_factor(f, store, f"factor{i}", xc) for i, f in enumerate(config.factors)]
    non_raw = [(f, o) for f, o in zip(config.factors, outputs) if f.kind != factors.RAW_COORDS]
    raw = [o for f, o in zip(config.factors, outputs) if f.kind == factors.RAW_COORDS]

    block = None
    if non_raw:
        if config.connector == CONCAT:
            slices = [s for _, o in non_raw for s in o.slices]
            block = slices[0] if len(slices) == 1 else tape.concat(slices, axis=-1)
        else:
            depth = len(non_raw[0][0].channels_per_level)
            level_slices = []
            for level in range(depth):
                prod = non_raw[0][1].slices[level]
                for _, o in non_raw[1:]:
                    prod = prod * o.slices[level]
                level_slices.append(prod)
            block = level_slices[0] if depth == 1 else tape.concat(level_slices, axis=-1)
        if training and config.dropout_mu > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            mask = sample_dropout_mask(block.value.shape[-1], config.dropout_mu, rng)
            block = block * Node(mask.mask.astype(store.dtype))

    parts = ([block] if block is not None else []) + [o.features for o in raw]
    if not parts:
        raise ValueError("model produced no features")
    return parts[0] if len(parts) == 1 else tape.concat(parts, axis=-1)


def _project_direct(config: ModelConfig, store: ParamStore, feats: Node) -> Node:
    p = config.projection
    if p.kind == LINEAR:
        return tape.matmul(feats, store.node("proj.w0"))
    h = feats
    for i in range(p.layers + 1):
        h = tape.matmul(h, store.node(f"proj.w{i}")) + store.node(f"proj.b{i}")
        if i < p.layers:
            h = factors._activate(h, p.activation)
    return h


def forward(
    config: ModelConfig,
    store: ParamStore,
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Node:
    """Full direct-observation estimator: projection of the factor product."""
    if config.projection.kind == VOLUME:
        raise ValueError("volume-projection models are evaluated through render_rays")
    feats = connected_features(config, store, x, training=training, rng=rng)
    return _project_direct(config, store, feats)


def view_encoding(dirs: np.ndarray, levels: int) -> np.ndarray:
    """Raw directions plus sin/cos pairs at doubling frequencies."""
    dirs = np.asarray(dirs, dtype=np.float64)
    parts = [dirs]
    for level in range(levels):
        f = np.pi * (2.0**level)
        parts.append(np.sin(f * dirs))
        parts.append(np.cos(f * dirs))
    return np.concatenate(parts, axis=-1)


def query_field(
    config: ModelConfig,
    store: ParamStore,
    x: np.ndarray,
    dirs: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Volume head: (density, rgb) at sample points with view directions."""
    p = config.projection
    if p.kind != VOLUME:
        raise ValueError("query_field needs a volume projection")
    feats = connected_features(config, store, x, training=training, rng=rng)
    pe = view_encoding(dirs, p.view_pe_levels).astype(store.dtype)
    h = tape.concat([feats, Node(pe)], axis=-1)
    for i in range(p.layers + 1):
        h = tape.matmul(h, store.node(f"proj.w{i}")) + store.node(f"proj.b{i}")
        if i < p.layers:
            h = factors._activate(h, p.activation)
    sigma = factors._activate(h[:, 0:1], p.density_activation)
    rgb = tape.sigmoid(h[:, 1:4])
    return sigma, rgb


# ---------------------------------------------------------------------------
# presets


def basis_resolutions(levels: int, extent: float, lo: int = 32, hi: int = 128) -> tuple:
    """Linearly increasing grid resolutions scaled by signal extent / 1024."""
    scale = float(extent) / 1024.0
    if levels == 1:
        raw = [hi * scale]
    else:
        raw = [(lo + (hi - lo) * l / (levels - 1)) * scale for l in range(levels)]
    return tuple(max(2, int(round(r))) for r in raw)


def channel_layout(levels: int, eta: int) -> tuple:
    mult = 2**eta
    if levels == 1:
        return (sum(CHANNEL_TEMPLATE) * mult,)
    template = CHANNEL_TEMPLATE[:levels]
    return tuple(c * mult for c in template)


def preset(
    name: str,
    dims: int = 3,
    out_dim: int = 3,
    projection_kind: str = MLP_PROJ,
    eta: int | None = None,
    levels: int = 6,
    frequencies: tuple = transforms.DEFAULT_FREQUENCIES,
    signal_extent: float | None = None,
    coef_resolution: int | None = None,
    bbox_min: tuple | None = None,
    bbox_max: tuple | None = None,
    dropout_mu: float = 0.1,
) -> ModelConfig:
    """Named model family member with default hyperparameters filled in."""
    if name not in PRESET_NAMES:
        raise ValueError(f"unknown preset {name!r}; valid: {', '.join(PRESET_NAMES)}")
    if eta is None:
        eta = 3 if dims == 2 else 0
    if signal_extent is None:
        signal_extent = 1024.0 if dims == 2 else 768.0
    if coef_resolution is None:
        coef_resolution = 128 if dims == 2 else 48
    frequencies = tuple(frequencies[:levels])
    k_levels = channel_layout(levels, eta)
    b_res = basis_resolutions(levels, signal_extent)
    saw = TransformSpec(transforms.SAWTOOTH, frequencies)
    ident = TransformSpec(transforms.IDENTITY)

    def coef_grid(channels):
        return FactorSpec(
            kind=factors.DENSE_GRID,
            transform=ident,
            channels_per_level=channels,
            grid_resolutions=(coef_resolution,),
        )

    def basis_grid(transform=saw, channels=k_levels, res=b_res):
        return FactorSpec(
            kind=factors.DENSE_GRID,
            transform=transform,
            channels_per_level=channels,
            grid_resolutions=res,
            shared=True,
        )

    connector = PRODUCT
    if name == "occnet":
        model_factors = (FactorSpec(kind=factors.RAW_COORDS, transform=ident),)
        proj_layers, proj_width = 4, 128
    elif name == "nerf":
        sine = TransformSpec(transforms.SINUSOIDAL, frequencies, pairs=True)
        model_factors = (FactorSpec(kind=factors.RAW_COORDS, transform=sine),)
        proj_layers, proj_width = 4, 128
    elif name == "dvgo":
        model_factors = (coef_grid((sum(k_levels),)),)
        proj_layers, proj_width = 2, 64
    elif name == "eg3d":
        planes = TransformSpec(transforms.ORTHO_2D)
        res = (max(b_res),) * 3
        model_factors = (
            FactorSpec(
                kind=factors.DENSE_GRID,
                transform=planes,
                channels_per_level=(16, 16, 16),
                grid_resolutions=res,
            ),
        )
        proj_layers, proj_width = 2, 64
    elif name == "ingp":
        hash_levels = 16
        growth = (512.0 / 16.0) ** (1.0 / (hash_levels - 1))
        res = tuple(max(2, int(round(16 * growth**l))) for l in range(hash_levels))
        hashing = TransformSpec(
            transforms.HASHING,
            tuple(float(r) for r in res),
            hash_table_log2_size=19,
        )
        model_factors = (
            FactorSpec(
                kind=factors.HASHED_VECTORS,
                transform=hashing,
                channels_per_level=(2,) * hash_levels,
                grid_resolutions=res,
                table_log2_size=19,
            ),
        )
        proj_layers, proj_width = 2, 64
    elif name == "tensorf_vm":
        kp = 16
        plane_res = max(b_res)
        model_factors = (
            FactorSpec(
                kind=factors.DENSE_GRID,
                transform=TransformSpec(transforms.ORTHO_2D),
                channels_per_level=(kp, kp, kp),
                grid_resolutions=(plane_res,) * 3,
            ),
            FactorSpec(
                kind=factors.DENSE_GRID,
                transform=TransformSpec(transforms.ORTHO_1D),
                channels_per_level=(kp, kp, kp),
                grid_resolutions=(plane_res,) * 3,
                shared=True,
            ),
        )
        proj_layers, proj_width = 2, 64
    elif name == "tensorf_cp":
        kp = 16
        res = max(b_res)
        model_factors = tuple(
            FactorSpec(
                kind=factors.DENSE_GRID,
                transform=TransformSpec(transforms.ORTHO_1D),
                channels_per_level=(kp, kp, kp),
                grid_resolutions=(res,) * 3,
                axis_rotation=i,
                shared=i > 0,
            )
            for i in range(3)
        )
        proj_layers, proj_width = 2, 64
    elif name == "dif_grid":
        model_factors = (coef_grid((1,) * levels), basis_grid())
        proj_layers, proj_width = 2, 64
    elif name == "dif_mlp_b":
        mlp_basis = FactorSpec(
            kind=factors.MLP,
            transform=saw,
            channels_per_level=k_levels,
            mlp_layers=2,
            mlp_width=32,
            shared=True,
        )
        model_factors = (coef_grid((1,) * levels), mlp_basis)
        proj_layers, proj_width = 2, 64
    elif name == "dif_mlp_c":
        mlp_coef = FactorSpec(
            kind=factors.MLP,
            transform=ident,
            channels_per_level=(1,) * levels,
            mlp_layers=2,
            mlp_width=32,
        )
        model_factors = (mlp_coef, basis_grid())
        proj_layers, proj_width = 2, 64
    elif name == "dif_no_c":
        model_factors = (basis_grid(),)
        proj_layers, proj_width = 2, 64
    elif name == "dif_sl":
        freq = (frequencies[-1],) if frequencies else (8.0,)
        saw1 = TransformSpec(transforms.SAWTOOTH, freq)
        model_factors = (
            coef_grid((1,)),
            basis_grid(transform=saw1, channels=(sum(k_levels),), res=(max(b_res),)),
        )
        proj_layers, proj_width = 2, 64

    projection = ProjectionSpec(
        kind=projection_kind,
        output_dim=out_dim,
        layers=proj_layers,
        width=proj_width,
    )
    if bbox_min is None:
        bbox_min = (0.0,) * dims
    if bbox_max is None:
        bbox_max = (1.0,) * dims
    contraction = ContractionSpec("bounded", tuple(bbox_min), tuple(bbox_max))
    return ModelConfig(
        dims=dims,
        factors=model_factors,
        connector=connector,
        projection=projection,
        contraction=contraction,
        dropout_mu=dropout_mu,
    )
