"""Factored neural fields: signals as a projection of a product of factor
fields evaluated on transformed coordinates."""

from .factors import FactorSpec
from .io_formats import Schedule, load_checkpoint, parse_config, save_checkpoint
from .model import ModelConfig, ProjectionSpec, forward, new_store, param_count, preset
from .params import AdamState, ParamStore, adam_step
from .tasks import (
    ImageSignal,
    RayBatch,
    SdfSampleSet,
    giou,
    psnr,
    render_rays,
    train_direct,
    train_radiance,
    train_shared,
)
from .transforms import ContractionSpec, TransformSpec

__all__ = [
    "AdamState",
    "ContractionSpec",
    "FactorSpec",
    "ImageSignal",
    "ModelConfig",
    "ParamStore",
    "ProjectionSpec",
    "RayBatch",
    "Schedule",
    "SdfSampleSet",
    "TransformSpec",
    "adam_step",
    "forward",
    "giou",
    "load_checkpoint",
    "new_store",
    "param_count",
    "parse_config",
    "preset",
    "psnr",
    "render_rays",
    "save_checkpoint",
    "train_direct",
    "train_radiance",
    "train_shared",
]

__version__ = "0.1.0"
