"""featprobe-exporter: pretrained backbone features, classifier heads, and
perceptual stacks as featprobe-compatible NPY files and manifests."""

__version__ = "0.1.0"

from .backbones import STAGE_SHAPES, WeightsUnavailableError, load_backbone
from .export import (
    ExportJob,
    build_pairs,
    export_features,
    export_head,
    export_perceptual_stack,
)

__all__ = [
    "ExportJob",
    "STAGE_SHAPES",
    "WeightsUnavailableError",
    "__version__",
    "build_pairs",
    "export_features",
    "export_head",
    "export_perceptual_stack",
    "load_backbone",
]
