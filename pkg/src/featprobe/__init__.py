"""featprobe: learn and analyze feature-space mappings induced by
input-space image manipulations."""

__version__ = "0.1.0"

from . import analysis, imageops, mapping, metrics, nn, synthetic, tensorio

__all__ = [
    "__version__",
    "analysis",
    "imageops",
    "mapping",
    "metrics",
    "nn",
    "synthetic",
    "tensorio",
]
