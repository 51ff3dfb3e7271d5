"""Image preprocessing: the standard evaluation transform.

Shorter side resized (bilinear, antialiased), center crop to the backbone
input resolution, scaled to [0, 1], then normalized with standard ImageNet
statistics. The normalization is recorded in every manifest so the core
never re-normalizes pixels.
"""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def load_rgb(path) -> Image.Image:
    with Image.open(path) as im:
        return im.convert("RGB")


def eval_transform(im: Image.Image, resolution: int) -> torch.Tensor:
    """[3, R, R] float32 tensor, ImageNet-normalized."""
    w, h = im.size
    scale = resolution / min(w, h)
    im = im.resize((max(resolution, round(w * scale)),
                    max(resolution, round(h * scale))),
                   Image.Resampling.BILINEAR)
    w, h = im.size
    left = (w - resolution) // 2
    top = (h - resolution) // 2
    im = im.crop((left, top, left + resolution, top + resolution))
    arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(IMAGENET_MEAN, dtype=np.float32)) \
        / np.asarray(IMAGENET_STD, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def preprocess_batch(paths, resolution: int) -> torch.Tensor:
    return torch.stack([eval_transform(load_rgb(p), resolution) for p in paths])
