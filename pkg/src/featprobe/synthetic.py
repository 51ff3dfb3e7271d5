"""Deterministic toy featurizers so the full pipeline runs without any
pretrained model.

``pointwise_linear`` mixes the three RGB channels of every pixel through a
fixed seeded matrix (a 1x1 convolution): it is exactly equivariant to 90
degree rotations and mirrors, and any pixel-linear manipulation (grayscale,
channel mixing) induces an exactly linear feature-space map, which gives the
linear mapping family a ground truth to recover. ``patch_pool_linear``
average-pools p x p patches first, producing coarse grids like the real
final stages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageops import Image
from .tensorio import FeatureMap, Tensor, load_tensor, save_tensor

KINDS = ("pointwise_linear", "patch_pool_linear")


@dataclass
class ToyFeaturizer:
    kind: str
    channels: int
    seed: int
    pool: int = 1  # patch size for patch_pool_linear
    stage: str = "feat3"  # stage tag stamped on outputs (shape checks don't apply)
    weight: np.ndarray | None = None  # [channels, 3], fixed at construction
    bias: np.ndarray | None = None  # [channels]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown featurizer kind {self.kind!r}")
        if self.kind == "pointwise_linear":
            self.pool = 1
        if self.pool < 1:
            raise ValueError("pool size must be >= 1")
        if self.weight is None:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))
            self.weight = rng.standard_normal((self.channels, 3)).astype(np.float32)
            self.bias = np.zeros(self.channels, dtype=np.float32)
        self.weight = np.asarray(self.weight, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32)
        if self.weight.shape != (self.channels, 3) or self.bias.shape != (self.channels,):
            raise ValueError("featurizer weight/bias shape mismatch")

    @property
    def backbone_tag(self) -> str:
        return f"toy-{self.kind}-{self.seed}"


def featurize(featurizer: ToyFeaturizer, img: Image) -> FeatureMap:
    """Deterministic feature map of an image; grid is H/p x W/p."""
    p = featurizer.pool
    if img.height % p or img.width % p:
        raise ValueError(f"image {img.height}x{img.width} not divisible by pool {p}")
    pix = img.pixels.astype(np.float32) / np.float32(255.0)  # [H, W, 3]
    if p > 1:
        h, w = img.height // p, img.width // p
        pix = pix.reshape(h, p, w, p, 3).mean(axis=(1, 3))
    feats = np.einsum("ck,hwk->chw", featurizer.weight, pix) \
        + featurizer.bias[:, None, None]
    return FeatureMap(Tensor(feats), featurizer.backbone_tag, featurizer.stage)


def grayscale_feature_matrix(featurizer: ToyFeaturizer) -> np.ndarray:
    """The exact linear map A with featurize(grayscale(img)) ~= A @ featurize(img).

    grayscale mixes pixels by the BT.601 matrix G (each output channel is the
    same luma combination); composing through the featurizer M gives
    A = M G pinv(M) on the feature subspace span(M).
    """
    from .imageops import GRAY_WEIGHTS

    if np.any(featurizer.bias != 0):
        raise ValueError("exact composition requires a zero-bias featurizer")
    m = featurizer.weight.astype(np.float64)
    g = np.tile(np.asarray(GRAY_WEIGHTS, dtype=np.float64), (3, 1))
    return (m @ g @ np.linalg.pinv(m)).astype(np.float64)


# ---------------------------------------------------------------------------
# featurizer bundles (so manifests can reference synthetic features
# identically to real ones)
# ---------------------------------------------------------------------------

def save_featurizer_bundle(featurizer: ToyFeaturizer, dirpath) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    save_tensor(Tensor(featurizer.weight), dirpath / "weight.npy")
    save_tensor(Tensor(featurizer.bias), dirpath / "bias.npy")
    meta = {
        "format": "featprobe-featurizer-bundle",
        "kind": featurizer.kind,
        "channels": featurizer.channels,
        "seed": featurizer.seed,
        "pool": featurizer.pool,
        "stage": featurizer.stage,
        "parameters": {"weight": "weight.npy", "bias": "bias.npy"},
    }
    with open(dirpath / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_featurizer_bundle(dirpath) -> ToyFeaturizer:
    dirpath = Path(dirpath)
    with open(dirpath / "meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != "featprobe-featurizer-bundle":
        raise ValueError(f"{dirpath}: not a featurizer bundle")
    weight = load_tensor(dirpath / meta["parameters"]["weight"]).data
    bias = load_tensor(dirpath / meta["parameters"]["bias"]).data
    return ToyFeaturizer(meta["kind"], meta["channels"], meta["seed"],
                         pool=meta["pool"], stage=meta["stage"],
                         weight=weight, bias=bias)
