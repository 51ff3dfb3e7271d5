"""Evaluation metrics: median cosine similarity (plain and masked), the
pixel-difference change-mask pipeline, SSIM, the perceptual distance formula
over supplied feature stacks, and classifier-based semantic metrics.

Conventions fixed here:
  * cosine denominators are guarded by eps = 1e-8; medians over an even
    number of values average the two middle ones (same rule as the training
    loss);
  * the change-mask threshold "50" is strict (distance must exceed 50);
  * mask smoothing is a 5x5 Gaussian, sigma 1, per channel, reflect padding,
    after bilinear resize to the backbone input resolution;
  * SSIM runs on BT.601 luma with an 11x11 Gaussian window (sigma 1.5),
    K1=0.01, K2=0.03, L=255;
  * Jensen-Shannon divergence uses the natural log, so its ceiling is ln 2.

Perceptual stacks are *supplied* (typically by the backbone exporter);
computing their internal features requires a pretrained network and is out
of scope here.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageops import GRAY_WEIGHTS, Image
from .tensorio import FeatureMap, Tensor, load_tensor, save_tensor

COSINE_EPS = 1e-8
CHANGE_THRESHOLD = 50.0
LAYERNORM_EPS = 1e-5


class EmptyMaskError(ValueError):
    """A masked metric was asked to reduce over zero selected cells."""


@dataclass
class ChangeMask:
    """Boolean grid marking feature cells whose pixel footprint changed."""

    grid: tuple[int, int]
    cells: np.ndarray  # [H, W] bool

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=bool)
        if cells.shape != tuple(self.grid):
            raise ValueError(f"cells shape {cells.shape} != grid {self.grid}")
        self.cells = cells

    @property
    def selected(self) -> int:
        return int(self.cells.sum())


# ---------------------------------------------------------------------------
# median cosine similarity
# ---------------------------------------------------------------------------

def location_cosines(f1: FeatureMap, f2: FeatureMap) -> np.ndarray:
    """Per-location cosine similarity map [H, W] (eps-guarded)."""
    if f1.tensor.shape != f2.tensor.shape:
        raise ValueError(f"shape mismatch: {f1.tensor.shape} vs {f2.tensor.shape}")
    a = f1.tensor.data.astype(np.float64)
    b = f2.tensor.data.astype(np.float64)
    dot = np.sum(a * b, axis=0)
    denom = np.maximum(np.linalg.norm(a, axis=0) * np.linalg.norm(b, axis=0),
                       COSINE_EPS)
    return dot / denom


def mdn_cs(f1: FeatureMap, f2: FeatureMap, mask: ChangeMask | None = None) -> float:
    """Median over (masked) locations of per-location cosine similarity."""
    cos = location_cosines(f1, f2)
    if mask is not None:
        if tuple(mask.grid) != cos.shape:
            raise ValueError(f"mask grid {mask.grid} != feature grid {cos.shape}")
        cos = cos[mask.cells]
        if cos.size == 0:
            raise EmptyMaskError("empty mask: no cells selected")
    return float(np.median(cos))


# ---------------------------------------------------------------------------
# change-mask pipeline
# ---------------------------------------------------------------------------

def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def smooth_reflect(channel: np.ndarray, size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Separable Gaussian smoothing with reflect padding."""
    k = gaussian_kernel1d(size, sigma)
    r = size // 2
    padded = np.pad(channel.astype(np.float64), r, mode="reflect")
    tmp = np.zeros((channel.shape[0] + 2 * r, channel.shape[1]), dtype=np.float64)
    for i in range(size):
        tmp += k[i] * padded[:, i : i + channel.shape[1]]
    out = np.zeros(channel.shape, dtype=np.float64)
    for i in range(size):
        out += k[i] * tmp[i : i + channel.shape[0], :]
    return out


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize of an [H, W, C] float array."""
    in_h, in_w = pixels.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return pixels.astype(np.float64, copy=True)
    src = pixels.astype(np.float64)

    def axis_coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1.0)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (c - lo)

    y0, y1, fy = axis_coords(out_h, in_h)
    x0, x1, fx = axis_coords(out_w, in_w)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def pixel_change_map(orig: Image, manip: Image, input_resolution: int = 288) -> np.ndarray:
    """Boolean per-pixel change map at the model input resolution.

    Both images are bilinearly resized, Gaussian-smoothed per channel (5x5,
    sigma 1, reflect), and their per-pixel RGB Euclidean distance is
    thresholded strictly above 50.
    """
    if (orig.height, orig.width) != (manip.height, manip.width):
        raise ValueError("image size mismatch")
    a = resize_bilinear(orig.pixels, input_resolution, input_resolution)
    b = resize_bilinear(manip.pixels, input_resolution, input_resolution)
    sq = np.zeros((input_resolution, input_resolution), dtype=np.float64)
    for c in range(3):
        d = smooth_reflect(a[..., c]) - smooth_reflect(b[..., c])
        sq += d * d
    return np.sqrt(sq) > CHANGE_THRESHOLD


def any_pool(changed: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Cell (i, j) is true iff any covered pixel is true (floor-split cells)."""
    gh, gw = grid
    height, width = changed.shape
    rows = [(height * i) // gh for i in range(gh + 1)]
    cols = [(width * j) // gw for j in range(gw + 1)]
    out = np.zeros((gh, gw), dtype=bool)
    for i in range(gh):
        for j in range(gw):
            out[i, j] = changed[rows[i] : rows[i + 1], cols[j] : cols[j + 1]].any()
    return out


def build_change_mask(orig: Image, manip: Image, grid: tuple[int, int],
                      input_resolution: int = 288) -> ChangeMask:
    """Binary mask from pixel-wise differences, any-pooled to the feature grid."""
    changed = pixel_change_map(orig, manip, input_resolution)
    return ChangeMask(tuple(grid), any_pool(changed, tuple(grid)))


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def _luma(img: Image) -> np.ndarray:
    p = img.pixels.astype(np.float64)
    return GRAY_WEIGHTS[0] * p[..., 0] + GRAY_WEIGHTS[1] * p[..., 1] \
        + GRAY_WEIGHTS[2] * p[..., 2]


def _window_means(x: np.ndarray, kernel2d: np.ndarray) -> np.ndarray:
    size = kernel2d.shape[0]
    wins = np.lib.stride_tricks.sliding_window_view(x, (size, size))
    return np.einsum("hwij,ij->hw", wins, kernel2d, optimize=True)


def ssim(x: Image, y: Image, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 255.0) -> float:
    """Mean local SSIM over Gaussian-weighted sliding windows, on luma.

    Windows larger than the image shrink to the smaller image side (flagged
    with a warning).
    """
    if (x.height, x.width) != (y.height, y.width):
        raise ValueError("image size mismatch")
    side = min(x.height, x.width)
    if window > side:
        warnings.warn(f"SSIM window {window} larger than image; shrunk to {side}")
        window = side
    k1d = gaussian_kernel1d(window, sigma)
    kernel = np.outer(k1d, k1d)
    lx, ly = _luma(x), _luma(y)
    mu_x = _window_means(lx, kernel)
    mu_y = _window_means(ly, kernel)
    xx = _window_means(lx * lx, kernel) - mu_x * mu_x
    yy = _window_means(ly * ly, kernel) - mu_y * mu_y
    xy = _window_means(lx * ly, kernel) - mu_x * mu_y
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2))
    return float(ssim_map.mean())


# ---------------------------------------------------------------------------
# perceptual distance over supplied stacks
# ---------------------------------------------------------------------------

@dataclass
class StackLayer:
    features: Tensor  # [C_l, H_l, W_l]
    weight: float

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("layer weight must be non-negative")
        if len(self.features.shape) != 3:
            raise ValueError(f"stack layer must be [C,H,W], got {self.features.shape}")


@dataclass
class PerceptualStack:
    layers: list[StackLayer] = field(default_factory=list)
    normalized: bool = False


def normalize_stack(stack: PerceptualStack) -> PerceptualStack:
    """Unit-normalize every location's channel vector in every layer."""
    out = []
    for layer in stack.layers:
        data = layer.features.data
        norms = np.maximum(np.linalg.norm(data, axis=0), COSINE_EPS)
        out.append(StackLayer(Tensor(data / norms), layer.weight))
    return PerceptualStack(out, normalized=True)


def lpips_distance(a: PerceptualStack, b: PerceptualStack) -> float:
    """Weighted sum over layers of the mean squared distance between
    unit-normalized channel vectors."""
    if not (a.normalized and b.normalized):
        raise ValueError("perceptual stacks must be normalized")
    if len(a.layers) != len(b.layers):
        raise ValueError(f"layer count mismatch: {len(a.layers)} vs {len(b.layers)}")
    total = 0.0
    for i, (la, lb) in enumerate(zip(a.layers, b.layers)):
        if la.features.shape != lb.features.shape:
            raise ValueError(f"layer {i} shape mismatch: "
                             f"{la.features.shape} vs {lb.features.shape}")
        if la.weight != lb.weight:
            raise ValueError(f"layer {i} weight mismatch: {la.weight} vs {lb.weight}")
        diff = la.features.data.astype(np.float64) - lb.features.data.astype(np.float64)
        total += la.weight * float(np.mean(np.sum(diff * diff, axis=0)))
    return total


def save_perceptual_stack(stack: PerceptualStack, dirpath) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    meta = {"format": "featprobe-perceptual-stack", "normalized": stack.normalized,
            "layers": []}
    for i, layer in enumerate(stack.layers):
        fname = f"layer{i:02d}.npy"
        save_tensor(layer.features, dirpath / fname)
        meta["layers"].append({"file": fname, "weight": layer.weight})
    with open(dirpath / "stack.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_perceptual_stack(dirpath) -> PerceptualStack:
    dirpath = Path(dirpath)
    with open(dirpath / "stack.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != "featprobe-perceptual-stack":
        raise ValueError(f"{dirpath}: not a perceptual stack")
    layers = [StackLayer(load_tensor(dirpath / item["file"]), item["weight"])
              for item in meta["layers"]]
    return PerceptualStack(layers, normalized=meta["normalized"])


# ---------------------------------------------------------------------------
# classifier head and semantic metrics
# ---------------------------------------------------------------------------

@dataclass
class ClassifierHead:
    """Frozen linear classification head: GAP -> layernorm -> affine -> softmax."""

    gamma: Tensor  # [C]
    beta: Tensor  # [C]
    weights: Tensor  # [num_classes, C]
    bias: Tensor  # [num_classes]

    def __post_init__(self):
        c = self.gamma.shape[0]
        n = self.weights.shape[0]
        if n < 2:
            raise ValueError("classifier head needs at least 2 classes")
        if self.beta.shape != (c,) or self.weights.shape != (n, c) \
                or self.bias.shape != (n,):
            raise ValueError("inconsistent head parameter shapes")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]


def classify(head: ClassifierHead, f: FeatureMap) -> np.ndarray:
    """Class probability vector for one feature map (sums to 1 within 1e-6)."""
    if f.channels != head.channels:
        raise ValueError(f"feature has {f.channels} channels, head expects "
                         f"{head.channels}")
    pooled = f.tensor.data.astype(np.float64).mean(axis=(1, 2))
    mu = pooled.mean()
    var = pooled.var()
    normed = (pooled - mu) / np.sqrt(var + LAYERNORM_EPS)
    normed = normed * head.gamma.data + head.beta.data
    logits = head.weights.data.astype(np.float64) @ normed + head.bias.data
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in natural log; bounded by ln 2."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def semantic_metrics(head: ClassifierHead, mapped: list[FeatureMap],
                     target: list[FeatureMap],
                     labels: list[int] | None = None) -> dict:
    """Top-1 accuracy (if labels given), prediction agreement, and mean JSD."""
    if len(mapped) == 0 or len(mapped) != len(target):
        raise ValueError("batches must be non-empty and aligned")
    if labels is not None and len(labels) != len(mapped):
        raise ValueError("labels must align with the batch")
    agree = 0
    correct = 0
    jsd_sum = 0.0
    for i, (fm, ft) in enumerate(zip(mapped, target)):
        pm = classify(head, fm)
        pt = classify(head, ft)
        am, at = int(np.argmax(pm)), int(np.argmax(pt))
        agree += int(am == at)
        if labels is not None:
            correct += int(am == labels[i])
        jsd_sum += jsd(pm, pt)
    n = len(mapped)
    result = {"agreement": agree / n, "jsd_mean": jsd_sum / n}
    if labels is not None:
        result["top1_accuracy"] = correct / n
    return result


def save_classifier_head(head: ClassifierHead, dirpath) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    files = {"gamma": head.gamma, "beta": head.beta, "weights": head.weights,
             "bias": head.bias}
    for tag, tensor in files.items():
        save_tensor(tensor, dirpath / f"{tag}.npy")
    meta = {"format": "featprobe-classifier-head", "channels": head.channels,
            "num_classes": head.num_classes,
            "parameters": {tag: f"{tag}.npy" for tag in files}}
    with open(dirpath / "head.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_classifier_head(dirpath) -> ClassifierHead:
    dirpath = Path(dirpath)
    with open(dirpath / "head.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != "featprobe-classifier-head":
        raise ValueError(f"{dirpath}: not a classifier head bundle")
    loaded = {tag: load_tensor(dirpath / fname)
              for tag, fname in meta["parameters"].items()}
    return ClassifierHead(loaded["gamma"], loaded["beta"], loaded["weights"],
                          loaded["bias"])
