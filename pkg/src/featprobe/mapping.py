"""The four mapping families, spatial reordering, normalization handling,
and the training loop.

Families (input and output channel counts always match the feature dim):

* ``linear``      one shared affine map applied independently at each location
* ``mlp``         one 512-wide hidden layer with ReLU and dropout, per location
* ``cnn``         two 3x3 convolutions (hidden 512) with batchnorm/ReLU/dropout2d
* ``transformer`` input projection to width 512, learned positional embedding,
                  four 8-head encoder layers, output projection, on the
                  flattened H*W token sequence

For global geometric transforms the feature-vector positions can be
reordered before the local mapping (``pre_permutation``), which aligns each
target vector with its relevant input vector. The permutation handedness is
identical to the image rotations (clockwise); a conformance test pins this.

Feature normalization: when ``normalize_io`` is set, each location's channel
vector is scaled to unit norm before the network and the prediction is
rescaled by the (permuted) input's stored norms afterwards, so outputs
always live in the original feature space. The stage policy normalizes
feat0..feat2 and leaves feat3/swin_last raw.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .nn import autodiff as ad
from .nn.layers import Context
from .tensorio import FeatureMap, PairManifest, Tensor, load_tensor, save_tensor

NORM_EPS = 1e-8

PERMUTATION_KINDS = ("rot90", "rot180", "rot270", "mirror_h", "mirror_v")

# rng stream tags so shuffling and dropout never share a stream
_SHUFFLE_TAG = 1
_DROPOUT_TAG = 2


def default_normalize_io(stage: str) -> bool:
    """Stage policy: early stages train on normalized vectors, final ones raw."""
    return stage in ("feat0", "feat1", "feat2")


@dataclass(frozen=True)
class SpatialPermutation:
    """A bijection on grid positions mirroring a global geometric transform."""

    kind: str
    grid: tuple[int, int]

    def __post_init__(self):
        if self.kind not in PERMUTATION_KINDS:
            raise ValueError(f"unknown permutation kind {self.kind!r}")

    @property
    def output_grid(self) -> tuple[int, int]:
        h, w = self.grid
        return (w, h) if self.kind in ("rot90", "rot270") else (h, w)

    def apply(self, a: np.ndarray) -> np.ndarray:
        """Permute the trailing (H, W) axes; channel vectors are only moved."""
        if a.shape[-2:] != self.grid:
            raise ValueError(f"grid mismatch: array {a.shape[-2:]}, permutation {self.grid}")
        if self.kind == "rot90":
            out = np.rot90(a, k=-1, axes=(-2, -1))
        elif self.kind == "rot180":
            out = np.rot90(a, k=2, axes=(-2, -1))
        elif self.kind == "rot270":
            out = np.rot90(a, k=1, axes=(-2, -1))
        elif self.kind == "mirror_h":
            out = a[..., ::-1]
        else:  # mirror_v
            out = a[..., ::-1, :]
        return np.ascontiguousarray(out)


def permute_features(f: FeatureMap, p: SpatialPermutation) -> FeatureMap:
    """Reorder feature-vector positions; values are moved, never modified."""
    data = p.apply(f.tensor.data)
    norms = Tensor(p.apply(f.norms.data)) if f.norms is not None else None
    return FeatureMap(Tensor(data), f.backbone, f.stage, f.normalized, norms)


# ---------------------------------------------------------------------------
# per-location normalization
# ---------------------------------------------------------------------------

def location_norms(x: np.ndarray) -> np.ndarray:
    """Euclidean norm of every (h, w) channel vector of a [..., C, H, W] array."""
    return np.linalg.norm(x, axis=-3)


def normalize_locations(f: FeatureMap) -> FeatureMap:
    """Scale each location to unit norm, storing the original norms.

    Zero-norm vectors are scaled by 1/eps (they stay zero), flagged with a
    warning, and leave the result marked unnormalized since unit norm can't
    hold there. Denormalization restores them exactly either way.
    """
    import warnings

    data = f.tensor.data
    norms = location_norms(data)
    all_positive = bool(np.all(norms > 0))
    if not all_positive:
        warnings.warn("zero-norm feature locations scaled by 1/eps (left at zero)")
    scaled = data / np.maximum(norms, NORM_EPS)
    return FeatureMap(Tensor(scaled), f.backbone, f.stage, all_positive, Tensor(norms))


def denormalize_locations(f: FeatureMap) -> FeatureMap:
    """Inverse of normalize_locations; requires the stored norms."""
    if f.norms is None:
        raise ValueError("denormalize requires stored per-location norms")
    data = f.tensor.data * f.norms.data
    return FeatureMap(Tensor(data), f.backbone, f.stage, False, None)


# ---------------------------------------------------------------------------
# model families
# ---------------------------------------------------------------------------

@dataclass
class LayerSpec:
    kind: str
    dims: dict = field(default_factory=dict)


class MappingModel:
    """One parameterized mapping family plus optional reordering/normalization."""

    FAMILIES = ("linear", "mlp", "cnn", "transformer")

    def __init__(self, family: str, channels: int, grid: tuple[int, int], *,
                 seed: int = 0, normalize_io: bool = False,
                 pre_permutation: SpatialPermutation | None = None,
                 identity_init: bool = False, hidden: int = 512, heads: int = 8,
                 encoder_layers: int = 4, ffn_dim: int = 2048,
                 dropout: float | None = None, dtype=np.float32):
        if family not in self.FAMILIES:
            raise ValueError(f"unknown family {family!r}")
        if pre_permutation is not None and pre_permutation.grid != tuple(grid):
            raise ValueError("pre_permutation grid must match the model grid")
        self.family = family
        self.channels = channels
        self.grid = tuple(grid)
        self.seed = seed
        self.normalize_io = normalize_io
        self.pre_permutation = pre_permutation
        self.identity_init = identity_init
        self.hidden = hidden
        self.heads = heads
        self.encoder_layers = encoder_layers
        self.ffn_dim = ffn_dim
        self.dropout = dropout if dropout is not None else (
            0.1 if family == "transformer" else 0.2)
        self.dtype = np.dtype(dtype)
        self._build(np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed))))

    def _build(self, rng):
        c, d = self.channels, self.hidden
        if self.family == "linear":
            self.net = nn.Sequential(
                nn.Dense(c, c, rng, identity=self.identity_init, dtype=self.dtype,
                         name="net.dense"))
        elif self.family == "mlp":
            self.net = nn.Sequential(
                nn.Dense(c, d, rng, dtype=self.dtype, name="net.fc1"),
                nn.ReLU(),
                nn.Dropout(self.dropout),
                nn.Dense(d, c, rng, dtype=self.dtype, name="net.fc2"))
        elif self.family == "cnn":
            self.net = nn.Sequential(
                nn.Conv3x3(c, d, rng, dtype=self.dtype, name="net.conv1"),
                nn.BatchNorm2d(d, dtype=self.dtype, name="net.bn"),
                nn.ReLU(),
                nn.Dropout2d(self.dropout),
                nn.Conv3x3(d, c, rng, dtype=self.dtype, name="net.conv2"))
        else:
            h, w = self.effective_grid
            self.in_proj = nn.Dense(c, d, rng, dtype=self.dtype, name="net.in_proj")
            self.pos = nn.PositionalEmbedding(h * w, d, rng, dtype=self.dtype,
                                              name="net.pos")
            self.blocks = [
                nn.TransformerEncoderLayer(d, self.heads, self.ffn_dim, self.dropout,
                                           rng, dtype=self.dtype, name=f"net.enc{i}")
                for i in range(self.encoder_layers)
            ]
            self.out_proj = nn.Dense(d, c, rng, dtype=self.dtype, name="net.out_proj")
            self.net = None

    @property
    def effective_grid(self) -> tuple[int, int]:
        """Grid seen by the network (transposed when the permutation rotates)."""
        return self.pre_permutation.output_grid if self.pre_permutation else self.grid

    def parameters(self) -> list[ad.Parameter]:
        if self.family == "transformer":
            params = self.in_proj.parameters() + self.pos.parameters()
            for blk in self.blocks:
                params += blk.parameters()
            return params + self.out_proj.parameters()
        return self.net.parameters()

    def layer_specs(self) -> list[LayerSpec]:
        c, d = self.channels, self.hidden
        if self.family == "linear":
            return [LayerSpec("dense", {"in": c, "out": c})]
        if self.family == "mlp":
            return [LayerSpec("dense", {"in": c, "out": d}), LayerSpec("relu"),
                    LayerSpec("dropout", {"p": self.dropout}),
                    LayerSpec("dense", {"in": d, "out": c})]
        if self.family == "cnn":
            return [LayerSpec("conv3x3", {"in": c, "out": d, "pad": 1}),
                    LayerSpec("batchnorm2d", {"channels": d}), LayerSpec("relu"),
                    LayerSpec("dropout", {"p": self.dropout, "kind": "2d"}),
                    LayerSpec("conv3x3", {"in": d, "out": c, "pad": 1})]
        h, w = self.effective_grid
        return [LayerSpec("dense", {"in": c, "out": d}),
                LayerSpec("positional_embedding", {"tokens": h * w, "dim": d}),
                *[LayerSpec("multihead_attention",
                            {"heads": self.heads, "dim": d, "ffn": self.ffn_dim,
                             "dropout": self.dropout})
                  for _ in range(self.encoder_layers)],
                LayerSpec("dense", {"in": d, "out": c})]

    # -- forward ------------------------------------------------------------

    def forward_network(self, x: ad.Var, ctx: Context) -> ad.Var:
        """Run the bare network on a [B, C, H, W] Var (no permute/normalize)."""
        b, c, h, w = x.data.shape
        if c != self.channels:
            raise ad.UsageError(f"model expects {self.channels} channels, got {c}")
        if self.family in ("linear", "mlp"):
            tokens = ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (b * h * w, c))
            y = self.net.forward(tokens, ctx)
            return ad.transpose(ad.reshape(y, (b, h, w, c)), (0, 3, 1, 2))
        if self.family == "cnn":
            return self.net.forward(x, ctx)
        if (h, w) != self.effective_grid:
            raise ad.UsageError(
                f"transformer was built for grid {self.effective_grid}, got {(h, w)}")
        tokens = ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (b, h * w, c))
        z = self.pos.forward(self.in_proj.forward(tokens, ctx), ctx)
        for blk in self.blocks:
            z = blk.forward(z, ctx)
        y = self.out_proj.forward(z, ctx)
        return ad.transpose(ad.reshape(y, (b, h, w, c)), (0, 3, 1, 2))

    def map_batch(self, x: np.ndarray, train: bool = False,
                  rng: np.random.Generator | None = None) -> np.ndarray:
        """Full pipeline on a [B, C, H, W] array: permute, normalize, net, denormalize."""
        if self.pre_permutation is not None:
            x = self.pre_permutation.apply(x)
        norms = None
        if self.normalize_io:
            norms = location_norms(x)
            x = x / np.maximum(norms, NORM_EPS)[:, None]
        y = self.forward_network(ad.Var(x.astype(self.dtype, copy=False)),
                                 Context(train=train, rng=rng)).data
        if norms is not None:
            y = y * norms[:, None]
        return y


def map_features(model: MappingModel, f: FeatureMap, mode: str = "eval") -> FeatureMap:
    """Apply a mapping model to one feature map, returning a map in the
    original feature space."""
    if f.channels != model.channels:
        raise ad.UsageError(
            f"feature map has {f.channels} channels, model expects {model.channels}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    rng = None
    if mode == "train":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(model.seed)))
    y = model.map_batch(f.tensor.data[None], train=(mode == "train"), rng=rng)[0]
    return FeatureMap(Tensor(y), f.backbone, f.stage, False, None)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float | None
    train_mse: float
    train_cosloss: float


def _epoch_rng(seed: int, epoch: int, tag: int, extra: int = 0) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, epoch, tag, extra])))


def evaluate_loss(model: MappingModel, inputs: np.ndarray, targets: np.ndarray,
                  cfg: nn.TrainConfig) -> float:
    """Eval-mode loss over a dataset (already permuted/normalized)."""
    total, count = 0.0, 0
    for start in range(0, len(inputs), cfg.batch_size):
        xb = inputs[start : start + cfg.batch_size]
        yb = targets[start : start + cfg.batch_size]
        pred = model.forward_network(ad.Var(xb), Context(train=False))
        loss = nn.mapping_loss(pred, yb, cfg)
        total += float(loss.data) * len(xb)
        count += len(xb)
    return total / count


def prepare_pairs(model: MappingModel, inputs: np.ndarray,
                  targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply the model's permutation/normalization to raw feature pairs."""
    x, y = inputs, targets
    if model.pre_permutation is not None:
        x = model.pre_permutation.apply(x)
    if model.normalize_io:
        x = x / np.maximum(location_norms(x), NORM_EPS)[:, None]
        y = y / np.maximum(location_norms(y), NORM_EPS)[:, None]
    return x.astype(model.dtype, copy=False), y.astype(model.dtype, copy=False)


def train_on_arrays(model: MappingModel, train_x: np.ndarray, train_y: np.ndarray,
                    cfg: nn.TrainConfig, val_x: np.ndarray | None = None,
                    val_y: np.ndarray | None = None) -> list[EpochStats]:
    """Train on raw [N, C, H, W] pairs; returns per-epoch loss history.

    Shuffling and dropout draw from per-(seed, epoch, batch) PCG64 streams,
    so runs are bitwise reproducible on one thread.
    """
    if len(train_x) == 0:
        raise ValueError("empty train split")
    if train_x.shape != train_y.shape:
        raise ValueError(f"pair shape mismatch {train_x.shape} vs {train_y.shape}")
    train_x, train_y = prepare_pairs(model, train_x, train_y)
    if val_x is not None and len(val_x):
        val_x, val_y = prepare_pairs(model, val_x, val_y)
    else:
        val_x = None
    opt = nn.AdamW(model.parameters(), lr=cfg.learning_rate,
                   weight_decay=cfg.weight_decay)
    history: list[EpochStats] = []
    n = len(train_x)
    for epoch in range(cfg.epochs):
        order = _epoch_rng(cfg.seed, epoch, _SHUFFLE_TAG).permutation(n)
        sum_loss = sum_mse = sum_cos = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            xb, yb = train_x[idx], train_y[idx]
            ctx = Context(train=True, rng=_epoch_rng(cfg.seed, epoch, _DROPOUT_TAG, bi))
            opt.zero_grad()
            pred = model.forward_network(ad.Var(xb), ctx)
            loss, mse, cosl = nn.mapping_loss_terms(pred, yb, cfg)
            ad.backward(loss)
            opt.step()
            sum_loss += float(loss.data) * len(idx)
            sum_mse += float(mse.data) * len(idx)
            sum_cos += float(cosl.data) * len(idx)
        val_loss = None
        if val_x is not None:
            # pairs are already prepared; bypass prepare_pairs in evaluate_loss
            total, count = 0.0, 0
            for start in range(0, len(val_x), cfg.batch_size):
                pred = model.forward_network(
                    ad.Var(val_x[start : start + cfg.batch_size]), Context(train=False))
                total += float(
                    nn.mapping_loss(pred, val_y[start : start + cfg.batch_size], cfg).data
                ) * len(val_x[start : start + cfg.batch_size])
                count += len(val_x[start : start + cfg.batch_size])
            val_loss = total / count
        history.append(EpochStats(epoch, sum_loss / n, val_loss, sum_mse / n,
                                  sum_cos / n))
    return history


def load_pair_arrays(manifest: PairManifest, split: str,
                     dtype="float32") -> tuple[np.ndarray, np.ndarray]:
    """Stack a split's feature pairs into [N, C, H, W] arrays."""
    entries = manifest.split_entries(split)
    if not entries:
        raise ValueError(f"empty split: {split!r}")
    xs, ys = [], []
    shape = None
    for e in entries:
        x = load_tensor(manifest.resolve(e.original_feature_path), dtype).data
        y = load_tensor(manifest.resolve(e.target_feature_path), dtype).data
        if shape is None:
            shape = x.shape
        if x.shape != shape or y.shape != shape:
            raise ValueError(
                f"shape heterogeneity in split {split!r}: {x.shape}/{y.shape} vs {shape}")
        xs.append(x)
        ys.append(y)
    return np.stack(xs), np.stack(ys)


def train_mapping(family: str, manifest: PairManifest, cfg: nn.TrainConfig, *,
                  stage: str = "feat3", normalize_io: bool | None = None,
                  pre_permutation: SpatialPermutation | None = None,
                  identity_init: bool = False,
                  **hyper) -> tuple[MappingModel, list[EpochStats]]:
    """Train one mapping family on a manifest's train split."""
    train_x, train_y = load_pair_arrays(manifest, "train")
    try:
        val_x, val_y = load_pair_arrays(manifest, "val")
    except ValueError:
        val_x = val_y = None
    channels, h, w = train_x.shape[1:]
    if normalize_io is None:
        normalize_io = default_normalize_io(stage)
    model = MappingModel(family, channels, (h, w), seed=cfg.seed,
                         normalize_io=normalize_io, pre_permutation=pre_permutation,
                         identity_init=identity_init, **hyper)
    history = train_on_arrays(model, train_x, train_y, cfg, val_x, val_y)
    return model, history


def write_history_csv(history: list[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "train_mse",
                         "train_cosloss"])
        for row in history:
            writer.writerow([row.epoch, repr(row.train_loss),
                             "" if row.val_loss is None else repr(row.val_loss),
                             repr(row.train_mse), repr(row.train_cosloss)])


# ---------------------------------------------------------------------------
# model bundles (meta.json + one NPY per parameter)
# ---------------------------------------------------------------------------

def save_model_bundle(model: MappingModel, dirpath, train_config: dict | None = None,
                      final_metrics: dict | None = None,
                      extra_meta: dict | None = None) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    param_files = {}
    for i, p in enumerate(params):
        fname = f"param{i:03d}.npy"
        save_tensor(Tensor(np.asarray(p.data)), dirpath / fname)
        param_files[p.name] = fname
    buffers = {}
    if model.family == "cnn":
        bn = model.net.layers[1]
        for tag, arr in (("running_mean", bn.running_mean),
                         ("running_var", bn.running_var)):
            fname = f"buffer_{tag}.npy"
            save_tensor(Tensor(arr), dirpath / fname)
            buffers[tag] = fname
    meta = {
        "format": "featprobe-model-bundle",
        "family": model.family,
        "channels": model.channels,
        "grid": list(model.grid),
        "seed": model.seed,
        "normalize_io": model.normalize_io,
        "pre_permutation": model.pre_permutation.kind if model.pre_permutation else None,
        "identity_init": model.identity_init,
        "hyper": {"hidden": model.hidden, "heads": model.heads,
                  "encoder_layers": model.encoder_layers, "ffn_dim": model.ffn_dim,
                  "dropout": model.dropout},
        "layers": [{"kind": s.kind, "dims": s.dims} for s in model.layer_specs()],
        "parameters": param_files,
        "buffers": buffers,
        "train_config": train_config or {},
        "final_metrics": final_metrics or {},
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(dirpath / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model_bundle(dirpath) -> MappingModel:
    dirpath = Path(dirpath)
    with open(dirpath / "meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != "featprobe-model-bundle":
        raise ValueError(f"{dirpath}: not a model bundle")
    perm = None
    if meta["pre_permutation"]:
        perm = SpatialPermutation(meta["pre_permutation"], tuple(meta["grid"]))
    model = MappingModel(meta["family"], meta["channels"], tuple(meta["grid"]),
                         seed=meta["seed"], normalize_io=meta["normalize_io"],
                         pre_permutation=perm, identity_init=meta["identity_init"],
                         **meta["hyper"])
    by_name = {p.name: p for p in model.parameters()}
    if set(by_name) != set(meta["parameters"]):
        raise ValueError(f"{dirpath}: parameter names do not match the architecture")
    for name, fname in meta["parameters"].items():
        value = load_tensor(dirpath / fname).data
        if value.shape != by_name[name].data.shape:
            raise ValueError(f"{dirpath}: {name} has shape {value.shape}, "
                             f"expected {by_name[name].data.shape}")
        by_name[name].data = value.copy()
    if model.family == "cnn" and meta["buffers"]:
        bn = model.net.layers[1]
        bn.running_mean = load_tensor(dirpath / meta["buffers"]["running_mean"]).data.copy()
        bn.running_var = load_tensor(dirpath / meta["buffers"]["running_var"]).data.copy()
    return model
