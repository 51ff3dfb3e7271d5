"""Export backbone features, classifier heads, and perceptual stacks in the
featprobe core's file formats.

Everything crossing to the core is a file: NPY v1.0 float32 tensors, pair
manifests (``entries`` + ``splits``), classifier-head bundles
(``head.json`` + one NPY per parameter), and perceptual stacks
(``stack.json`` + one NPY per layer). Provenance that does not fit the
closed manifest schema (model id, weight source, tap point, pixel
normalization) goes into an ``export.json`` sidecar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbones import (
    DEFAULT_RESOLUTION,
    STAGE_SHAPES,
    Backbone,
    extract_stage_features,
    head_parameters,
    load_backbone,
)
from .preprocess import IMAGENET_MEAN, IMAGENET_STD, eval_transform, load_rgb

ALEXNET_RELU_TAPS = (1, 4, 7, 9, 11)


@dataclass
class ExportJob:
    backbone: str
    stages: list[str]
    images: list[Path]
    out_dir: Path
    resolution: int | None = None
    pretrained: bool = True
    batch_size: int = 4
    skipped: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if self.resolution is None:
            self.resolution = DEFAULT_RESOLUTION[self.backbone]
        for stage in self.stages:
            if (self.backbone, stage) not in STAGE_SHAPES:
                raise ValueError(f"{self.backbone} has no stage {stage!r}")


def save_npy(arr: np.ndarray, path: Path) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    np.save(path, arr)  # NPY v1.0 for plain float32 arrays


def provenance(backbone: Backbone, resolution: int) -> dict:
    return {
        "model_id": backbone.model_id,
        "weights": backbone.weights,
        "tap_point": backbone.tap_point,
        "input_resolution": resolution,
        "pixel_normalization": {
            "kind": "imagenet",
            "mean": list(IMAGENET_MEAN),
            "std": list(IMAGENET_STD),
        },
    }


def _preprocess_all(job: ExportJob):
    """Per-image preprocessing with a skip report; inference stays batched."""
    ready = []
    for path in job.images:
        try:
            ready.append((Path(path), eval_transform(load_rgb(path), job.resolution)))
        except Exception as exc:
            job.skipped.append({"file": str(path), "reason": str(exc)})
    return ready


def export_features(job: ExportJob, backbone: Backbone | None = None) -> dict:
    """Export [C, H, W] float32 NPYs per image and stage.

    Returns an index mapping image stem -> stage -> feature file. Unreadable
    images are skipped and reported; the job continues.
    """
    if backbone is None:
        backbone = load_backbone(job.backbone, pretrained=job.pretrained)
    job.out_dir.mkdir(parents=True, exist_ok=True)
    ready = _preprocess_all(job)
    index: dict[str, dict[str, str]] = {}
    for start in range(0, len(ready), job.batch_size):
        chunk = ready[start : start + job.batch_size]
        batch = torch.stack([t for _, t in chunk])
        feats = extract_stage_features(backbone, batch, job.stages)
        for stage, tensor in feats.items():
            expected = STAGE_SHAPES[(job.backbone, stage)]
            got = tuple(tensor.shape[1:])
            if got != expected:
                raise RuntimeError(f"{job.backbone}/{stage}: shape {got}, "
                                   f"expected {expected}")
            for (path, _), fmap in zip(chunk, tensor):
                name = f"{path.stem}__{stage}.npy"
                save_npy(fmap.numpy(), job.out_dir / name)
                index.setdefault(path.stem, {})[stage] = name
    doc = {"index": index, "skipped": job.skipped, "stages": job.stages,
           **provenance(backbone, job.resolution)}
    with open(job.out_dir / "export.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return index


def assign_splits(sample_ids: list[str], train_frac: float, val_frac: float,
                  seed: int) -> dict[str, str]:
    order = list(sample_ids)
    np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 3]))) \
        .shuffle(order)
    n_train = int(round(train_frac * len(order)))
    n_val = int(round(val_frac * len(order)))
    splits = {}
    for i, sid in enumerate(order):
        splits[sid] = "train" if i < n_train else (
            "val" if i < n_train + n_val else "test")
    return splits


def build_pairs(orig_dir, manip_dir, job: ExportJob, manipulation_id: str,
                train_frac: float = 0.7, val_frac: float = 0.15,
                seed: int = 0, labels: dict[str, int] | None = None) -> list[Path]:
    """Export aligned original/manipulated feature pairs plus one pair
    manifest per stage (features of different stages have different shapes).

    Images are matched by filename stem across the two directories.
    """
    orig_dir, manip_dir = Path(orig_dir), Path(manip_dir)
    originals = {p.stem: p for p in sorted(orig_dir.iterdir()) if p.is_file()}
    manips = {p.stem: p for p in sorted(manip_dir.iterdir()) if p.is_file()}
    stems = sorted(set(originals) & set(manips))
    if not stems:
        raise ValueError("no filename stems shared between the two directories")
    backbone = load_backbone(job.backbone, pretrained=job.pretrained)
    job.out_dir.mkdir(parents=True, exist_ok=True)

    orig_job = ExportJob(job.backbone, job.stages,
                         [originals[s] for s in stems],
                         job.out_dir / "orig", job.resolution, job.pretrained,
                         job.batch_size)
    manip_job = ExportJob(job.backbone, job.stages,
                          [manips[s] for s in stems],
                          job.out_dir / "manip", job.resolution, job.pretrained,
                          job.batch_size)
    orig_index = export_features(orig_job, backbone)
    manip_index = export_features(manip_job, backbone)
    job.skipped = orig_job.skipped + manip_job.skipped

    paired = [s for s in stems if s in orig_index and s in manip_index]
    splits = assign_splits(paired, train_frac, val_frac, seed)
    manifests = []
    for stage in job.stages:
        entries = []
        for stem in paired:
            entry = {
                "original_feature_path": f"orig/{orig_index[stem][stage]}",
                "target_feature_path": f"manip/{manip_index[stem][stage]}",
                "manipulation_id": manipulation_id,
                "sample_id": stem,
                "original_image_path": str(originals[stem].resolve()),
                "manipulated_image_path": str(manips[stem].resolve()),
            }
            if labels and stem in labels:
                entry["label"] = int(labels[stem])
            entries.append(entry)
        doc = {"entries": entries, "splits": splits}
        path = job.out_dir / f"manifest_{stage}.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        manifests.append(path)
    return manifests


def export_head(backbone_name: str, out_dir, pretrained: bool = True,
                checkpoint: str | None = None,
                num_classes: int | None = None) -> Path:
    """Write a classifier-head bundle (layernorm + linear) the core can load."""
    backbone = load_backbone(backbone_name, pretrained=pretrained,
                             checkpoint=checkpoint, num_classes=num_classes)
    params = {k: v.numpy().astype(np.float32) for k, v in
              head_parameters(backbone).items()}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for tag, arr in params.items():
        save_npy(arr, out_dir / f"{tag}.npy")
    meta = {
        "format": "featprobe-classifier-head",
        "channels": int(params["gamma"].shape[0]),
        "num_classes": int(params["weights"].shape[0]),
        "parameters": {tag: f"{tag}.npy" for tag in params},
        "model_id": backbone.model_id,
        "weights": backbone.weights,
        # swin normalizes per token before pooling; the core pools first
        "head_convention": ("gap-then-norm (exact)" if backbone_name == "convnext"
                            else "gap-then-norm (backbone norms pre-pool)"),
    }
    path = out_dir / "head.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


@torch.no_grad()
def export_perceptual_stack(image_path, out_dir, pretrained: bool = True,
                            resolution: int = 224,
                            model: torch.nn.Module | None = None) -> Path:
    """Write the unit-normalized perceptual feature stack of one image.

    Layers are the five post-ReLU AlexNet feature maps; per-layer weights
    are uniform 1.0 (the learned reweighting is not obtainable offline) and
    recorded as such.
    """
    if model is None:
        from torchvision.models import AlexNet_Weights, alexnet

        if pretrained:
            try:
                model = alexnet(weights=AlexNet_Weights.IMAGENET1K_V1)
            except Exception as exc:
                from .backbones import WeightsUnavailableError

                raise WeightsUnavailableError(
                    f"could not fetch alexnet weights: {exc}") from exc
        else:
            model = alexnet(weights=None)
        model.eval()
    x = eval_transform(load_rgb(image_path), resolution)[None]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, layer in enumerate(model.features):
        x = layer(x)
        if i in ALEXNET_RELU_TAPS:
            fmap = x[0].float().numpy()
            norms = np.linalg.norm(fmap, axis=0)
            fmap = fmap / np.maximum(norms, 1e-8)
            fname = f"layer{len(layers):02d}.npy"
            save_npy(fmap, out_dir / fname)
            layers.append({"file": fname, "weight": 1.0})
    meta = {"format": "featprobe-perceptual-stack", "normalized": True,
            "layers": layers, "weights_source": "uniform-1.0",
            "pixel_normalization": "imagenet", "input_resolution": resolution}
    path = out_dir / "stack.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
