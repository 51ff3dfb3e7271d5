"""Backbone construction and stage feature taps.

Two backbones are supported, standing in for the convolutional and
transformer design families:

* ``convnext`` (torchvision ``convnext_base``), input 288x288, four stage
  taps feat0..feat3 taken at the output of each stage block (before the
  next downsampling), shapes 128x72x72 / 256x36x36 / 512x18x18 / 1024x9x9;
* ``swinv2`` (torchvision ``swin_v2_b``), input 384x384, one tap
  ``swin_last`` after the final norm, before pooling, shape 1024x12x12.

Pretrained weights require network access to the torchvision hub; when
they cannot be fetched the caller may opt into randomly initialized
weights, and the provenance is recorded in every manifest this package
writes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

CONVNEXT_STAGES = {"feat0": 1, "feat1": 3, "feat2": 5, "feat3": 7}

STAGE_SHAPES = {
    ("convnext", "feat0"): (128, 72, 72),
    ("convnext", "feat1"): (256, 36, 36),
    ("convnext", "feat2"): (512, 18, 18),
    ("convnext", "feat3"): (1024, 9, 9),
    ("swinv2", "swin_last"): (1024, 12, 12),
}

DEFAULT_RESOLUTION = {"convnext": 288, "swinv2": 384}

MODEL_IDS = {
    "convnext": "torchvision/convnext_base",
    "swinv2": "torchvision/swin_v2_b",
}


class WeightsUnavailableError(RuntimeError):
    """Pretrained weights could not be fetched (offline or bad cache)."""


@dataclass
class Backbone:
    name: str
    model: torch.nn.Module
    weights: str  # "pretrained" | "random-init"
    tap_point: str

    @property
    def model_id(self) -> str:
        return MODEL_IDS[self.name]


def _build(name: str, pretrained: bool, num_classes: int | None):
    from torchvision.models import (
        ConvNeXt_Base_Weights,
        Swin_V2_B_Weights,
        convnext_base,
        swin_v2_b,
    )

    kwargs = {}
    if num_classes is not None:
        kwargs["num_classes"] = num_classes
    if name == "convnext":
        ctor, weights = convnext_base, ConvNeXt_Base_Weights.IMAGENET1K_V1
    elif name == "swinv2":
        ctor, weights = swin_v2_b, Swin_V2_B_Weights.IMAGENET1K_V1
    else:
        raise ValueError(f"unknown backbone {name!r} (expected convnext or swinv2)")
    if pretrained and num_classes is not None:
        raise ValueError("a custom class count needs --checkpoint, not hub weights")
    if pretrained:
        try:
            return ctor(weights=weights)
        except Exception as exc:
            raise WeightsUnavailableError(
                f"could not fetch pretrained weights for {name}: {exc}"
            ) from exc
    return ctor(weights=None, **kwargs)


def load_backbone(name: str, pretrained: bool = True,
                  checkpoint: str | None = None,
                  num_classes: int | None = None) -> Backbone:
    """Build a backbone in eval mode.

    ``checkpoint`` loads a local state dict (e.g. a fine-tuned classifier
    head) on top of a randomly initialized architecture, so it works
    offline.
    """
    if checkpoint is not None:
        model = _build(name, pretrained=False, num_classes=num_classes)
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        weights = f"checkpoint:{checkpoint}"
    else:
        model = _build(name, pretrained=pretrained, num_classes=num_classes)
        weights = "pretrained" if pretrained else "random-init"
    model.eval()
    tap = ("stage-output-pre-downsample" if name == "convnext"
           else "post-norm-pre-pool")
    return Backbone(name, model, weights, tap)


@torch.no_grad()
def extract_stage_features(backbone: Backbone, batch: torch.Tensor,
                           stages: list[str]) -> dict[str, torch.Tensor]:
    """Run one preprocessed [B, 3, H, W] batch, returning [B, C, H, W] float32
    feature maps per requested stage."""
    out: dict[str, torch.Tensor] = {}
    if backbone.name == "convnext":
        unknown = set(stages) - set(CONVNEXT_STAGES)
        if unknown:
            raise ValueError(f"convnext has no stages {sorted(unknown)}")
        want = {CONVNEXT_STAGES[s]: s for s in stages}
        x = batch
        for i, block in enumerate(backbone.model.features):
            x = block(x)
            if i in want:
                out[want[i]] = x.float()
        return out
    if stages != ["swin_last"]:
        raise ValueError(f"swinv2 exposes only swin_last, got {stages}")
    x = backbone.model.features(batch)
    x = backbone.model.norm(x)
    out["swin_last"] = x.permute(0, 3, 1, 2).contiguous().float()
    return out


def head_parameters(backbone: Backbone) -> dict[str, torch.Tensor]:
    """Layernorm (gamma, beta) and linear (weights, bias) of the classifier."""
    model = backbone.model
    if backbone.name == "convnext":
        norm, linear = model.classifier[0], model.classifier[2]
    else:
        norm, linear = model.norm, model.head
    return {
        "gamma": norm.weight.detach(),
        "beta": norm.bias.detach(),
        "weights": linear.weight.detach(),
        "bias": linear.bias.detach(),
    }
