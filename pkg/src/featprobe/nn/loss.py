"""The mapping training objective and its configuration.

The loss is a weighted sum of feature-space MSE and a cosine term: cosine
similarity is computed per spatial location, reduced to a per-sample median
(robust to outlier locations), averaged over the batch, and subtracted from
one so that perfect alignment scores zero. Default weights are 0.3 for the
MSE term and 0.7 for the cosine term.
"""

from __future__ import annotations


from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var

COSINE_EPS = 1e-8


@dataclass
class TrainConfig:
    lambda_mse: float = 0.3
    lambda_cos: float = 0.7
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    mode: str = "train"

    def __post_init__(self):
        if self.lambda_mse < 0 or self.lambda_cos < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_mse + self.lambda_cos <= 0:
            raise ValueError("at least one loss weight must be positive")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be train or eval, got {self.mode!r}")


def batch_cosine(pred: Var, target: np.ndarray) -> Var:
    """Per-location cosine of [B, C, H, W] batches -> [B, H*W]."""
    b, c, h, w = pred.data.shape
    p = ad.reshape(pred, (b, c, h * w))
    t = target.reshape(b, c, h * w)
    dot = ad.sum_(ad.mul(p, t), axis=1)
    p_norm = ad.sqrt(ad.sum_(ad.mul(p, p), axis=1))
    t_norm = np.linalg.norm(t, axis=1)
    denom = ad.clip_min(ad.mul(p_norm, t_norm), COSINE_EPS)
    return ad.div(dot, denom)


def mapping_loss_terms(pred: Var, target: np.ndarray, cfg: TrainConfig):
    """Return (loss, mse, cosine_loss) Vars for a [B, C, H, W] batch."""
    if pred.data.shape != target.shape:
        raise ad.UsageError(
            f"pred shape {pred.data.shape} != target shape {target.shape}"
        )
    if pred.data.ndim != 4:
        raise ad.UsageError(f"expected [B, C, H, W], got {pred.data.shape}")
    diff = ad.sub(pred, target)
    mse = ad.mean(ad.mul(diff, diff))
    cos = batch_cosine(pred, target)
    med = ad.median_lastaxis(cos)
    one = Var(np.asarray(1.0, dtype=med.data.dtype))
    cos_loss = ad.sub(one, ad.mean(med))
    loss = ad.add(
        ad.mul(mse, np.asarray(cfg.lambda_mse, mse.data.dtype)),
        ad.mul(cos_loss, np.asarray(cfg.lambda_cos, mse.data.dtype)),
    )
    return loss, mse, cos_loss


def mapping_loss(pred: Var, target: np.ndarray, cfg: TrainConfig) -> Var:
    """Differentiable training loss; never NaN (zero norms are eps-guarded)."""
    return mapping_loss_terms(pred, target, cfg)[0]
