"""Layers for the four mapping architectures.

Built on the :mod:`featprobe.nn.autodiff` primitives. Each layer exposes
``forward(x, ctx)`` where ``ctx`` carries the train/eval mode and, in train
mode, the RNG driving dropout. Dropout is the inverted kind (scaled at train
time, exact identity in eval mode); batchnorm normalizes with batch
statistics in train mode and with its running statistics in eval mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Var


@dataclass
class Context:
    """Per-forward execution context."""

    train: bool = False
    rng: np.random.Generator | None = None

    def require_rng(self) -> np.random.Generator:
        if self.rng is None:
            raise ad.UsageError("train-mode forward needs a seeded rng in the context")
        return self.rng


EVAL = Context(train=False)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Symmetric uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x: Var, ctx: Context) -> Var:
        raise NotImplementedError


class Dense(Layer):
    """Affine map on the last axis: y = x @ W.T + b, W is [out, in]."""

    def __init__(self, in_dim, out_dim, rng=None, identity=False, bias=True,
                 dtype=np.float32, name="dense"):
        if identity:
            if in_dim != out_dim:
                raise ValueError("identity init needs in_dim == out_dim")
            w = np.eye(out_dim, dtype=dtype)
        else:
            w = uniform_fan_in(rng, (out_dim, in_dim), in_dim, dtype)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = None
        if bias:
            b = np.zeros(out_dim, dtype=dtype) if identity else uniform_fan_in(
                rng, (out_dim,), in_dim, dtype)
            self.bias = Parameter(b, f"{name}.bias")

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, ctx):
        if x.data.shape[-1] != self.weight.data.shape[1]:
            raise ad.UsageError(
                f"dense expects last dim {self.weight.data.shape[1]}, got {x.data.shape}"
            )
        y = ad.matmul(x, ad.transpose(self.weight, (1, 0)))
        if self.bias is not None:
            y = ad.add(y, self.bias)
        return y


class ReLU(Layer):
    def forward(self, x, ctx):
        return ad.relu(x)


class Dropout(Layer):
    def __init__(self, p: float, name="dropout"):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout p must be in [0,1), got {p}")
        self.p = p
        self.name = name

    def forward(self, x, ctx):
        if not ctx.train or self.p == 0.0:
            return x
        keep = (ctx.require_rng().random(x.data.shape) >= self.p).astype(x.data.dtype)
        return ad.mul(x, keep / np.asarray(1.0 - self.p, dtype=x.data.dtype))


class Dropout2d(Layer):
    """Channel dropout for [B, C, H, W] maps: whole channels are zeroed."""

    def __init__(self, p: float, name="dropout2d"):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout p must be in [0,1), got {p}")
        self.p = p
        self.name = name

    def forward(self, x, ctx):
        if not ctx.train or self.p == 0.0:
            return x
        b, c = x.data.shape[:2]
        keep = (ctx.require_rng().random((b, c, 1, 1)) >= self.p).astype(x.data.dtype)
        return ad.mul(x, keep / np.asarray(1.0 - self.p, dtype=x.data.dtype))


class Conv3x3(Layer):
    """3x3 convolution, padding 1, on [B, C, H, W]."""

    def __init__(self, in_ch, out_ch, rng, dtype=np.float32, name="conv"):
        fan_in = in_ch * 9
        self.weight = Parameter(
            uniform_fan_in(rng, (out_ch, in_ch, 3, 3), fan_in, dtype), f"{name}.weight"
        )
        self.bias = Parameter(uniform_fan_in(rng, (out_ch,), fan_in, dtype), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, ctx):
        return ad.conv3x3(x, self.weight, self.bias)


class BatchNorm2d(Layer):
    """Batch normalization over (B, H, W) per channel; momentum 0.1, eps 1e-5."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32, name="bn"):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x, ctx):
        gamma = ad.reshape(self.gamma, (1, -1, 1, 1))
        beta = ad.reshape(self.beta, (1, -1, 1, 1))
        if ctx.train:
            mu = ad.mean(x, axis=(0, 2, 3), keepdims=True)
            centered = ad.sub(x, mu)
            var = ad.mean(ad.mul(centered, centered), axis=(0, 2, 3), keepdims=True)
            inv = ad.pow_scalar(ad.add(var, np.asarray(self.eps, x.data.dtype)), -0.5)
            y = ad.mul(centered, inv)
            n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            batch_mean = mu.data.reshape(-1)
            batch_var = var.data.reshape(-1) * (n / max(n - 1, 1))  # unbiased for running
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * batch_mean).astype(
                self.running_mean.dtype
            )
            self.running_var = ((1 - m) * self.running_var + m * batch_var).astype(
                self.running_var.dtype
            )
        else:
            mean = self.running_mean.reshape(1, -1, 1, 1)
            inv_np = 1.0 / np.sqrt(self.running_var.reshape(1, -1, 1, 1) + self.eps)
            y = ad.mul(ad.sub(x, mean.astype(x.data.dtype)), inv_np.astype(x.data.dtype))
        return ad.add(ad.mul(y, gamma), beta)


class LayerNorm(Layer):
    """Normalization over the last axis with learned affine; eps 1e-5."""

    def __init__(self, dim, eps=1e-5, dtype=np.float32, name="ln"):
        self.gamma = Parameter(np.ones(dim, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim, dtype=dtype), f"{name}.beta")
        self.eps = eps

    def parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x, ctx):
        mu = ad.mean(x, axis=-1, keepdims=True)
        centered = ad.sub(x, mu)
        var = ad.mean(ad.mul(centered, centered), axis=-1, keepdims=True)
        inv = ad.pow_scalar(ad.add(var, np.asarray(self.eps, x.data.dtype)), -0.5)
        return ad.add(ad.mul(ad.mul(centered, inv), self.gamma), self.beta)


class PositionalEmbedding(Layer):
    """Learned additive positional embedding for a fixed token count."""

    def __init__(self, tokens, dim, rng, dtype=np.float32, name="pos"):
        self.embedding = Parameter(
            (0.02 * rng.standard_normal((tokens, dim))).astype(dtype), f"{name}.embedding"
        )

    def parameters(self):
        return [self.embedding]

    def forward(self, x, ctx):
        if x.data.shape[-2] != self.embedding.data.shape[0]:
            raise ad.UsageError(
                f"positional embedding covers {self.embedding.data.shape[0]} tokens, "
                f"input has {x.data.shape[-2]}"
            )
        return ad.add(x, self.embedding)


class MultiHeadAttention(Layer):
    """Standard softmax attention over [B, T, D] with ``heads`` heads."""

    def __init__(self, dim, heads, dropout=0.0, rng=None, dtype=np.float32, name="attn"):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q = Dense(dim, dim, rng, dtype=dtype, name=f"{name}.q")
        self.k = Dense(dim, dim, rng, dtype=dtype, name=f"{name}.k")
        self.v = Dense(dim, dim, rng, dtype=dtype, name=f"{name}.v")
        self.out = Dense(dim, dim, rng, dtype=dtype, name=f"{name}.out")
        self.drop = Dropout(dropout, name=f"{name}.drop")

    def parameters(self):
        return (
            self.q.parameters() + self.k.parameters() + self.v.parameters()
            + self.out.parameters()
        )

    def forward(self, x, ctx):
        b, t, d = x.data.shape
        dh = d // self.heads

        def split(z):  # [B, T, D] -> [B, heads, T, dh]
            return ad.transpose(ad.reshape(z, (b, t, self.heads, dh)), (0, 2, 1, 3))

        q = split(self.q.forward(x, ctx))
        k = split(self.k.forward(x, ctx))
        v = split(self.v.forward(x, ctx))
        scores = ad.mul(
            ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
            np.asarray(1.0 / np.sqrt(dh), dtype=x.data.dtype),
        )
        attn = self.drop.forward(ad.softmax(scores, axis=-1), ctx)
        mixed = ad.matmul(attn, v)  # [B, heads, T, dh]
        merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, t, d))
        return self.out.forward(merged, ctx)


class TransformerEncoderLayer(Layer):
    """Post-norm encoder block: attention and feed-forward sublayers."""

    def __init__(self, dim, heads, ffn_dim, dropout, rng, dtype=np.float32, name="enc"):
        self.attn = MultiHeadAttention(dim, heads, dropout, rng, dtype, name=f"{name}.attn")
        self.ln1 = LayerNorm(dim, dtype=dtype, name=f"{name}.ln1")
        self.ln2 = LayerNorm(dim, dtype=dtype, name=f"{name}.ln2")
        self.ff1 = Dense(dim, ffn_dim, rng, dtype=dtype, name=f"{name}.ff1")
        self.ff2 = Dense(ffn_dim, dim, rng, dtype=dtype, name=f"{name}.ff2")
        self.drop = Dropout(dropout, name=f"{name}.drop")

    def parameters(self):
        return (
            self.attn.parameters() + self.ln1.parameters() + self.ln2.parameters()
            + self.ff1.parameters() + self.ff2.parameters()
        )

    def forward(self, x, ctx):
        h = self.ln1.forward(ad.add(x, self.drop.forward(self.attn.forward(x, ctx), ctx)), ctx)
        ff = self.ff2.forward(
            self.drop.forward(ad.relu(self.ff1.forward(h, ctx)), ctx), ctx
        )
        return self.ln2.forward(ad.add(h, self.drop.forward(ff, ctx)), ctx)


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def parameters(self):
        params: list[Parameter] = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def forward(self, x, ctx):
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x
