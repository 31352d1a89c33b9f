"""Convolutional feature encoder and the two Conformer stacks (contrastive and MLM nets)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .nn import LayerNorm, Linear, Module, Conv2d, param


@dataclass
class EncoderConfig:
    d: int = 64
    contrastive_blocks: int = 2
    mlm_blocks: int = 4
    heads: int = 4
    conv_kernel: int = 5
    ff_mult: int = 4
    conv_channels: tuple[int, int] = (8, 4)
    feature_dim: int = 80

    def validate(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"model.d={self.d} is not divisible by model.heads={self.heads}")
        if self.mlm_blocks < self.contrastive_blocks:
            raise ValueError("model.mlm_blocks must be >= model.contrastive_blocks")
        if self.conv_kernel % 2 == 0:
            raise ValueError("model.conv_kernel must be odd")
        if len(self.conv_channels) != 2:
            raise ValueError("model.conv_channels takes exactly two values")


def reduced_length(frames):
    """Frames surviving two stride-2 convolutions: ceil(ceil(L/2)/2)."""
    return -(-(-(-np.asarray(frames) // 2)) // 2)


def time_mask(lengths, t_max: int) -> np.ndarray:
    return np.arange(t_max)[None, :] < np.asarray(lengths)[:, None]


def sinusoidal_positions(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((t, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    return table


class FeatureEncoder(Module):
    """Two 3x3 stride-2 conv blocks, flatten over (channels, freq), project to d."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator) -> None:
        c1, c2 = cfg.conv_channels
        self.conv1 = Conv2d(1, c1, 3, 2, rng)
        self.conv2 = Conv2d(c1, c2, 3, 2, rng)
        freq = int(reduced_length(cfg.feature_dim))
        self.proj = Linear(c2 * freq, cfg.d, rng)

    def __call__(self, features: np.ndarray, lengths) -> tuple[Tensor, np.ndarray]:
        features = np.asarray(features)
        if not np.all(np.isfinite(features)):
            raise ValueError("feature_encode: non-finite input features")
        b, l, f = features.shape
        lengths = np.asarray(lengths)
        # stride-2 windows at the boundary read one frame past the end; make it a zero
        features = np.where(time_mask(lengths, l)[..., None], features, 0).astype(np.float32)
        x = Tensor(features.reshape(b, 1, l, f))
        half = -(-lengths // 2)
        h = ops.swish(self.conv1(x))
        h = h * _frame_mask(h.shape, half)
        h = ops.swish(self.conv2(h))
        out_len = -(-half // 2)
        h = h * _frame_mask(h.shape, out_len)
        b, c, t, fr = h.shape
        h = ops.reshape(ops.transpose(h, (0, 2, 1, 3)), (b, t, c * fr))
        return self.proj(h), out_len


def _frame_mask(shape, lengths) -> Tensor:
    m = time_mask(lengths, shape[2])[:, None, :, None]
    return Tensor(np.broadcast_to(m, shape).astype(np.float32))


class ConformerBlock(Module):
    """Macaron feed-forward halves around self-attention and a depthwise-conv module."""

    def __init__(self, d: int, heads: int, kernel: int, ff_mult: int, rng: np.random.Generator) -> None:
        self.heads = heads
        self.ff1_norm = LayerNorm(d)
        self.ff1_in = Linear(d, ff_mult * d, rng)
        self.ff1_out = Linear(ff_mult * d, d, rng)
        self.attn_norm = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.attn_out = Linear(d, d, rng)
        self.conv_norm = LayerNorm(d)
        self.pointwise_in = Linear(d, 2 * d, rng)
        self.depthwise = param(rng.uniform(-1, 1, size=(kernel, d)) / math.sqrt(kernel))
        self.depthwise_bias = param(np.zeros(d))
        self.conv_mid_norm = LayerNorm(d)
        self.pointwise_out = Linear(d, d, rng)
        self.ff2_norm = LayerNorm(d)
        self.ff2_in = Linear(d, ff_mult * d, rng)
        self.ff2_out = Linear(ff_mult * d, d, rng)
        self.final_norm = LayerNorm(d)

    def zero_residual_branches(self) -> None:
        for layer in (self.ff1_out, self.attn_out, self.pointwise_out, self.ff2_out):
            layer.zero_()

    def _attention(self, x: Tensor, valid: np.ndarray) -> Tensor:
        b, t, d = x.shape
        h = self.heads
        dh = d // h
        qkv = ops.reshape(self.qkv(self.attn_norm(x)), (b, t, 3, h, dh))
        q = ops.transpose(qkv[:, :, 0], (0, 2, 1, 3))
        k = ops.transpose(qkv[:, :, 1], (0, 2, 3, 1))
        v = ops.transpose(qkv[:, :, 2], (0, 2, 1, 3))
        scores = ops.matmul(q, k) * (1.0 / math.sqrt(dh))
        blocked = np.broadcast_to(~valid[:, None, None, :], scores.shape)
        weights = ops.softmax(ops.masked_fill(scores, blocked, -1e9), axis=-1)
        ctx = ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3))
        return self.attn_out(ops.reshape(ctx, (b, t, d)))

    def _convolution(self, x: Tensor, valid: np.ndarray) -> Tensor:
        d = x.shape[-1]
        y = self.pointwise_in(self.conv_norm(x))
        y = y[..., :d] * ops.sigmoid(y[..., d:])
        y = y * Tensor(np.broadcast_to(valid[..., None], y.shape).astype(y.dtype))
        y = ops.bias_add(ops.depthwise_conv1d(y, self.depthwise), self.depthwise_bias)
        return self.pointwise_out(ops.swish(self.conv_mid_norm(y)))

    def __call__(self, x: Tensor, valid: np.ndarray) -> Tensor:
        x = x + 0.5 * self.ff1_out(ops.swish(self.ff1_in(self.ff1_norm(x))))
        x = x + self._attention(x, valid)
        x = x + self._convolution(x, valid)
        x = x + 0.5 * self.ff2_out(ops.swish(self.ff2_in(self.ff2_norm(x))))
        return self.final_norm(x)


class ConformerStack(Module):
    """Stack of Conformer blocks plus the layer norm applied before loss use.

    ``__call__`` returns ``(hidden, normed)``: the raw stack output feeds the
    next module while the normalised copy is what the losses see.
    """

    def __init__(self, n_blocks: int, cfg: EncoderConfig, rng: np.random.Generator) -> None:
        self.blocks = [ConformerBlock(cfg.d, cfg.heads, cfg.conv_kernel, cfg.ff_mult, rng)
                       for _ in range(n_blocks)]
        self.out_norm = LayerNorm(cfg.d)

    def zero_residual_branches(self) -> None:
        for block in self.blocks:
            block.zero_residual_branches()

    def __call__(self, x: Tensor, valid: np.ndarray) -> tuple[Tensor, Tensor]:
        for block in self.blocks:
            x = block(x, valid)
        return x, self.out_norm(x)


def add_positions(x: Tensor) -> Tensor:
    b, t, d = x.shape
    pe = np.broadcast_to(sinusoidal_positions(t, d), (b, t, d)).astype(x.dtype)
    return x + Tensor(pe)
