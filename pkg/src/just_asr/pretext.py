"""Span masking of latents and the single-codebook Gumbel-softmax quantizer."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, ops
from .nn import Linear, Module, param

log = logging.getLogger(__name__)

MASK_NOISE_STD = 0.1


@dataclass
class MaskSpec:
    starts: np.ndarray
    mask: np.ndarray

    @property
    def length(self) -> int:
        return self.mask.shape[0]


def mask_from_starts(t: int, starts, span: int = 11) -> MaskSpec:
    starts = np.unique(np.asarray(starts, dtype=np.int64))
    if starts.size and (starts.min() < 0 or starts.max() >= t):
        raise ValueError(f"mask starts must lie in [0, {t})")
    mask = np.zeros(t, dtype=bool)
    for s in starts:
        mask[s:s + span] = True
    return MaskSpec(starts, mask)


def sample_mask(t: int, rate: float = 0.065, span: int = 11, seed=0) -> MaskSpec:
    """Each step independently starts a span with probability ``rate``.

    A start masks itself and the following ``span - 1`` steps, truncated at
    the end of the sequence; spans may overlap.
    """
    if t < 1:
        raise ValueError("sample_mask needs T >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    starts = np.flatnonzero(rng.random(t) < rate)
    return mask_from_starts(t, starts, span)


def batch_masks(lengths, t_max: int, rate: float, span: int, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """(B, t_max) boolean mask; each row is sampled over that utterance's own length."""
    out = np.zeros((len(lengths), t_max), dtype=bool)
    for b, (t, rng) in enumerate(zip(lengths, rngs)):
        out[b, :t] = sample_mask(int(t), rate, span, rng).mask
    return out


def apply_mask(z: Tensor, mask, rngs: Sequence[np.random.Generator], std: float = MASK_NOISE_STD) -> Tensor:
    """Replace masked steps of (B, T, d) latents by N(0, std^2) draws.

    Noise is drawn per utterance only for as many steps as it has masked, so
    padding never shifts the random stream.  Masked positions carry no
    gradient back to ``z``.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != z.shape[:2]:
        raise ValueError(f"apply_mask: mask shape {mask.shape} vs latents {z.shape}")
    if not mask.any():
        return z
    noise = np.zeros(z.shape, dtype=z.dtype)
    for b, rng in enumerate(rngs):
        idx = np.flatnonzero(mask[b])
        noise[b, idx] = rng.normal(0.0, std, size=(idx.size, z.shape[2]))
    cond = np.broadcast_to(mask[..., None], z.shape)
    return ops.where(cond, Tensor(noise), z)


@dataclass
class QuantizedTargets:
    q: Tensor            # B x T x d_cb target vectors
    y: np.ndarray        # B x T target ids
    probs: Tensor        # B x T x V assignment distribution (Gumbel-perturbed when training)
    code_probs: Tensor   # B x T x V noiseless softmax of the logits, for the diversity term


class Quantizer(Module):
    """Single codebook of V learnable tokens selected through Gumbel softmax."""

    def __init__(self, d: int, V: int, d_cb: int, tau: float, rng: np.random.Generator) -> None:
        if V < 2:
            raise ValueError("quantizer.V must be >= 2")
        if tau <= 0:
            raise ValueError("quantizer.tau must be > 0")
        self.V = V
        self.tau = tau
        self.proj = Linear(d, V, rng)
        # unit-variance weights keep the initial assignment sharp relative to the Gumbel noise
        self.proj.weight.data[...] = rng.normal(size=(d, V))
        self.codebook = param(rng.normal(size=(V, d_cb)))

    def __call__(self, z: Tensor, train: bool, rngs: Sequence[np.random.Generator] = (), lengths=None) -> QuantizedTargets:
        return quantize(z, self, train, rngs, lengths)


def quantize(z: Tensor, cb: Quantizer, train: bool, rngs: Sequence[np.random.Generator] = (),
             lengths=None) -> QuantizedTargets:
    """Map unmasked latents to codebook rows with a straight-through hard choice."""
    logits = cb.proj(z)
    b, t, v = logits.shape
    if train:
        noise = np.zeros(logits.shape, dtype=logits.dtype)
        lengths = np.full(b, t) if lengths is None else np.asarray(lengths)
        for i, rng in enumerate(rngs):
            noise[i, : lengths[i]] = rng.gumbel(size=(int(lengths[i]), v))
        scores = logits + Tensor(noise)
    else:
        scores = logits
    probs = ops.softmax(scores * (1.0 / cb.tau), axis=-1)
    y = np.argmax(scores.data, axis=-1)
    hard = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(hard, y[..., None], 1.0, axis=-1)
    q = ops.matmul(ops.straight_through(hard, probs), cb.codebook)
    return QuantizedTargets(q, y, probs, ops.softmax(logits, axis=-1))


def diversity_loss(probs: Tensor, mask=None) -> Tensor:
    """(V - exp(H(p_bar))) / V over the rows of ``probs`` selected by ``mask``."""
    v = probs.shape[-1]
    if mask is None:
        rows = ops.reshape(probs, (-1, v))
    else:
        rows = ops.mask_select(probs, mask)
    if rows.shape[0] == 0:
        warnings.warn("diversity_loss: no contributing positions, returning 0", stacklevel=2)
        return Tensor(0.0)
    p_bar = ops.mean(rows, axis=0)
    entropy = -ops.sum(p_bar * ops.log(p_bar + 1e-30))
    return (v - ops.exp(entropy)) * (1.0 / v)


def perplexity(probs: np.ndarray) -> float:
    """exp of the entropy of the mean assignment distribution."""
    p_bar = np.asarray(probs).reshape(-1, np.asarray(probs).shape[-1]).mean(axis=0)
    nz = p_bar[p_bar > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))
