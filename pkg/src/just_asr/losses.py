"""Contrastive, masked-prediction and combined objectives."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops


def sample_distractors(masked: np.ndarray, K: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """For every masked index pick K others from the same utterance.

    Without replacement when enough other masked steps exist, with
    replacement otherwise.  Returns (anchors, distractors[n, K]).
    """
    anchors = np.flatnonzero(masked)
    if anchors.size < 2:
        return anchors[:0], np.zeros((0, K), dtype=np.int64)
    rows = []
    for i in anchors:
        others = anchors[anchors != i]
        rows.append(rng.choice(others, size=K, replace=others.size < K))
    return anchors, np.asarray(rows, dtype=np.int64).reshape(anchors.size, K)


def contrastive_loss(c: Tensor, q: Tensor, mask, K: int, rngs: Sequence[np.random.Generator]) -> Tensor:
    """Mean over masked anchors of -log[e^cos(c,q+) / (e^cos(c,q+) + sum_k e^cos(c,q~k))].

    ``c`` and ``q`` are (B, T, d); distractors come from other masked steps
    of the same utterance.  Utterances with fewer than two masked steps add
    no anchors.
    """
    mask = np.asarray(mask, dtype=bool)
    b, t, d = c.shape
    if q.shape != c.shape:
        raise ValueError(f"contrastive_loss: context {c.shape} vs targets {q.shape}")
    anchor_idx, neg_idx = [], []
    for i in range(b):
        anchors, negs = sample_distractors(mask[i], K, rngs[i])
        anchor_idx.append(anchors + i * t)
        neg_idx.append(negs + i * t)
    anchors = np.concatenate(anchor_idx)
    if anchors.size == 0:
        warnings.warn("contrastive_loss: batch has no anchors, returning 0", stacklevel=2)
        return Tensor(0.0)
    negs = np.concatenate(neg_idx)
    c_flat = ops.reshape(c, (b * t, d))
    q_flat = ops.reshape(q, (b * t, d))
    c_anchor = ops.embedding_lookup(c_flat, anchors)
    pos = ops.cosine_similarity(c_anchor, ops.embedding_lookup(q_flat, anchors))
    n = anchors.size
    scores = ops.reshape(pos, (n, 1))
    if K > 0:
        c_rep = ops.embedding_lookup(c_flat, np.repeat(anchors[:, None], K, axis=1))
        neg = ops.cosine_similarity(c_rep, ops.embedding_lookup(q_flat, negs))
        scores = ops.concat([scores, neg], axis=1)
    # -log(sim+/sum sim) with sim = exp(cos) is exactly -log_softmax over the cosines
    return -ops.mean(ops.log_softmax(scores, axis=1)[:, 0])


def mlm_loss(m: Tensor, head: Callable[[Tensor], Tensor], y, positions) -> Tensor:
    """Cross-entropy of ``head(m)`` against quantizer ids at the selected positions."""
    positions = np.asarray(positions, dtype=bool)
    y = np.asarray(y)
    if not positions.any():
        warnings.warn("mlm_loss: no positions selected, returning 0", stacklevel=2)
        return Tensor(0.0)
    logits = head(ops.mask_select(m, positions))
    logp = ops.log_softmax(logits, axis=-1)
    targets = y[positions]
    return -ops.mean(logp[np.arange(targets.size), targets])


@dataclass
class LossBreakdown:
    L_c: Tensor
    L_m: Tensor
    L_d: Tensor
    L_u: Tensor
    L_s: Optional[Tensor]
    L: Tensor
    alpha: float
    beta: float

    def values(self) -> dict[str, float]:
        out = {}
        for key in ("L_c", "L_m", "L_d", "L_u", "L_s", "L"):
            v = getattr(self, key)
            out[key] = float("nan") if v is None else float(v.data)
        return out


def unsupervised(L_c: Tensor, L_m: Tensor, L_d: Tensor, alpha: float) -> Tensor:
    return L_c + L_m + alpha * L_d


def combine(L_c: Tensor, L_m: Tensor, L_d: Tensor, L_s: Tensor,
            alpha: float = 0.1, beta: float = 0.07) -> LossBreakdown:
    """L_u = L_c + L_m + alpha L_d and L = L_s + beta L_u."""
    if alpha < 0 or beta < 0:
        raise ValueError(f"loss weights must be non-negative, got alpha={alpha}, beta={beta}")
    L_u = unsupervised(L_c, L_m, L_d, alpha)
    parts = (L_c, L_m, L_d, L_s)
    if not all(np.isfinite(float(p.data)) for p in parts):
        raise FloatingPointError("combine: non-finite loss component")
    return LossBreakdown(L_c, L_m, L_d, L_u, L_s, L_s + beta * L_u, alpha, beta)
