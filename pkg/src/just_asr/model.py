"""The full stacked network and its per-step forward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .config import Config
from .data import Batch
from .encoder import ConformerStack, FeatureEncoder, add_positions, time_mask
from .losses import LossBreakdown, combine, contrastive_loss, mlm_loss, unsupervised
from .nn import Linear, Module
from .pretext import QuantizedTargets, Quantizer, apply_mask, batch_masks, diversity_loss
from .transducer import Transducer

# independent random streams per (seed, step, utterance)
STREAM_MASK, STREAM_NOISE, STREAM_GUMBEL, STREAM_DISTRACTORS = range(4)

PARAMETER_GROUPS = ("feature_encoder", "contrastive_net", "mlm_net", "quantizer", "mlm_head", "transducer")
DECODER_GROUP = "transducer"


def group_of(name: str) -> str:
    head = name.split(".", 1)[0]
    return "contrastive_net" if head == "context_proj" else head


def utterance_rngs(seed: int, step: int, n: int, stream: int) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, step, b, stream]) for b in range(n)]


@dataclass
class ForwardOutput:
    losses: LossBreakdown
    objective: Tensor
    mask: np.ndarray
    valid: np.ndarray
    targets: QuantizedTargets


class JustModel(Module):
    """Feature encoder -> contrastive net -> MLM net -> transducer, with a side quantizer."""

    def __init__(self, cfg: Config, vocab_size: int, seed: int = 0) -> None:
        rng = np.random.default_rng([seed, 1000])
        d, d_cb = cfg.model.d, cfg.codebook_dim
        self.cfg = cfg
        self.feature_encoder = FeatureEncoder(cfg.model, rng)
        self.contrastive_net = ConformerStack(cfg.model.contrastive_blocks, cfg.model, rng)
        self.mlm_net = ConformerStack(cfg.model.mlm_blocks, cfg.model, rng)
        self.quantizer = Quantizer(d, cfg.quantizer.V, d_cb, cfg.quantizer.tau, rng)
        self.context_proj = Linear(d, d_cb, rng) if d_cb != d else None
        self.mlm_head = Linear(d, cfg.quantizer.V, rng)
        self.transducer = Transducer(d, vocab_size, cfg.decoder, rng)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def forward(self, batch: Batch, mode: str, step: int, seed: int, beta: Optional[float] = None,
                train: bool = True) -> ForwardOutput:
        """Loss breakdown for one batch; ``mode`` selects which objective is returned.

        ``pretrain`` skips the transducer entirely and optimises L_u;
        every other mode optimises L = L_s + beta L_u.
        """
        cfg = self.cfg
        n = len(batch)
        z, lengths = self.feature_encoder(batch.features, batch.frame_lengths)
        t_max = z.shape[1]
        valid = time_mask(lengths, t_max)
        mask = batch_masks(lengths, t_max, cfg.mask.rate, cfg.mask.span,
                           utterance_rngs(seed, step, n, STREAM_MASK)) if train else np.zeros_like(valid)
        z_masked = apply_mask(z, mask, utterance_rngs(seed, step, n, STREAM_NOISE))
        targets = self.quantizer(z, train, utterance_rngs(seed, step, n, STREAM_GUMBEL), lengths)
        c_hidden, c = self.contrastive_net(add_positions(z_masked), valid)
        m_hidden, m = self.mlm_net(c_hidden, valid)
        if self.context_proj is not None:
            c = self.context_proj(c)
        L_c = contrastive_loss(c, targets.q, mask, cfg.loss.K, utterance_rngs(seed, step, n, STREAM_DISTRACTORS))
        L_m = mlm_loss(m, self.mlm_head, targets.y, valid if cfg.loss.mlm_all_positions else mask)
        L_d = diversity_loss(targets.code_probs, mask)
        if mode == "pretrain":
            L_u = unsupervised(L_c, L_m, L_d, cfg.loss.alpha)
            breakdown = LossBreakdown(L_c, L_m, L_d, L_u, None, L_u, cfg.loss.alpha, 0.0)
            return ForwardOutput(breakdown, L_u, mask, valid, targets)
        enc = self.transducer.encode_for_decoder(m_hidden, valid, train)
        L_s = self.transducer.loss(enc, batch.labels, lengths, batch.label_lengths)
        if beta is None:
            beta = 0.0 if mode == "finetune_pure" else cfg.beta
        breakdown = combine(L_c, L_m, L_d, L_s, cfg.loss.alpha, beta)
        return ForwardOutput(breakdown, breakdown.L, mask, valid, targets)

    def encode(self, batch: Batch) -> tuple[Tensor, np.ndarray]:
        """Unmasked inference path to the joint-network input; (B, T, J) and lengths."""
        z, lengths = self.feature_encoder(batch.features, batch.frame_lengths)
        valid = time_mask(lengths, z.shape[1])
        c_hidden, _ = self.contrastive_net(add_positions(z), valid)
        m_hidden, _ = self.mlm_net(c_hidden, valid)
        return self.transducer.encode_for_decoder(m_hidden, valid, train=False), lengths

    def decode(self, batch: Batch, max_symbols_per_frame: int = 5) -> list[list[int]]:
        enc, lengths = self.encode(batch)
        return [self.transducer.greedy_decode(enc[i], int(lengths[i]), max_symbols_per_frame)
                for i in range(len(batch))]
