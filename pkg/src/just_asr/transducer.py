"""RNN transducer: prediction and joint networks, exact loss, greedy decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import record
from .nn import LSTM, BatchNorm, Linear, Module, param

BLANK_ID = 0
_NEG_INF = -math.inf


@dataclass
class TransducerConfig:
    layers: int = 2
    pred_dim: int = 64
    joint_dim: int = 128

    def validate(self) -> None:
        if self.layers < 1:
            raise ValueError("decoder.layers must be >= 1")


def _logaddexp(a: float, b: float) -> float:
    if a == _NEG_INF:
        return b
    if b == _NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def _check_labels(labels: Sequence[int], vocab: int, frames: int) -> None:
    if any(lab == BLANK_ID for lab in labels):
        raise ValueError("transducer labels may not contain the blank id")
    if any(lab < 0 or lab >= vocab for lab in labels):
        raise ValueError(f"label id outside [1, {vocab})")
    if frames < 1:
        raise ValueError("transducer loss needs at least one encoder frame")


def lattice_forward_backward(log_probs: np.ndarray, labels: Sequence[int]):
    """Log-space forward/backward variables of one utterance.

    ``log_probs`` is (T, U+1, V) normalised per (t, u).  Returns
    ``(alpha, beta, log_likelihood)`` as float64 arrays/scalar.
    """
    labels = [int(x) for x in labels]
    T, U1, V = log_probs.shape
    U = len(labels)
    if U1 != U + 1:
        raise ValueError(f"lattice has {U1} label positions, expected {U + 1}")
    _check_labels(labels, V, T)
    blank = log_probs[:, :, BLANK_ID].astype(np.float64).tolist()
    emit = (log_probs[:, np.arange(U), labels].astype(np.float64).tolist() if U
            else [[] for _ in range(T)])
    alpha = [[_NEG_INF] * U1 for _ in range(T)]
    for t in range(T):
        row, prev = alpha[t], alpha[t - 1] if t else None
        for u in range(U1):
            if t == 0 and u == 0:
                row[u] = 0.0
                continue
            a = prev[u] + blank[t - 1][u] if t else _NEG_INF
            b = row[u - 1] + emit[t][u - 1] if u else _NEG_INF
            row[u] = _logaddexp(a, b)
    beta = [[_NEG_INF] * U1 for _ in range(T)]
    beta[T - 1][U] = blank[T - 1][U]
    for t in range(T - 1, -1, -1):
        row, nxt = beta[t], beta[t + 1] if t < T - 1 else None
        for u in range(U, -1, -1):
            if t == T - 1 and u == U:
                continue
            a = nxt[u] + blank[t][u] if nxt is not None else _NEG_INF
            b = row[u + 1] + emit[t][u] if u < U else _NEG_INF
            row[u] = _logaddexp(a, b)
    alpha_arr = np.array(alpha)
    return alpha_arr, np.array(beta), alpha[T - 1][U] + blank[T - 1][U]


def rnnt_lattice_loss(log_probs: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``labels`` and its gradient w.r.t. ``log_probs``."""
    labels = np.asarray(labels, dtype=np.int64)
    alpha, beta, ll = lattice_forward_backward(log_probs, labels)
    T, U1, _ = log_probs.shape
    U = U1 - 1
    lp = log_probs.astype(np.float64)
    grad = np.zeros_like(lp)
    # blank at (t, u) moves to (t+1, u); the final blank at (T-1, U) terminates
    grad[: T - 1, :, BLANK_ID] = -np.exp(alpha[:-1] + lp[:-1, :, BLANK_ID] + beta[1:] - ll)
    grad[T - 1, U, BLANK_ID] = -np.exp(alpha[T - 1, U] + lp[T - 1, U, BLANK_ID] - ll)
    if U:
        emit = lp[:, np.arange(U), labels]
        grad[:, np.arange(U), labels] = -np.exp(alpha[:, :U] + emit + beta[:, 1:] - ll)
    return -ll, grad


def rnnt_loss(log_probs: Tensor, labels, frame_lengths, label_lengths) -> Tensor:
    """Batch-mean transducer loss over a (B, T, U+1, V) log-probability lattice.

    Each utterance only reads its own (frames, labels + 1) corner of the
    padded lattice, so padding never changes the value.
    """
    labels = np.asarray(labels)
    frame_lengths = np.asarray(frame_lengths)
    label_lengths = np.asarray(label_lengths)
    b, t_max, u1_max, _ = log_probs.shape
    total = 0.0
    grad = np.zeros(log_probs.shape, dtype=np.float64)
    for i in range(b):
        t, u = int(frame_lengths[i]), int(label_lengths[i])
        if u > 0 and t == 0:
            raise ValueError("labels present but no encoder frames")
        if t > t_max or u + 1 > u1_max:
            raise ValueError("lengths exceed the padded lattice")
        nll, g = rnnt_lattice_loss(log_probs.data[i, :t, : u + 1], labels[i, :u])
        total += nll
        grad[i, :t, : u + 1] = g
    out = np.asarray(total / b, dtype=log_probs.dtype)
    grad = (grad / b).astype(log_probs.dtype)
    return record(out, (log_probs,), lambda g: (g * grad,))


def greedy_search(frames: int, scores: Callable[[int, object], np.ndarray],
                  advance: Callable[[object, int], object], state: object,
                  max_symbols_per_frame: int = 5) -> list[int]:
    """Frame-synchronous greedy transducer search.

    ``scores(t, state)`` returns output scores at frame ``t`` given the
    prediction state; ``advance(state, label)`` feeds an emitted label.
    """
    out = []
    for t in range(frames):
        for _ in range(max_symbols_per_frame):
            k = int(np.argmax(scores(t, state)))
            if k == BLANK_ID:
                break
            out.append(k)
            state = advance(state, k)
    return out


class Transducer(Module):
    def __init__(self, d: int, vocab: int, cfg: TransducerConfig, rng: np.random.Generator) -> None:
        cfg.validate()
        if vocab < 2:
            raise ValueError("transducer output size must be >= 2")
        self.vocab = vocab
        self.enc_norm = BatchNorm(d)
        self.enc_proj = Linear(d, cfg.joint_dim, rng)
        # last embedding row is the learned start symbol
        self.embedding = param(rng.normal(scale=0.1, size=(vocab + 1, cfg.pred_dim)))
        self.lstm = LSTM(cfg.pred_dim, cfg.pred_dim, cfg.layers, rng)
        self.pred_proj = Linear(cfg.pred_dim, cfg.joint_dim, rng)
        self.out = Linear(cfg.joint_dim, vocab, rng)

    def encode_for_decoder(self, m: Tensor, valid=None, train: bool = True) -> Tensor:
        """Swish, batch norm (statistics over valid steps only), projection to the joint dim."""
        return self.enc_proj(self.enc_norm(ops.swish(m), train, valid))

    def predict(self, labels: np.ndarray) -> Tensor:
        """(B, U) label history -> (B, U+1, joint) prediction-network outputs."""
        labels = np.asarray(labels)
        start = np.full((labels.shape[0], 1), self.vocab)
        emb = ops.embedding_lookup(self.embedding, np.concatenate([start, labels], axis=1))
        return self.pred_proj(self.lstm(emb))

    def joint(self, enc: Tensor, pred: Tensor) -> Tensor:
        """(B, T, J) x (B, U+1, J) -> normalised (B, T, U+1, V) log-probabilities."""
        return ops.log_softmax(self.out(ops.tanh(ops.outer_add(enc, pred))), axis=-1)

    def loss(self, enc: Tensor, labels, frame_lengths, label_lengths) -> Tensor:
        labels = np.asarray(labels)
        if labels.size and labels.max() >= self.vocab:
            raise ValueError(f"label id {labels.max()} >= output size {self.vocab}")
        lattice = self.joint(enc, self.predict(labels))
        return rnnt_loss(lattice, labels, frame_lengths, label_lengths)

    def greedy_decode(self, enc: Tensor, frames: Optional[int] = None,
                      max_symbols_per_frame: int = 5) -> list[int]:
        """Decode one utterance from its (T, J) projected encoder output."""
        enc_data = enc.data
        frames = enc_data.shape[0] if frames is None else frames

        def advance(state, label):
            emb = ops.embedding_lookup(self.embedding, np.array([label]))
            h, lstm_state = self.lstm.step(emb, None if state is None else state[1])
            return self.pred_proj(h).data[0], lstm_state

        def scores(t, state):
            hidden = np.tanh(enc_data[t] + state[0])
            return hidden @ self.out.weight.data + self.out.bias.data

        return greedy_search(frames, scores, advance, advance(None, self.vocab), max_symbols_per_frame)
