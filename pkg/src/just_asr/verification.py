"""Independent oracles: exhaustive transducer alignment sums and finite-difference suites."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, grad_check, high_precision, ops
from .losses import combine, contrastive_loss, mlm_loss
from .pretext import diversity_loss
from .transducer import BLANK_ID, rnnt_loss


def enumerate_alignment_nll(log_probs: np.ndarray, labels) -> float:
    """-log of the summed probability of every monotone alignment, by explicit enumeration.

    An alignment interleaves T-1 frame-advancing blanks with the U labels and
    ends with the blank emitted at the last frame.
    """
    T, _, _ = log_probs.shape
    labels = list(labels)
    U = len(labels)
    path_scores = []
    for label_slots in itertools.combinations(range(T - 1 + U), U):
        slots = set(label_slots)
        t = u = 0
        score = 0.0
        for k in range(T - 1 + U):
            if k in slots:
                score += log_probs[t, u, labels[u]]
                u += 1
            else:
                score += log_probs[t, u, BLANK_ID]
                t += 1
        score += log_probs[T - 1, U, BLANK_ID]
        path_scores.append(score)
    top = max(path_scores)
    return -(top + math.log(sum(math.exp(s - top) for s in path_scores)))


def random_lattice(rng: np.random.Generator, T: int, U: int, V: int):
    logits = rng.normal(scale=2.0, size=(T, U + 1, V))
    logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    labels = rng.integers(1, V, size=U)
    return logp, labels


@dataclass
class OracleReport:
    cases: int
    max_abs_error: float
    seconds: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_abs_error <= self.tol


def rnnt_oracle_check(n: int = 500, seed: int = 0, max_T: int = 4, max_U: int = 3, max_V: int = 4,
                      tol: float = 1e-9) -> OracleReport:
    """Compare the DP loss with exhaustive enumeration on random small lattices."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    start = time.perf_counter()
    with high_precision():
        for _ in range(n):
            T = int(rng.integers(1, max_T + 1))
            U = int(rng.integers(0, max_U + 1))
            V = int(rng.integers(2, max_V + 1))
            logp, labels = random_lattice(rng, T, U, V)
            lattice = Tensor(logp[None])
            dp = float(rnnt_loss(lattice, labels[None] if U else np.zeros((1, 0), dtype=int), [T], [U]).data)
            worst = max(worst, abs(dp - enumerate_alignment_nll(logp, labels)))
    return OracleReport(n, worst, time.perf_counter() - start, tol)


# ---------------------------------------------------------------- gradient suite


def _toy_mask(rng, B, T):
    mask = rng.random((B, T)) < 0.6
    for b in range(B):
        if mask[b].sum() < 2:
            mask[b, rng.choice(T, size=2, replace=False)] = True
    return mask


def _rngs(seed, n):
    return [np.random.default_rng([seed, b]) for b in range(n)]


def loss_functions(seed: int) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    """Small randomised instances (T<=6, d<=4, V<=8) of every loss term."""
    rng = np.random.default_rng(seed)
    B, T, d, V, K = 2, int(rng.integers(3, 7)), 4, 8, 3
    mask = _toy_mask(rng, B, T)
    U = int(rng.integers(1, 4))
    labels = rng.integers(1, V, size=(B, U))
    frames = np.array([T, max(1, T - 1)])
    label_lengths = np.array([U, max(0, U - 1)])
    y = rng.integers(0, V, size=(B, T))
    J = 4

    def mk(*shape):
        return Tensor(rng.normal(size=shape), dtype=np.float64)

    def head_fn(w, b):
        return lambda x: ops.bias_add(ops.matmul(x, w), b)

    def l_c(c, q):
        return contrastive_loss(c, q, mask, K, _rngs(seed, B))

    def l_m(m, w, b):
        return mlm_loss(m, head_fn(w, b), y, mask)

    def l_d(logits):
        return diversity_loss(ops.softmax(logits, axis=-1), mask)

    def l_s(enc, pred, w_out):
        joint = ops.log_softmax(ops.matmul(ops.tanh(ops.outer_add(enc, pred)), w_out), axis=-1)
        return rnnt_loss(joint, labels, frames, label_lengths)

    def l_total(c, q, m, w, b, logits, enc, pred, w_out):
        return combine(l_c(c, q), l_m(m, w, b), l_d(logits), l_s(enc, pred, w_out), 0.1, 0.07).L

    args = {
        "c": mk(B, T, d), "q": mk(B, T, d), "m": mk(B, T, d), "w": mk(d, V), "b": mk(V),
        "logits": mk(B, T, V), "enc": mk(B, T, J), "pred": mk(B, U + 1, J), "w_out": mk(J, V),
    }
    return {
        "L_c": (l_c, [args["c"], args["q"]]),
        "L_m": (l_m, [args["m"], args["w"], args["b"]]),
        "L_d": (l_d, [args["logits"]]),
        "L_s": (l_s, [args["enc"], args["pred"], args["w_out"]]),
        "L": (l_total, [args[k] for k in ("c", "q", "m", "w", "b", "logits", "enc", "pred", "w_out")]),
    }


def gradient_suite(seeds=range(20), tol: float = 1e-5) -> dict[str, float]:
    """Worst relative error per loss term across ``seeds``."""
    worst: dict[str, float] = {}
    for seed in seeds:
        with high_precision():
            for name, (fn, inputs) in loss_functions(seed).items():
                report = grad_check(fn, inputs, eps=1e-5, tol=tol)
                worst[name] = max(worst.get(name, 0.0), report.max_rel_error)
    return worst
