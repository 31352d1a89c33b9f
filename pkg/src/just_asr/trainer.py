"""Optimisation, training regimes, and train-state persistence."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tape
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, architecture_diff
from .data import Batcher, Corpus, Vocabulary
from .model import DECODER_GROUP, JustModel, group_of

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "mode", "lr_global", "lr_decoder", "L_c", "L_m", "L_d", "L_u", "L_s", "L"]


def lr_at(step: int, warmup: int, peak: float) -> float:
    """Linear warm-up to ``peak`` at ``warmup``, then peak * sqrt(warmup / step)."""
    if step <= 0:
        return 0.0
    if step < warmup:
        return peak * step / warmup
    return peak * math.sqrt(warmup / step)


@dataclass
class TrainState:
    config: Config
    vocab: Vocabulary
    model: JustModel
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @property
    def mode(self) -> str:
        return self.config.train.mode

    @classmethod
    def fresh(cls, cfg: Config, vocab: Vocabulary) -> "TrainState":
        cfg.validate()
        model = JustModel(cfg, len(vocab), cfg.train.seed)
        state = cls(cfg, vocab, model)
        state.reset_optimizer()
        return state

    def reset_optimizer(self) -> None:
        self.m = {n: np.zeros_like(p.data) for n, p in self.model.named_parameters()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.model.named_parameters()}
        self.step = 0

    def learning_rates(self, step: int) -> tuple[float, float]:
        s = self.config.schedule
        return lr_at(step, s.warmup, s.peak_lr), lr_at(step, s.decoder_warmup, s.decoder_peak_lr)

    # ------------------------------------------------------------ persistence

    def meta(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "step": self.step,
            "mode": self.mode,
            "seed": self.config.train.seed,
            "vocab": self.vocab.graphemes,
            "bn_batches": {n: s.batches for n, s in self.model.named_buffers()},
        }

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self.model.named_parameters():
            out[f"param/{name}"] = p.data
            out[f"adam_m/{name}"] = self.m[name]
            out[f"adam_v/{name}"] = self.v[name]
        for name, stats in self.model.named_buffers():
            out[f"bn_mean/{name}"] = stats.mean
            out[f"bn_var/{name}"] = stats.var
        return out

    def save(self, path) -> Path:
        return save_checkpoint(path, self.meta(), self.arrays())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: Optional[Config] = None,
                        keep_optimizer: bool = True) -> "TrainState":
        """Rebuild a state; ``config`` (if given) must agree on every architecture key."""
        saved = Config.from_dict(ckpt.meta["config"])
        if config is None:
            config = saved
        diffs = architecture_diff(saved, config)
        if diffs:
            raise CheckpointError("checkpoint does not match config: " + "; ".join(diffs))
        vocab = Vocabulary(ckpt.meta["vocab"])
        state = cls(config, vocab, JustModel(config, len(vocab), config.train.seed))
        state.reset_optimizer()
        for name, p in state.model.named_parameters():
            arr = ckpt.arrays.get(f"param/{name}")
            if arr is None or arr.shape != p.data.shape:
                raise CheckpointError(f"checkpoint lacks a matching tensor for {name}")
            p.data = arr.astype(p.data.dtype, copy=True)
            if keep_optimizer:
                state.m[name] = ckpt.arrays[f"adam_m/{name}"].copy()
                state.v[name] = ckpt.arrays[f"adam_v/{name}"].copy()
        for name, stats in state.model.named_buffers():
            stats.mean = ckpt.arrays[f"bn_mean/{name}"].copy()
            stats.var = ckpt.arrays[f"bn_var/{name}"].copy()
            stats.batches = int(ckpt.meta["bn_batches"][name])
        if keep_optimizer:
            state.step = ckpt.step
        return state

    @classmethod
    def load(cls, path, config: Optional[Config] = None, keep_optimizer: bool = True) -> "TrainState":
        return cls.from_checkpoint(load_checkpoint(path), config, keep_optimizer)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for k in grads:
            grads[k] = grads[k] * np.asarray(scale, dtype=grads[k].dtype)
    return norm


def adam_step(state: TrainState, grads: dict[str, np.ndarray]) -> bool:
    """Bias-corrected Adam; decoder parameters follow the decoder schedule.

    Parameters absent from ``grads`` are left untouched.  A non-finite
    gradient rejects the whole step and leaves the counter unchanged.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            log.warning("step %d rejected: non-finite gradient in %s", state.step + 1, name)
            return False
    cfg = state.config.train
    step = state.step + 1
    lr_global, lr_decoder = state.learning_rates(step)
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    params = dict(state.model.named_parameters())
    for name, g in grads.items():
        p = params[name]
        lr = lr_decoder if group_of(name) == DECODER_GROUP else lr_global
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        update = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.data.dtype)
    state.step = step
    return True


def trainable(state: TrainState, mode: str) -> dict:
    out = {}
    for name, p in state.model.named_parameters():
        group = group_of(name)
        if mode == "pretrain" and group == DECODER_GROUP:
            continue
        if state.config.quantizer.freeze and group == "quantizer":
            continue
        out[name] = p
    return out


def train_step(state: TrainState, batcher: Batcher) -> Optional[dict]:
    """One optimisation step; returns the metrics row or None if the step was rejected."""
    cfg = state.config
    mode = cfg.train.mode
    params = trainable(state, mode)
    for p in params.values():
        p.grad = None
    batch = batcher.batch_at(state.step)
    with Tape():
        out = state.model.forward(batch, mode, state.step, cfg.train.seed, train=True)
    out.objective.backward()
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    for p in params.values():
        p.grad = None
    values = out.losses.values()
    if not all(np.isfinite(v) for k, v in values.items() if not (k == "L_s" and mode == "pretrain")):
        log.warning("step %d rejected: non-finite loss %s", state.step + 1, values)
        return None
    clip_by_global_norm(grads, cfg.train.clip_norm)
    if not adam_step(state, grads):
        return None
    lr_g, lr_d = state.learning_rates(state.step)
    return {"step": state.step, "mode": mode, "lr_global": lr_g,
            "lr_decoder": lr_d if mode != "pretrain" else 0.0, **values}


def format_row(row: dict) -> list[str]:
    return [str(row[c]) if c in ("step", "mode") else repr(float(row[c])) for c in METRIC_COLUMNS]


@dataclass
class TrainResult:
    state: TrainState
    metrics_path: Path
    checkpoints: list[Path]
    rows: list[dict]


def prepare_state(cfg: Config, vocab: Vocabulary, resume: bool = False) -> TrainState:
    mode = cfg.train.mode
    if mode.startswith("finetune") and not cfg.train.init_checkpoint:
        raise ConfigError(f"mode {mode} requires train.init_checkpoint")
    if not cfg.train.init_checkpoint:
        return TrainState.fresh(cfg, vocab)
    state = TrainState.load(cfg.train.init_checkpoint, cfg, keep_optimizer=resume)
    if state.vocab != vocab:
        raise CheckpointError("checkpoint vocabulary differs from the corpus vocabulary")
    return state


def train(cfg: Config, corpus: Corpus, out_dir=None, resume: bool = False,
          state: Optional[TrainState] = None) -> TrainResult:
    """Run ``cfg.train.steps`` total updates in ``cfg.train.mode``.

    Writes ``metrics.csv`` plus ``ckpt_<step>.ckpt`` every
    ``train.checkpoint_every`` steps and ``final.ckpt``.  With ``resume`` the
    optimiser state and step counter of ``train.init_checkpoint`` are kept and
    the metrics file is appended to.
    """
    cfg.validate()
    out = Path(out_dir or cfg.train.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if state is None:
        state = prepare_state(cfg, corpus.vocab, resume)
    state.config = cfg
    batcher = Batcher(corpus, cfg.train.batch_size, cfg.train.seed, cfg.train.bucket_by_length)
    metrics_path = out / "metrics.csv"
    append = resume and metrics_path.exists()
    checkpoints, rows = [], []
    with open(metrics_path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(METRIC_COLUMNS)
        while state.step < cfg.train.steps:
            row = train_step(state, batcher)
            if row is None:
                raise FloatingPointError(f"non-finite values at step {state.step + 1}")
            rows.append(row)
            writer.writerow(format_row(row))
            if cfg.train.log_every and state.step % cfg.train.log_every == 0:
                fh.flush()
                log.info("step %d L=%.4f L_u=%.4f L_s=%.4f", state.step, row["L"], row["L_u"], row["L_s"])
            every = cfg.train.checkpoint_every
            if every and state.step % every == 0:
                checkpoints.append(state.save(out / f"ckpt_{state.step:06d}.ckpt"))
    checkpoints.append(state.save(out / "final.ckpt"))
    return TrainResult(state, metrics_path, checkpoints, rows)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["step"] = int(row["step"])
        for key in METRIC_COLUMNS[2:]:
            row[key] = float(row[key])
    return rows
