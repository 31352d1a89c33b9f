"""Error rates, per-language reports, and the beta / checkpoint sweep harnesses."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import Config
from .data import Batch, Corpus, collate
from .trainer import TrainState, read_metrics, train

log = logging.getLogger(__name__)

BETA_GRID = (0.0, 0.03, 0.05, 0.07, 0.1)


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref: Sequence, hyp: Sequence) -> float:
    """Per-utterance error rate; an empty reference gives inf (or 0 for an empty hypothesis)."""
    if isinstance(ref, str):
        ref = ref.split()
    if isinstance(hyp, str):
        hyp = hyp.split()
    if not ref:
        return 0.0 if not hyp else math.inf
    return edit_distance(ref, hyp) / len(ref)


@dataclass
class EvalReport:
    per_language: dict[str, float]
    counts: dict[str, int]
    errors: dict[str, int] = field(default_factory=dict)
    ref_lengths: dict[str, int] = field(default_factory=dict)
    excluded: str = ""

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_language.values())))

    @property
    def average_excluding(self) -> float:
        rest = [w for lang, w in self.per_language.items() if lang != self.excluded]
        return float(np.mean(rest)) if rest else float("nan")

    @property
    def pooled(self) -> float:
        total = sum(self.ref_lengths.values())
        return sum(self.errors.values()) / total if total else 0.0

    def row(self) -> dict:
        out = {f"wer_{lang}": self.per_language[lang] for lang in sorted(self.per_language)}
        out["avg"] = self.average
        out["avg_excl"] = self.average_excluding
        return out


def report_from_pairs(pairs: Sequence[tuple[str, Sequence, Sequence]], exclude_language: str = "") -> EvalReport:
    """Pool (language, ref, hyp) triples into per-language corpus error rates."""
    errors: dict[str, int] = {}
    lengths: dict[str, int] = {}
    counts: dict[str, int] = {}
    for lang, ref, hyp in pairs:
        errors[lang] = errors.get(lang, 0) + edit_distance(ref, hyp)
        lengths[lang] = lengths.get(lang, 0) + len(ref)
        counts[lang] = counts.get(lang, 0) + 1
    per_lang = {}
    for lang in sorted(counts):
        if lengths[lang]:
            per_lang[lang] = errors[lang] / lengths[lang]
        else:
            per_lang[lang] = 0.0 if errors[lang] == 0 else math.inf
    if not exclude_language and counts:
        exclude_language = max(sorted(counts), key=lambda k: counts[k])
    return EvalReport(per_lang, counts, errors, lengths, exclude_language)


def _batches(corpus: Corpus, size: int):
    for i in range(0, len(corpus), size):
        yield collate(corpus.utterances[i:i + size])


def decode_corpus(state: TrainState, corpus: Corpus, batch_size: int = 32) -> list[list[str]]:
    """Greedy hypotheses, as grapheme strings, for every utterance in order."""
    max_sym = state.config.eval.max_symbols_per_frame
    hyps = []
    for batch in _batches(corpus, batch_size):
        for ids in state.model.decode(batch, max_sym):
            hyps.append(state.vocab.decode(ids))
    return hyps


def _references(state: TrainState, corpus: Corpus) -> list[list[str]]:
    known = set(state.vocab.graphemes)
    refs = []
    for u in corpus.utterances:
        ref = corpus.vocab.decode(u.transcript)
        unknown = [g for g in ref if g not in known]
        if unknown:
            raise ValueError(f"{u.id}: grapheme {unknown[0]!r} is not in the model vocabulary")
        refs.append(ref)
    return refs


def evaluate(state: TrainState, corpus: Corpus, exclude_language: str = "") -> EvalReport:
    refs = _references(state, corpus)
    hyps = decode_corpus(state, corpus)
    pairs = [(u.language, r, h) for u, r, h in zip(corpus.utterances, refs, hyps)]
    return report_from_pairs(pairs, exclude_language or state.config.eval.exclude_language)


def write_rows(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: list[str] = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return path


def sweep_beta(cfg: Config, corpus: Corpus, eval_corpus: Corpus, out_dir,
               values: Sequence[float] = BETA_GRID) -> list[dict]:
    """Train from scratch in ``just`` mode once per beta and evaluate each run."""
    out = Path(out_dir)
    rows = []
    for beta in sorted(values):
        run_cfg = cfg.copy()
        run_cfg.train.mode = "just"
        run_cfg.train.init_checkpoint = ""
        run_cfg.loss.beta = float(beta)
        result = train(run_cfg, corpus, out / f"beta_{beta:g}")
        report = evaluate(result.state, eval_corpus)
        rows.append({"beta": float(beta), **report.row()})
        log.info("beta=%g avg WER %.4f", beta, report.average)
    write_rows(out / "sweep_beta.csv", rows)
    return rows


def trailing_mean(metrics: list[dict], step: int, key: str = "L_u", window: int = 50) -> float:
    vals = [r[key] for r in metrics if step - window < r["step"] <= step]
    if not vals:
        raise ValueError(f"no metrics rows at or before step {step}")
    return float(np.mean(vals))


def list_checkpoints(run_dir) -> list[Path]:
    return sorted(Path(run_dir).glob("ckpt_*.ckpt"))


def sweep_checkpoints(run_dir, cfg: Config, corpus: Corpus, eval_corpus: Corpus, out_dir,
                      window: int = 50, checkpoints: Optional[Sequence[Path]] = None) -> list[dict]:
    """JUST-finetune from each saved pretraining checkpoint and evaluate.

    The ``L_u`` column is the mean pretraining L_u over the ``window`` steps
    ending at that checkpoint.
    """
    run_dir = Path(run_dir)
    out = Path(out_dir)
    metrics = read_metrics(run_dir / "metrics.csv")
    ckpts = list(checkpoints) if checkpoints is not None else list_checkpoints(run_dir)
    rows = []
    for path in ckpts:
        pre = TrainState.load(path)
        ft_cfg = cfg.copy()
        ft_cfg.train.mode = "finetune_just"
        ft_cfg.train.init_checkpoint = str(path)
        if ft_cfg.loss.beta is None:
            ft_cfg.loss.beta = 0.01
        result = train(ft_cfg, corpus, out / f"from_{pre.step:06d}")
        report = evaluate(result.state, eval_corpus)
        rows.append({"pretrain_step": pre.step, "L_u": trailing_mean(metrics, pre.step, "L_u", window),
                     "avg_wer": report.average})
    write_rows(out / "sweep_checkpoints.csv", rows)
    return rows
