"""Command-line entry point: ``just-asr <command> [--key value ...]``.

Every dotted ``--section.key value`` flag sets a configuration value; an
optional ``--config FILE`` supplies the same pairs one per line and explicit
flags win.  Exit status is 0 on success, 1 for invalid input or
configuration, and 2 for numerical failure (non-finite values or a failed
verification check).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import CheckpointError, load_checkpoint
from .config import Config, ConfigError, build_config
from .data import Corpus, ManifestError, load_manifest, synth_corpus, write_corpus
from .evaluation import BETA_GRID, decode_corpus, evaluate, sweep_beta, sweep_checkpoints, write_rows
from .trainer import TrainState, read_metrics, train
from .verification import gradient_suite, rnnt_oracle_check

log = logging.getLogger("just_asr")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(ValueError):
    pass


def parse_overrides(tokens: Sequence[str]) -> list[tuple[str, str]]:
    """``--a.b 1 --c=2`` -> [("a.b", "1"), ("c", "2")]."""
    pairs = []
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}; config flags look like --section.key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise UsageError(f"flag --{key} needs a value")
        pairs.append((key, value))
    return pairs


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="just-asr", description=__doc__.splitlines()[0], allow_abbrev=False)
    top.add_argument("-v", "--verbose", action="store_true")
    sub = top.add_subparsers(dest="command", required=True)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, allow_abbrev=False)
        p.add_argument("--config", default="", help="file of 'key value' lines")
        p.add_argument("--preset", default="", help="named bundle of settings, e.g. toy")
        return p

    p = command("synth", "write the synthetic train/eval corpora as manifests + feature files")
    p.add_argument("--out", required=True)

    p = command("train", "train in the mode given by --train.mode")
    p.add_argument("--resume", action="store_true", help="keep optimiser state of train.init_checkpoint")
    p.add_argument("--figure", action="store_true", help="also render loss curves to PNG")

    p = command("evaluate", "per-language WER of a checkpoint, as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="", help="CSV path (default: stdout)")

    p = command("decode", "greedy hypotheses, one per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--with-ids", action="store_true", help="prefix each line with the utterance id")

    p = command("sweep-beta", "train + evaluate once per beta value")
    p.add_argument("--out", required=True)
    p.add_argument("--values", default=",".join(f"{b:g}" for b in BETA_GRID))
    p.add_argument("--figure", action="store_true")

    p = command("sweep-checkpoints", "JUST-finetune every checkpoint of a pretraining run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=50, help="steps averaged for the L_u column")
    p.add_argument("--figure", action="store_true")

    p = command("grad-check", "finite-difference check of every loss term")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-5)

    p = command("oracle-check", "transducer DP against brute-force alignment enumeration")
    p.add_argument("--cases", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-9)
    return top


def _config(args, pairs, base: Optional[Config] = None) -> Config:
    return build_config(pairs, preset=args.preset, config_file=args.config, base=base)


def load_corpora(cfg: Config, eval_split: bool = True) -> tuple[Corpus, Optional[Corpus]]:
    """Manifests when ``data.manifest`` is set, otherwise the synthetic corpus."""
    d, dim = cfg.data, cfg.model.feature_dim
    if d.manifest:
        corpus = load_manifest(d.manifest, dim)
        held_out = load_manifest(d.eval_manifest, dim) if (eval_split and d.eval_manifest) else None
        return corpus, held_out
    if d.synth.feature_dim != cfg.model.feature_dim:
        raise ConfigError("data.synth.feature_dim must equal model.feature_dim")
    return synth_corpus(d.synth, "train"), synth_corpus(d.synth, "eval") if eval_split else None


def _eval_corpus(cfg: Config) -> Corpus:
    d, dim = cfg.data, cfg.model.feature_dim
    if d.eval_manifest:
        return load_manifest(d.eval_manifest, dim)
    if d.manifest:
        return load_manifest(d.manifest, dim)
    return synth_corpus(d.synth, "eval")


def _load_state(args, pairs) -> TrainState:
    saved = Config.from_dict(load_checkpoint(args.checkpoint).meta["config"])
    cfg = _config(args, pairs, base=saved)
    return TrainState.load(args.checkpoint, cfg)


def _emit_csv(rows: list[dict], out: str = "") -> None:
    if out:
        write_rows(out, rows)
        return
    writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


def cmd_synth(args, pairs) -> int:
    cfg = _config(args, pairs)
    out = Path(args.out)
    for split in ("train", "eval"):
        corpus = synth_corpus(cfg.data.synth, split)
        path = write_corpus(corpus, out / split)
        counts = ", ".join(f"{k}={v}" for k, v in sorted(corpus.language_counts().items()))
        print(f"{path}\t{len(corpus)} utterances ({counts})")
    return EXIT_OK


def cmd_train(args, pairs) -> int:
    cfg = _config(args, pairs)
    corpus, _ = load_corpora(cfg, eval_split=False)
    result = train(cfg, corpus, cfg.train.out_dir, resume=args.resume)
    last = result.rows[-1] if result.rows else None
    print(f"metrics\t{result.metrics_path}")
    print(f"checkpoint\t{result.checkpoints[-1]}")
    if last:
        print(f"final\tstep={last['step']} L={last['L']:.4f} L_u={last['L_u']:.4f} L_s={last['L_s']:.4f}")
    if args.figure:
        from .plotting import plot_training_curves
        print(f"figure\t{plot_training_curves(read_metrics(result.metrics_path), result.metrics_path.with_suffix('.png'))}")
    return EXIT_OK


def cmd_evaluate(args, pairs) -> int:
    state = _load_state(args, pairs)
    report = evaluate(state, _eval_corpus(state.config))
    rows = [{"language": lang, "utterances": report.counts[lang], "wer": report.per_language[lang]}
            for lang in sorted(report.per_language)]
    rows.append({"language": "avg", "utterances": sum(report.counts.values()), "wer": report.average})
    rows.append({"language": f"avg_excl_{report.excluded}",
                 "utterances": sum(n for k, n in report.counts.items() if k != report.excluded),
                 "wer": report.average_excluding})
    rows.append({"language": "pooled", "utterances": sum(report.counts.values()), "wer": report.pooled})
    _emit_csv(rows, args.out)
    return EXIT_OK


def cmd_decode(args, pairs) -> int:
    state = _load_state(args, pairs)
    corpus = _eval_corpus(state.config)
    for utt, hyp in zip(corpus.utterances, decode_corpus(state, corpus)):
        text = " ".join(hyp)
        print(f"{utt.id}\t{text}" if args.with_ids else text)
    return EXIT_OK


def cmd_sweep_beta(args, pairs) -> int:
    cfg = _config(args, pairs)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    if not values or any(v < 0 for v in values):
        raise UsageError("--values needs at least one non-negative beta")
    corpus, held_out = load_corpora(cfg)
    rows = sweep_beta(cfg, corpus, held_out if held_out is not None else corpus, args.out, values)
    _emit_csv(rows)
    if args.figure:
        from .plotting import plot_beta_sweep
        plot_beta_sweep(rows, Path(args.out) / "sweep_beta.png")
    return EXIT_OK


def cmd_sweep_checkpoints(args, pairs) -> int:
    cfg = _config(args, pairs)
    corpus, held_out = load_corpora(cfg)
    rows = sweep_checkpoints(args.run_dir, cfg, corpus, held_out if held_out is not None else corpus,
                             args.out, window=args.window)
    if not rows:
        raise UsageError(f"no ckpt_*.ckpt files in {args.run_dir}")
    _emit_csv(rows)
    if args.figure:
        from .plotting import plot_checkpoint_sweep
        plot_checkpoint_sweep(rows, Path(args.out) / "sweep_checkpoints.png")
    return EXIT_OK


def cmd_grad_check(args, pairs) -> int:
    worst = gradient_suite(range(args.seeds), tol=args.tol)
    rows = [{"term": k, "max_rel_error": v, "tol": args.tol, "passed": v <= args.tol} for k, v in worst.items()]
    _emit_csv(rows)
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_NUMERIC


def cmd_oracle_check(args, pairs) -> int:
    report = rnnt_oracle_check(n=args.cases, tol=args.tol)
    _emit_csv([{"cases": report.cases, "max_abs_error": report.max_abs_error,
                "seconds": round(report.seconds, 3), "passed": report.passed}])
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "decode": cmd_decode,
    "sweep-beta": cmd_sweep_beta,
    "sweep-checkpoints": cmd_sweep_checkpoints,
    "grad-check": cmd_grad_check,
    "oracle-check": cmd_oracle_check,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        pairs = parse_overrides(rest)
        return COMMANDS[args.command](args, pairs)
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ManifestError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
