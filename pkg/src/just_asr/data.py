"""Synthetic multilingual corpora, the manifest/feature-file formats, and batching."""

from __future__ import annotations

import logging
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

BLANK = "<blank>"
FEATURE_MAGIC = b"JUSTFEAT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<8sIII")


class ManifestError(ValueError):
    pass


class Vocabulary:
    """Grapheme <-> id map pooled over every language; id 0 is the transducer blank."""

    def __init__(self, graphemes: Sequence[str]) -> None:
        if BLANK in graphemes:
            raise ValueError(f"{BLANK!r} is reserved")
        if len(set(graphemes)) != len(graphemes):
            raise ValueError("duplicate graphemes in vocabulary")
        self.symbols = [BLANK, *graphemes]
        self._ids = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.symbols == other.symbols

    @property
    def graphemes(self) -> list[str]:
        return self.symbols[1:]

    def encode(self, graphemes: Sequence[str]) -> tuple[int, ...]:
        if BLANK in graphemes:
            raise ValueError("blank may not appear in a transcript")
        try:
            return tuple(self._ids[g] for g in graphemes)
        except KeyError as exc:
            raise KeyError(f"unknown grapheme {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.symbols[i] for i in ids]


@dataclass
class Utterance:
    id: str
    language: str
    features: np.ndarray
    transcript: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.id}: features must be a non-empty (frames, dim) matrix")
        if 0 in self.transcript:
            raise ValueError(f"{self.id}: transcript contains the blank id")

    @property
    def frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    utterances: list[Utterance]
    vocab: Vocabulary

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, i: int) -> Utterance:
        return self.utterances[i]

    def languages(self) -> list[str]:
        return sorted({u.language for u in self.utterances})

    def language_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for u in self.utterances:
            counts[u.language] = counts.get(u.language, 0) + 1
        return counts


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    languages: str = "en:9,pl:1"
    alphabet: int = 12
    graphemes_per_language: int = 8
    train_utterances: int = 2000
    eval_utterances: int = 200
    min_graphemes: int = 4
    max_graphemes: int = 10
    min_proto_frames: int = 3
    max_proto_frames: int = 8
    noise: float = 0.3
    markov_concentration: float = 0.3  # <= 0 gives i.i.d. uniform transcripts
    feature_dim: int = 80
    seed: int = 0

    def language_weights(self) -> list[tuple[str, float]]:
        pairs = []
        for item in self.languages.split(","):
            name, _, weight = item.strip().partition(":")
            pairs.append((name, float(weight or 1)))
        if not pairs or any(w <= 0 for _, w in pairs):
            raise ValueError(f"languages need positive weights, got {self.languages!r}")
        return pairs


def allocate_counts(weights: Sequence[float], total: int) -> list[int]:
    """Largest-remainder split of ``total`` proportional to ``weights``."""
    w = np.asarray(weights, dtype=float)
    exact = total * w / w.sum()
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _alphabet(n: int) -> list[str]:
    letters = [chr(ord("a") + i) for i in range(26)]
    if n <= 26:
        return letters[:n]
    return letters + [f"g{i}" for i in range(n - 26)]


def language_graphemes(cfg: SynthConfig) -> dict[str, list[str]]:
    """Each language gets a contiguous window of the shared alphabet; windows overlap."""
    names = [n for n, _ in cfg.language_weights()]
    alphabet = _alphabet(cfg.alphabet)
    g = min(cfg.graphemes_per_language, cfg.alphabet)
    span = cfg.alphabet - g
    out = {}
    for k, name in enumerate(names):
        start = 0 if len(names) == 1 else round(k * span / (len(names) - 1))
        out[name] = alphabet[start:start + g]
    return out


def prototypes(cfg: SynthConfig, vocab: Vocabulary) -> dict[int, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 0])
    protos = {}
    for gid in range(1, len(vocab)):
        frames = int(rng.integers(cfg.min_proto_frames, cfg.max_proto_frames + 1))
        protos[gid] = rng.normal(size=(frames, cfg.feature_dim)).astype(np.float32)
    return protos


def transition_matrices(cfg: SynthConfig) -> dict[str, np.ndarray]:
    """Per-language first-order grapheme transitions drawn from a Dirichlet prior."""
    out = {}
    for k, (name, graphemes) in enumerate(language_graphemes(cfg).items()):
        n = len(graphemes)
        if cfg.markov_concentration <= 0:
            out[name] = np.full((n, n), 1.0 / n)
        else:
            rng = np.random.default_rng([cfg.seed, 2, k])
            out[name] = rng.dirichlet(np.full(n, cfg.markov_concentration), size=n)
    return out


def _sample_transcript(rng: np.random.Generator, graphemes: list[str], trans: np.ndarray, n: int) -> list[str]:
    k = int(rng.integers(len(graphemes)))
    seq = [k]
    for _ in range(n - 1):
        k = int(rng.choice(len(graphemes), p=trans[k]))
        seq.append(k)
    return [graphemes[i] for i in seq]


def synth_vocabulary(cfg: SynthConfig) -> Vocabulary:
    pooled = sorted({g for gs in language_graphemes(cfg).values() for g in gs})
    return Vocabulary(pooled)


def synth_corpus(cfg: SynthConfig, split: str = "train", n_utterances: Optional[int] = None) -> Corpus:
    """Imbalanced toy corpus: each utterance concatenates grapheme prototypes plus noise.

    Transcripts follow a per-language Markov chain over that language's
    graphemes.  Prototypes and chains depend only on ``cfg.seed``, so train
    and eval splits share them.
    """
    if n_utterances is None:
        n_utterances = cfg.train_utterances if split == "train" else cfg.eval_utterances
    weights = cfg.language_weights()
    counts = allocate_counts([w for _, w in weights], n_utterances)
    for (name, _), n in zip(weights, counts):
        if n == 0:
            raise ValueError(f"language {name!r} would receive zero utterances")
    vocab = synth_vocabulary(cfg)
    protos = prototypes(cfg, vocab)
    per_lang = language_graphemes(cfg)
    chains = transition_matrices(cfg)
    rng = np.random.default_rng([cfg.seed, 1, zlib.crc32(split.encode())])
    langs = [name for (name, _), n in zip(weights, counts) for _ in range(n)]
    order = rng.permutation(len(langs))
    utts = []
    for i, j in enumerate(order):
        lang = langs[j]
        n_g = int(rng.integers(cfg.min_graphemes, cfg.max_graphemes + 1))
        ids = vocab.encode(_sample_transcript(rng, per_lang[lang], chains[lang], n_g))
        feats = np.concatenate([protos[g] for g in ids])
        if cfg.noise > 0:
            feats = feats + rng.normal(scale=cfg.noise, size=feats.shape).astype(np.float32)
        utts.append(Utterance(f"{split}-{i:06d}", lang, feats.astype(np.float32), ids))
    return Corpus(utts, vocab)


# ---------------------------------------------------------------- file formats


def write_features(path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    frames, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, frames, dim))
        fh.write(features.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated feature header")
    magic, version, frames, dim = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature version {version}")
    body = raw[_HEADER.size:]
    if len(body) != frames * dim * 4:
        raise ValueError(f"{path}: expected {frames}x{dim} floats, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(frames, dim).astype(np.float32)


def write_corpus(corpus: Corpus, out_dir, name: str = "manifest.tsv") -> Path:
    """Write feature files plus a manifest; paths in the manifest are relative to it."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    lines = []
    for u in corpus.utterances:
        rel = Path("feats") / f"{u.id}.feat"
        write_features(out / rel, u.features)
        text = " ".join(corpus.vocab.decode(u.transcript))
        lines.append(f"{u.id}\t{u.language}\t{rel.as_posix()}\t{text}\n")
    manifest = out / name
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


def load_manifest(path, feature_dim: Optional[int] = 80, vocab: Optional[Vocabulary] = None) -> Corpus:
    """Read a tab-separated manifest: id, language, feature path, transcript graphemes.

    ``feature_dim=None`` accepts any dimensionality.  When ``vocab`` is omitted
    one is pooled from every transcript in the file.
    """
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ManifestError(f"line {lineno}: expected 4 tab-separated fields")
        uid, lang, feat, text = fields
        feat_path = Path(feat) if Path(feat).is_absolute() else path.parent / feat
        if not feat_path.exists():
            raise ManifestError(f"line {lineno}: feature file {feat} not found")
        rows.append((lineno, uid, lang, feat_path, text.split()))
    if not rows:
        warnings.warn(f"{path}: empty manifest", stacklevel=2)
    if vocab is None:
        vocab = Vocabulary(sorted({g for *_, gs in rows for g in gs}))
    utts = []
    for lineno, uid, lang, feat_path, graphemes in rows:
        feats = read_features(feat_path)
        if feature_dim is not None and feats.shape[1] != feature_dim:
            raise ManifestError(f"line {lineno}: feature dim {feats.shape[1]} != {feature_dim}")
        try:
            ids = vocab.encode(graphemes)
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"line {lineno}: {exc}") from None
        utts.append(Utterance(uid, lang, feats, ids))
    return Corpus(utts, vocab)


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    features: np.ndarray       # B x L_max x F
    frame_lengths: np.ndarray  # B
    labels: np.ndarray         # B x U_max, zero padded
    label_lengths: np.ndarray  # B
    languages: list[str] = field(default_factory=list)
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.features.shape[0]

    def padded(self, extra_frames: int = 0, extra_labels: int = 0) -> "Batch":
        """Same batch with additional pure padding; used to check loss masking."""
        b, l, f = self.features.shape
        feats = np.zeros((b, l + extra_frames, f), dtype=self.features.dtype)
        feats[:, :l] = self.features
        labels = np.zeros((b, self.labels.shape[1] + extra_labels), dtype=self.labels.dtype)
        labels[:, : self.labels.shape[1]] = self.labels
        return Batch(feats, self.frame_lengths.copy(), labels, self.label_lengths.copy(),
                     list(self.languages), list(self.ids))


def collate(utts: Sequence[Utterance]) -> Batch:
    frames = np.array([u.frames for u in utts], dtype=np.int64)
    lab_len = np.array([len(u.transcript) for u in utts], dtype=np.int64)
    dim = utts[0].features.shape[1]
    feats = np.zeros((len(utts), int(frames.max()), dim), dtype=np.float32)
    labels = np.zeros((len(utts), max(int(lab_len.max()), 1)), dtype=np.int64)
    for i, u in enumerate(utts):
        feats[i, : u.frames] = u.features
        labels[i, : len(u.transcript)] = u.transcript
    return Batch(feats, frames, labels, lab_len, [u.language for u in utts], [u.id for u in utts])


class Batcher:
    """Deterministic epoch plans: batch ``k`` of epoch ``e`` depends only on (seed, e, k)."""

    def __init__(self, corpus: Corpus, batch_size: int, seed: int = 0, bucket_by_length: bool = False) -> None:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(corpus) == 0:
            raise ValueError("cannot batch an empty corpus")
        self.corpus = corpus
        self.batch_size = batch_size
        self.seed = seed
        self.bucket_by_length = bucket_by_length
        self._cache: tuple[int, list[np.ndarray]] | None = None

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self.corpus) // self.batch_size)

    def plan(self, epoch: int) -> list[np.ndarray]:
        if self._cache is not None and self._cache[0] == epoch:
            return self._cache[1]
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.corpus))
        if self.bucket_by_length:
            lengths = np.array([self.corpus[i].frames for i in order])
            order = order[np.argsort(lengths, kind="stable")]
        chunks = [order[i:i + self.batch_size] for i in range(0, len(order), self.batch_size)]
        if self.bucket_by_length:
            chunks = [chunks[i] for i in rng.permutation(len(chunks))]
        self._cache = (epoch, chunks)
        return chunks

    def batch_at(self, step: int) -> Batch:
        epoch, k = divmod(step, self.batches_per_epoch)
        return collate([self.corpus[i] for i in self.plan(epoch)[k]])

    def epoch(self, epoch: int = 0) -> Iterator[Batch]:
        for idx in self.plan(epoch):
            yield collate([self.corpus[i] for i in idx])

    def __iter__(self) -> Iterator[Batch]:
        return self.epoch(0)
