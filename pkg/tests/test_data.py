import dataclasses

import numpy as np
import pytest

from just_asr.data import (
    BLANK,
    Batcher,
    Corpus,
    ManifestError,
    SynthConfig,
    Utterance,
    Vocabulary,
    allocate_counts,
    collate,
    load_manifest,
    read_features,
    synth_corpus,
    write_corpus,
    write_features,
)


def test_vocabulary_reserves_blank_at_zero():
    vocab = Vocabulary(["a", "b"])
    assert vocab.symbols[0] == BLANK
    assert vocab.encode(["b", "a"]) == (2, 1)
    assert vocab.decode([1, 2]) == ["a", "b"]
    with pytest.raises(ValueError):
        vocab.encode([BLANK])
    with pytest.raises(KeyError):
        vocab.encode(["z"])
    with pytest.raises(ValueError):
        Vocabulary(["a", "a"])


def test_language_counts_follow_weights():
    cfg = SynthConfig(train_utterances=1000, feature_dim=4)
    counts = synth_corpus(cfg, "train").language_counts()
    assert counts == {"en": 900, "pl": 100}


def test_largest_remainder_allocation_sums_to_total():
    assert allocate_counts([1, 1, 1], 10) == [4, 3, 3]
    assert sum(allocate_counts([0.2, 0.5, 0.3], 7)) == 7


def test_language_with_no_utterances_is_rejected():
    with pytest.raises(ValueError, match="zero utterances"):
        synth_corpus(SynthConfig(languages="en:99,pl:1", train_utterances=10, feature_dim=4))


def test_nonpositive_weight_is_rejected():
    with pytest.raises(ValueError):
        SynthConfig(languages="en:1,pl:0").language_weights()


def test_same_seed_gives_identical_corpora(synth_cfg):
    a, b = synth_corpus(synth_cfg), synth_corpus(synth_cfg)
    for u, v in zip(a.utterances, b.utterances):
        assert u.id == v.id and u.transcript == v.transcript and u.language == v.language
        assert u.features.tobytes() == v.features.tobytes()
    c = synth_corpus(dataclasses.replace(synth_cfg, seed=1))
    assert any(u.transcript != v.transcript for u, v in zip(a.utterances, c.utterances))


def test_noiseless_utterances_with_equal_transcripts_have_equal_features():
    cfg = SynthConfig(noise=0.0, train_utterances=400, min_graphemes=4, max_graphemes=4,
                      graphemes_per_language=2, feature_dim=4, markov_concentration=0)
    seen = {}
    pairs = 0
    for u in synth_corpus(cfg).utterances:
        if u.transcript in seen:
            assert np.array_equal(seen[u.transcript], u.features)
            pairs += 1
        seen[u.transcript] = u.features
    assert pairs > 0


def test_train_and_eval_share_prototypes_and_vocabulary(synth_cfg):
    tr, ev = synth_corpus(synth_cfg, "train"), synth_corpus(synth_cfg, "eval")
    assert tr.vocab == ev.vocab
    assert len(ev) == synth_cfg.eval_utterances
    assert {u.id for u in tr.utterances}.isdisjoint(u.id for u in ev.utterances)


def test_utterance_invariants(synth_cfg):
    corpus = synth_corpus(synth_cfg)
    for u in corpus.utterances:
        assert u.frames >= 1
        assert all(0 < g < len(corpus.vocab) for g in u.transcript)
        assert np.isfinite(u.features).all()
        assert u.features.shape[1] == synth_cfg.feature_dim


def test_each_language_uses_its_own_graphemes(synth_cfg):
    corpus = synth_corpus(synth_cfg)
    used = {}
    for u in corpus.utterances:
        used.setdefault(u.language, set()).update(u.transcript)
    assert used["en"] != used["pl"]


def test_feature_file_round_trip(tmp_path, rng):
    feats = rng.normal(size=(7, 5)).astype(np.float32)
    path = tmp_path / "x.feat"
    write_features(path, feats)
    raw = path.read_bytes()
    assert raw[:8] == b"JUSTFEAT"
    assert int.from_bytes(raw[8:12], "little") == 1
    assert len(raw) == 20 + 7 * 5 * 4
    assert np.array_equal(read_features(path), feats)


def test_feature_file_with_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "x.feat"
    path.write_bytes(b"NOTAFEAT" + bytes(12))
    with pytest.raises(ValueError, match="magic"):
        read_features(path)


def test_manifest_round_trip_preserves_order(tmp_path, synth_cfg):
    corpus = synth_corpus(synth_cfg)
    sub = Corpus(corpus.utterances[:3], corpus.vocab)
    manifest = write_corpus(sub, tmp_path)
    loaded = load_manifest(manifest, feature_dim=synth_cfg.feature_dim, vocab=corpus.vocab)
    assert [u.id for u in loaded.utterances] == [u.id for u in sub.utterances]
    for u, v in zip(loaded.utterances, sub.utterances):
        assert u.transcript == v.transcript and np.array_equal(u.features, v.features)


def test_manifest_missing_field_names_the_line(tmp_path):
    write_features(tmp_path / "a.feat", np.zeros((3, 80), dtype=np.float32))
    (tmp_path / "m.tsv").write_text("u1\ten\ta.feat\ta b\nu2\ten\ta.feat\n")
    with pytest.raises(ManifestError, match="line 2: expected 4 tab-separated fields"):
        load_manifest(tmp_path / "m.tsv")


def test_manifest_feature_dim_is_checked(tmp_path):
    write_features(tmp_path / "a.feat", np.zeros((3, 12), dtype=np.float32))
    (tmp_path / "m.tsv").write_text("u1\ten\ta.feat\ta b\n")
    with pytest.raises(ManifestError, match="feature dim"):
        load_manifest(tmp_path / "m.tsv")
    assert len(load_manifest(tmp_path / "m.tsv", feature_dim=12)) == 1


def test_empty_manifest_warns(tmp_path):
    (tmp_path / "m.tsv").write_text("")
    with pytest.warns(UserWarning, match="empty"):
        corpus = load_manifest(tmp_path / "m.tsv")
    assert len(corpus) == 0


def _toy_corpus(lengths):
    vocab = Vocabulary(["a"])
    utts = [Utterance(f"u{i}", "en", np.ones((n, 2), dtype=np.float32), (1,)) for i, n in enumerate(lengths)]
    return Corpus(utts, vocab)


def test_batch_sizes_cover_the_corpus():
    batches = list(Batcher(_toy_corpus([3] * 10), 4, seed=0))
    assert [len(b) for b in batches] == [4, 4, 2]
    ids = [i for b in batches for i in b.ids]
    assert sorted(ids) == sorted(f"u{i}" for i in range(10))


def test_batcher_is_deterministic_and_step_addressable():
    corpus = _toy_corpus(range(1, 11))
    a, b = Batcher(corpus, 3, seed=5), Batcher(corpus, 3, seed=5)
    assert [x.ids for x in a.epoch(2)] == [x.ids for x in b.epoch(2)]
    # step k of the flat stream is batch k mod n of epoch k div n
    n = a.batches_per_epoch
    assert a.batch_at(2 * n + 1).ids == list(b.epoch(2))[1].ids


def test_bucketing_reduces_padding_waste():
    rng = np.random.default_rng(0)
    corpus = _toy_corpus(rng.integers(1, 60, size=200))

    def waste(batcher):
        return sum(int((b.frame_lengths.max() - b.frame_lengths).sum()) for b in batcher.epoch(0))

    assert waste(Batcher(corpus, 8, seed=0, bucket_by_length=True)) < waste(Batcher(corpus, 8, seed=0)) / 3


def test_collate_pads_and_records_lengths():
    vocab = Vocabulary(["a", "b"])
    utts = [Utterance("x", "en", np.ones((2, 3), dtype=np.float32), (1, 2, 1)),
            Utterance("y", "pl", np.ones((5, 3), dtype=np.float32), (2,))]
    batch = collate(utts)
    assert batch.features.shape == (2, 5, 3)
    assert batch.features[0, 2:].sum() == 0
    assert batch.labels.tolist() == [[1, 2, 1], [2, 0, 0]]
    assert batch.frame_lengths.tolist() == [2, 5]
    assert batch.label_lengths.tolist() == [3, 1]
    assert batch.languages == ["en", "pl"]
    assert vocab.decode(batch.labels[0]) == ["a", "b", "a"]


def test_markov_transcripts_are_not_uniform():
    cfg = SynthConfig(train_utterances=500, feature_dim=4)
    corpus = synth_corpus(cfg)
    v = len(corpus.vocab)
    bigrams = np.zeros((v, v))
    for u in corpus.utterances:
        if u.language == "en":
            for a, b in zip(u.transcript, u.transcript[1:]):
                bigrams[a, b] += 1
    rows = bigrams[bigrams.sum(1) > 0]
    top_share = (rows.max(1) / rows.sum(1)).mean()
    assert top_share > 2.0 / cfg.graphemes_per_language  # well above the 1/8 of a uniform chain
