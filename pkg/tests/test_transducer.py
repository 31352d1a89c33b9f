import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from just_asr.autodiff import Tape, Tensor, grad_check, high_precision, ops
from just_asr.transducer import (
    BLANK_ID,
    Transducer,
    TransducerConfig,
    greedy_search,
    lattice_forward_backward,
    rnnt_lattice_loss,
    rnnt_loss,
)
from just_asr.verification import enumerate_alignment_nll, random_lattice, rnnt_oracle_check


def _loss(logp, labels):
    with high_precision():
        lattice = Tensor(np.asarray(logp)[None])
        lab = np.asarray(labels, dtype=int).reshape(1, -1)
        return float(rnnt_loss(lattice, lab, [logp.shape[0]], [lab.shape[1]]).data)


def test_single_frame_no_labels():
    logp = np.log(np.array([[[0.3, 0.7]]]))
    assert _loss(logp, []) == pytest.approx(-math.log(0.3), abs=1e-12)


def test_two_frames_one_label_by_hand():
    p = np.array([
        [[0.5, 0.3, 0.2], [0.6, 0.1, 0.3]],
        [[0.2, 0.7, 0.1], [0.9, 0.05, 0.05]],
    ])
    # emit at t=0 then blank, blank; or blank at t=0, emit at t=1, blank
    paths = p[0, 0, 2] * p[0, 1, 0] * p[1, 1, 0] + p[0, 0, 0] * p[1, 0, 2] * p[1, 1, 0]
    assert _loss(np.log(p), [2]) == pytest.approx(-math.log(paths), abs=1e-12)


@given(seed=st.integers(0, 10_000))
def test_dp_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    T, U, V = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(2, 5))
    logp, labels = random_lattice(rng, T, U, V)
    assert abs(_loss(logp, labels) - enumerate_alignment_nll(logp, labels)) <= 1e-9


def test_oracle_check_report():
    report = rnnt_oracle_check(n=100, seed=1)
    assert report.passed and report.cases == 100


def test_alpha_and_beta_agree_on_the_total():
    rng = np.random.default_rng(0)
    logp, labels = random_lattice(rng, 5, 3, 4)
    alpha, beta, ll = lattice_forward_backward(logp, labels)
    assert alpha[-1, -1] + logp[-1, -1, BLANK_ID] == pytest.approx(ll)
    assert beta[0, 0] == pytest.approx(ll)


@pytest.mark.parametrize("seed", range(5))
def test_lattice_gradient_matches_finite_differences(seed):
    with high_precision():
        rng = np.random.default_rng(seed)
        logp, labels = random_lattice(rng, 4, 2, 3)
        x = Tensor(logp[None])
        report = grad_check(lambda v: rnnt_loss(v, labels[None], [4], [2]), x, tol=1e-6)
        assert report.passed, report.max_rel_error


def test_certain_blank_frame_leaves_loss_unchanged():
    rng = np.random.default_rng(2)
    logp, labels = random_lattice(rng, 3, 2, 4)
    extra = np.full((1, 3, 4), -np.inf)
    extra[..., BLANK_ID] = 0.0
    # the new frame sits before the old ones so that its blank is forced at every u
    longer = np.concatenate([extra, logp])
    shifted = _loss(longer, labels)
    assert shifted == pytest.approx(_loss(logp, labels), abs=1e-12)


def test_row_shift_before_log_softmax_is_invariant():
    with high_precision():
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(1, 3, 3, 4))
        labels = np.array([[1, 3]])
        base = float(rnnt_loss(ops.log_softmax(Tensor(logits), -1), labels, [3], [2]).data)
        logits[0, 1, 2] += 17.0
        shifted = float(rnnt_loss(ops.log_softmax(Tensor(logits), -1), labels, [3], [2]).data)
        assert shifted == pytest.approx(base, abs=1e-12)


def test_padding_does_not_change_the_batch_loss():
    with high_precision():
        rng = np.random.default_rng(4)
        a, la = random_lattice(rng, 3, 2, 4)
        b, lb = random_lattice(rng, 2, 1, 4)
        single = (_loss(a, la) + _loss(b, lb)) / 2
        pad = np.full((2, 5, 4, 4), -1.0)
        pad[0, :3, :3], pad[1, :2, :2] = a, b
        labels = np.array([[*la, 0, 0], [*lb, 0, 0, 0]])
        batched = float(rnnt_loss(Tensor(pad), labels, [3, 2], [2, 1]).data)
        assert batched == pytest.approx(single, abs=1e-12)


def test_invalid_inputs_are_rejected():
    logp = np.log(np.full((2, 2, 3), 1 / 3))
    with pytest.raises(ValueError):
        rnnt_lattice_loss(logp, [3])
    with pytest.raises(ValueError):
        rnnt_lattice_loss(logp, [0])
    with pytest.raises(ValueError):
        rnnt_loss(Tensor(np.zeros((1, 1, 2, 3))), np.array([[1]]), [0], [1])


def test_greedy_all_blank_is_empty():
    out = greedy_search(4, lambda t, s: np.array([5.0, 0.0, 0.0]), lambda s, k: s, None)
    assert out == []


def test_greedy_rigged_single_emission():
    def scores(t, emitted):
        return np.array([0.0, 0.0, 0.0, 1.0]) if (t == 1 and not emitted) else np.array([1.0, 0, 0, 0])
    out = greedy_search(3, scores, lambda s, k: True, False)
    assert out == [3]


def test_greedy_respects_the_symbol_cap():
    out = greedy_search(2, lambda t, s: np.array([0.0, 1.0]), lambda s, k: s, None, max_symbols_per_frame=3)
    assert out == [1] * 6


def _transducer(vocab=5, d=6, seed=0):
    return Transducer(d, vocab, TransducerConfig(layers=2, pred_dim=8, joint_dim=7), np.random.default_rng(seed))


def test_encoder_projection_shapes_and_eval_before_train():
    tr = _transducer()
    m = Tensor(np.random.default_rng(0).normal(size=(2, 4, 6)))
    with pytest.raises(RuntimeError):
        tr.encode_for_decoder(m, train=False)
    assert tr.encode_for_decoder(m, train=True).shape == (2, 4, 7)
    zero = tr.encode_for_decoder(Tensor(np.zeros((1, 3, 6))), train=False).data
    again = tr.encode_for_decoder(Tensor(np.zeros((1, 3, 6))), train=False).data
    assert np.array_equal(zero, again)


def test_joint_rows_are_normalised():
    tr = _transducer()
    rng = np.random.default_rng(1)
    lattice = tr.joint(Tensor(rng.normal(size=(2, 3, 7))), tr.predict(np.array([[1, 2], [3, 0]])))
    assert lattice.shape == (2, 3, 3, 5)
    np.testing.assert_allclose(np.exp(lattice.data).sum(-1), 1.0, atol=1e-6)


def test_greedy_decode_agrees_with_the_joint_network():
    """The incremental decoder must score exactly what the training lattice scores."""
    tr = _transducer(seed=3)
    rng = np.random.default_rng(3)
    enc = Tensor(rng.normal(scale=3.0, size=(1, 6, 7)))
    hyp = tr.greedy_decode(enc[0], max_symbols_per_frame=2)
    lattice = tr.joint(enc, tr.predict(np.array([hyp or [1]])[:, : max(1, len(hyp))])).data[0]
    t = u = 0
    emitted = []
    per_frame = 0
    while t < 6:
        k = int(np.argmax(lattice[t, u])) if u <= len(hyp) else BLANK_ID
        if k == BLANK_ID or per_frame == 2:
            t, per_frame = t + 1, 0
            continue
        emitted.append(k)
        u += 1
        per_frame += 1
        if u > len(hyp):
            break
    assert emitted == hyp


def test_label_outside_output_range_is_rejected():
    tr = _transducer(vocab=4)
    enc = tr.encode_for_decoder(Tensor(np.ones((1, 2, 6))), train=True)
    with pytest.raises(ValueError):
        tr.loss(enc, np.array([[4]]), [2], [1])
