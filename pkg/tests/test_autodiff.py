import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from just_asr.autodiff import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    default_dtype,
    grad_check,
    high_precision,
    ops,
)


def _t(rng, *shape, low=None, high=None):
    if low is not None:
        data = rng.uniform(low, high, size=shape)
    else:
        data = rng.normal(size=shape)
    return Tensor(data, dtype=np.float64)


def _weighted(out: Tensor, seed: int) -> Tensor:
    # fixed random projection so every output entry contributes a distinct weight
    w = np.random.default_rng([seed, 99]).normal(size=out.shape)
    return ops.sum(ops.mul(out, Tensor(w, dtype=out.dtype)))


def _case(name: str, seed: int):
    """(function of inputs -> tensor, input list) for one primitive on random shapes."""
    rng = np.random.default_rng(seed)
    b, t, d = (int(v) for v in rng.integers(1, 4, size=3))
    d += 1
    if name == "add":
        return ops.add, [_t(rng, b, d), _t(rng, b, d)]
    if name == "sub":
        return ops.sub, [_t(rng, b, d), _t(rng, b, d)]
    if name == "mul":
        return ops.mul, [_t(rng, b, d), _t(rng, b, d)]
    if name == "div":
        return ops.div, [_t(rng, b, d), _t(rng, b, d, low=0.5, high=2.0)]
    if name == "scalar_tensor":
        return lambda x, s: ops.div(ops.add(ops.mul(x, s), 0.3), s), [_t(rng, b, d), _t(rng, low=0.5, high=2.0)]
    if name == "neg":
        return ops.neg, [_t(rng, b, d)]
    if name == "bias_add":
        return ops.bias_add, [_t(rng, b, t, d), _t(rng, d)]
    if name == "outer_add":
        return ops.outer_add, [_t(rng, b, t, d), _t(rng, b, t + 1, d)]
    if name == "exp":
        return ops.exp, [_t(rng, b, d)]
    if name == "log":
        return ops.log, [_t(rng, b, d, low=0.3, high=3.0)]
    if name in ("tanh", "sigmoid", "swish", "square"):
        return getattr(ops, name), [_t(rng, b, d)]
    if name == "sum_axis":
        return lambda x: ops.sum(x, axis=1, keepdims=bool(seed % 2)), [_t(rng, b, t, d)]
    if name == "mean_axis":
        return lambda x: ops.mean(x, axis=(0, 2)), [_t(rng, b, t, d)]
    if name == "matmul":
        return ops.matmul, [_t(rng, b, t, d), _t(rng, d, 3)]
    if name == "matmul_batched":
        return ops.matmul, [_t(rng, b, t, d), _t(rng, b, d, 2)]
    if name == "transpose":
        return lambda x: ops.transpose(x, (2, 0, 1)), [_t(rng, b, t, d)]
    if name == "reshape":
        return lambda x: ops.reshape(x, (-1,)), [_t(rng, b, t, d)]
    if name == "slice":
        return lambda x: ops.slice(x, (slice(None), slice(0, None, 2), np.array([0, 0, d - 1]))), [_t(rng, b, t, d)]
    if name == "concat":
        return lambda x, y: ops.concat([x, y, x], axis=1), [_t(rng, b, t, d), _t(rng, b, 2, d)]
    if name == "stack":
        return lambda x, y: ops.stack([x, y], axis=1), [_t(rng, b, d), _t(rng, b, d)]
    if name == "embedding_lookup":
        ids = rng.integers(0, 5, size=(b, t))
        return lambda w: ops.embedding_lookup(w, ids), [_t(rng, 5, d)]
    if name == "mask_select":
        mask = rng.random((b, t)) < 0.5
        mask[0, 0] = True
        return lambda x: ops.mask_select(x, mask), [_t(rng, b, t, d)]
    if name == "where":
        cond = rng.random((b, d)) < 0.5
        return lambda x, y: ops.where(cond, x, y), [_t(rng, b, d), _t(rng, b, d)]
    if name == "masked_fill":
        mask = rng.random((b, d)) < 0.5
        return lambda x: ops.masked_fill(x, mask, -3.0), [_t(rng, b, d)]
    if name == "softmax":
        return lambda x: ops.softmax(x, axis=-1), [_t(rng, b, t, d)]
    if name == "log_softmax":
        return lambda x: ops.log_softmax(x, axis=1), [_t(rng, b, t, d)]
    if name == "layer_norm":
        return ops.layer_norm, [_t(rng, b, t, d), _t(rng, d), _t(rng, d)]
    if name == "batch_norm_train":
        mask = rng.random((b, t + 1)) < 0.7
        mask[0, 0] = mask[-1, -1] = True

        def bn(x, g, s):
            return ops.batch_norm(x, g, s, ops.BatchNormStats(d, dtype=np.float64), train=True, mask=mask)
        return bn, [_t(rng, b, t + 1, d), _t(rng, d), _t(rng, d)]
    if name == "batch_norm_eval":
        stats = ops.BatchNormStats(d, dtype=np.float64)
        stats.mean, stats.var, stats.batches = rng.normal(size=d), rng.uniform(0.5, 2, size=d), 1
        return lambda x, g, s: ops.batch_norm(x, g, s, stats, train=False), [_t(rng, b, t, d), _t(rng, d), _t(rng, d)]
    if name == "cosine_similarity":
        return ops.cosine_similarity, [_t(rng, b, t, d), _t(rng, b, t, d)]
    if name == "conv2d":
        return (lambda x, w, bias: ops.conv2d(x, w, bias, stride=(2, 2), padding=(1, 1)),
                [_t(rng, b, 2, t + 3, d + 2), _t(rng, 3, 2, 3, 3), _t(rng, 3)])
    if name == "depthwise_conv1d":
        return ops.depthwise_conv1d, [_t(rng, b, t + 2, d), _t(rng, 3, d)]
    raise KeyError(name)


PRIMITIVES = [
    "add", "sub", "mul", "div", "scalar_tensor", "neg", "bias_add", "outer_add", "exp", "log", "tanh",
    "sigmoid", "swish", "square", "sum_axis", "mean_axis", "matmul", "matmul_batched", "transpose",
    "reshape", "slice", "concat", "stack", "embedding_lookup", "mask_select", "where", "masked_fill",
    "softmax", "log_softmax", "layer_norm", "batch_norm_train", "batch_norm_eval", "cosine_similarity",
    "conv2d", "depthwise_conv1d",
]


@pytest.mark.parametrize("name", PRIMITIVES)
@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_primitive_gradients_match_finite_differences(name, seed):
    fn, inputs = _case(name, seed)
    # fourth-order stencil: a 1e-6 relative tolerance sits below the round-off of the 3-point one
    report = grad_check(lambda *xs: _weighted(fn(*xs), seed), inputs, eps=1e-4, tol=1e-6, points=5)
    assert report.passed, f"{name}: rel error {report.max_rel_error:.3g}"


def test_backward_of_sum_equals_sum_of_backwards():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def f(v):
        return ops.sum(ops.tanh(v) * v)

    def g(v):
        return ops.mean(ops.exp(v))

    with Tape():
        (f(x) + g(x)).backward()
    joint = x.grad.copy()
    x.zero_grad()
    with Tape():
        f(x).backward()
    with Tape():
        g(x).backward()
    np.testing.assert_allclose(joint, x.grad, rtol=1e-6)


def test_leaf_used_twice_accumulates():
    x = Tensor([2.0, -1.0], requires_grad=True)
    with Tape():
        ops.sum(x * x + x).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_tape_is_single_use():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        y = ops.sum(x * 3.0)
    y.backward()
    with pytest.raises(TapeError):
        tape.backward(y)


def test_backward_without_tape_is_rejected():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(TapeError):
        ops.sum(x).backward()


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = x * 2.0
        with pytest.raises(ShapeError):
            y.backward()


def test_no_implicit_broadcasting():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        ops.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    # scalars and 0-d tensors are the only exception
    assert ops.mul(Tensor(np.ones((2, 3))), Tensor(2.0)).shape == (2, 3)


def test_default_precision_is_single_and_switchable():
    assert default_dtype() == np.float32
    assert Tensor([1.0]).dtype == np.float32
    with high_precision():
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_rejects_non_finite_forward():
    x = Tensor([-1.0])
    with pytest.raises(FloatingPointError):
        grad_check(lambda v: ops.sum(ops.log(v)), x)


def test_grad_check_flags_a_wrong_gradient():
    from just_asr.autodiff.tensor import record

    def bad_square(v):
        return record(v.data ** 2, (v,), lambda g: (g * v.data,))  # missing factor 2

    x = Tensor(np.array([1.0, 2.0]))
    assert not grad_check(lambda v: ops.sum(bad_square(v)), x).passed


def test_straight_through_forward_is_exact_and_gradient_passes():
    soft = Tensor(np.array([[0.2, 0.5, 0.3]]), requires_grad=True)
    hard = np.array([[0.0, 1.0, 0.0]])
    with Tape():
        out = ops.straight_through(hard, soft)
        assert np.array_equal(out.data, hard.astype(np.float32))
        ops.sum(out * Tensor(np.array([[1.0, 2.0, 3.0]]))).backward()
    np.testing.assert_allclose(soft.grad, [[1.0, 2.0, 3.0]])


def test_batch_norm_eval_is_a_fixed_affine_map():
    rng = np.random.default_rng(1)
    stats = ops.BatchNormStats(4)
    gamma, beta = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    ops.batch_norm(Tensor(rng.normal(size=(5, 4))), gamma, beta, stats, train=True)
    x = rng.normal(size=(3, 4)).astype(np.float32)
    a = ops.batch_norm(Tensor(x), gamma, beta, stats, train=False).data
    b = ops.batch_norm(Tensor(x), gamma, beta, stats, train=False).data
    assert np.array_equal(a, b)
    # affine: f(x + y) - f(y) is linear in x
    y = rng.normal(size=(3, 4)).astype(np.float32)
    f = lambda v: ops.batch_norm(Tensor(v), gamma, beta, stats, train=False).data  # noqa: E731
    np.testing.assert_allclose(f(x + y) - f(y), f(x) - f(np.zeros_like(x)), atol=1e-5)


def test_batch_norm_eval_before_training_is_rejected():
    stats = ops.BatchNormStats(2)
    with pytest.raises(RuntimeError):
        ops.batch_norm(Tensor(np.ones((2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, train=False)


def test_batch_norm_mask_excludes_padding_from_statistics():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 3))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
    noisy = x.copy()
    noisy[0, 3:] = 1e3
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out1 = ops.batch_norm(Tensor(x), g, b, ops.BatchNormStats(3), True, mask).data
    out2 = ops.batch_norm(Tensor(noisy), g, b, ops.BatchNormStats(3), True, mask).data
    np.testing.assert_allclose(out1[mask], out2[mask], rtol=1e-5)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 5, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    out = ops.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=(2, 2), padding=(1, 1)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 2))
    for o in range(3):
        for i in range(3):
            for j in range(2):
                ref[0, o, i, j] = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-12)
