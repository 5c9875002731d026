import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from denseground import tensor as tn
from denseground.errors import EmptyReduction, NonScalarRoot, ShapeMismatch

TOL = 1e-4


def weighted(op, seed=0):
    """Wrap ``op`` into a scalar by a fixed random weighting of its output."""
    cache = {}

    def f(x):
        out = op(x)
        if "w" not in cache:
            cache["w"] = np.random.default_rng(seed).uniform(0.5, 1.5, out.shape)
        return (out * cache["w"]).sum()

    return f


def away_from_zero(rng, shape, low=0.1):
    x = rng.uniform(-1, 1, shape)
    return np.where(np.abs(x) < low, np.sign(x + 1e-12) * low, x)


# ---------------------------------------------------------------- forward


def test_elementwise_examples():
    assert np.array_equal(tn.elementwise("add", [1.0, 2.0], [3.0, 4.0]).data, [4, 6])
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(tn.elementwise("mul", x, np.zeros_like(x)).data, np.zeros_like(x))
    assert np.array_equal(tn.elementwise("min_with_zero", [-2.0, 3.0]).data, [-2, 0])
    assert np.array_equal(tn.elementwise("max_with_zero", [-2.0, 3.0]).data, [0, 3])
    assert np.array_equal(tn.elementwise("abs", [-2.0, 3.0]).data, [2, 3])
    assert np.array_equal(tn.elementwise("square", [-2.0, 3.0]).data, [4, 9])


def test_incompatible_broadcast_raises():
    with pytest.raises(ShapeMismatch):
        tn.add(np.ones((2, 3)), np.ones((4,)))


def _materialize(x, shape):
    """Broadcast by explicit tiling: pad rank on the left then repeat size-1 axes."""
    x = x.reshape((1,) * (len(shape) - x.ndim) + x.shape)
    reps = [n if m == 1 else 1 for m, n in zip(x.shape, shape)]
    return np.tile(x, reps)


def test_broadcasting_matches_materialized_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        rank = rng.integers(1, 5)
        full = tuple(rng.integers(1, 4, size=rank))
        a_shape = tuple(1 if rng.random() < 0.4 else n for n in full)
        b_shape = tuple(1 if rng.random() < 0.4 else n for n in full)[rng.integers(0, rank + 1):]
        a, b = rng.normal(size=a_shape), rng.normal(size=b_shape)
        out = np.broadcast_shapes(a_shape, b_shape)
        am, bm = _materialize(a, out), _materialize(b, out)
        assert np.array_equal(tn.add(a, b).data, am + bm)
        assert np.array_equal(tn.mul(a, b).data, am * bm)


def test_matmul_examples():
    x = np.random.default_rng(2).normal(size=(2, 3))
    assert np.array_equal(tn.matmul(np.eye(2), x).data, x)
    assert np.array_equal(tn.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]]).data, [[3], [7]])
    with pytest.raises(ShapeMismatch):
        tn.matmul(np.ones((2, 3)), np.ones((2, 3)))


def _naive_conv2d(x, k, pad):
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh, ow = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                out[o, i, j] = np.sum(xp[:, i:i + kh, j:j + kw] * k[o])
    return out


def test_conv_examples():
    out = tn.conv(np.array([[1.0, 2.0, 3.0]]), np.array([[[1.0, 1.0]]]), spatial_rank=1, padding="valid")
    assert np.array_equal(out.data, [[3, 5]])
    x = np.random.default_rng(3).normal(size=(2, 5, 6))
    delta = np.zeros((2, 2, 3, 3))
    delta[0, 0, 1, 1] = delta[1, 1, 1, 1] = 1.0
    assert np.array_equal(tn.conv(x, delta).data, x)


def test_conv_matches_naive_loops():
    rng = np.random.default_rng(4)
    for pad_mode, pad in (("same", 1), ("valid", 0)):
        x, k = rng.normal(size=(3, 6, 5)), rng.normal(size=(4, 3, 3, 3))
        np.testing.assert_allclose(tn.conv(x, k, padding=pad_mode).data, _naive_conv2d(x, k, pad), atol=1e-12)


def test_conv_stride_subsamples_stride_one():
    rng = np.random.default_rng(5)
    x, k = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    full = tn.conv(x, k).data
    np.testing.assert_allclose(tn.conv(x, k, stride=2).data, full[..., ::2, ::2], atol=1e-12)


def test_layer_norm_examples():
    out = tn.layer_norm_channel(np.array([[1.0], [3.0]]), np.ones(2), np.zeros(2), eps=0.0)
    np.testing.assert_allclose(out.data[:, 0], [-1, 1], atol=1e-12)
    const = tn.layer_norm_channel(np.full((4, 3), 2.5), np.ones(4), np.zeros(4))
    assert np.array_equal(const.data, np.zeros((4, 3)))


def test_reduce_examples():
    m, idx = tn.reduce("max", np.array([3.0, 1.0]))
    assert m.data == 3 and idx == 0
    assert tn.reduce("mean", np.full((2, 3), 1.75))[0].data == 1.75
    x = tn.Tensor([2.0, 2.0], requires_grad=True)
    tn.backward(tn.reduce("max", x)[0])
    assert np.array_equal(x.grad, [1, 0])
    with pytest.raises(EmptyReduction):
        tn.reduce("sum", np.zeros((2, 0)), (1,))


def test_sum_matches_arithmetic_sum():
    x = np.random.default_rng(6).normal(size=(7, 11, 13))
    total = tn.reduce("sum", x)[0].data
    assert abs(total - math.fsum(x.ravel())) <= 1e-12 * max(1.0, abs(total))


def test_backward_examples():
    x = tn.Tensor(3.0, requires_grad=True)
    tn.backward(tn.square(x))
    assert x.grad == 6
    y = tn.Tensor(np.ones((2, 3)), requires_grad=True)
    tn.backward(y.sum())
    assert np.array_equal(y.grad, np.ones((2, 3)))
    with pytest.raises(NonScalarRoot):
        tn.backward(tn.Tensor(np.ones(2), requires_grad=True) * 2.0)


def test_unused_leaf_gets_zero_gradient():
    a, b = tn.Tensor(1.0, requires_grad=True), tn.Tensor(2.0, requires_grad=True)
    tn.backward(a * 3.0)
    assert tn.grad_or_zeros(b) == 0


def test_shared_subexpression_accumulates():
    x = tn.Tensor(2.0, requires_grad=True)
    y = x * x
    tn.backward(y * y + y)
    assert x.grad == pytest.approx(4 * 2.0 ** 3 + 2 * 2.0)


def test_forward_independent_of_recording():
    rng = np.random.default_rng(7)
    x, k = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))

    def f(xt):
        return tn.logsumexp(tn.relu(tn.conv(xt, k)).reshape((2, -1)), 1)

    recorded = f(tn.Tensor(x, requires_grad=True)).data
    with tn.no_grad():
        plain = f(tn.Tensor(x, requires_grad=True)).data
    assert np.array_equal(recorded, plain)


# ---------------------------------------------------------------- gradients

RNG = np.random.default_rng(8)
OTHER = away_from_zero(RNG, (3, 4))
GRAD_CASES = {
    "add": (lambda x: tn.add(x, OTHER), (3, 4)),
    "add_broadcast": (lambda x: tn.add(x, OTHER), (4,)),
    "sub": (lambda x: tn.sub(OTHER, x), (3, 1)),
    "mul": (lambda x: tn.mul(x, OTHER), (3, 4)),
    "mul_broadcast": (lambda x: tn.mul(OTHER, x), (1, 4)),
    "div": (lambda x: tn.div(OTHER, tn.add(tn.abs(x), 1.0)), (3, 4)),
    "abs": (tn.abs, (3, 4)),
    "square": (tn.square, (3, 4)),
    "relu": (tn.relu, (3, 4)),
    "min_with_zero": (tn.min_with_zero, (3, 4)),
    "exp": (tn.exp, (3, 4)),
    "log": (lambda x: tn.log(tn.add(tn.square(x), 0.5)), (3, 4)),
    "matmul_left": (lambda x: tn.matmul(x, OTHER), (2, 3)),
    "matmul_right": (lambda x: tn.matmul(OTHER, x), (4, 2)),
    "matmul_batched": (lambda x: tn.matmul(x, np.stack([OTHER, OTHER * 0.5])), (2, 5, 3)),
    "reshape": (lambda x: tn.reshape(x, (4, 3)) * OTHER.T, (3, 4)),
    "transpose": (lambda x: tn.transpose(x, (1, 0)) * OTHER.T, (3, 4)),
    "getitem_slice": (lambda x: x[1:, ::2], (3, 4)),
    "getitem_fancy": (lambda x: tn.getitem(x, (np.array([0, 2, 0]), np.array([1, 1, 3]))), (3, 4)),
    "concat": (lambda x: tn.concat([x, x * 2.0], axis=1), (3, 4)),
    "pad": (lambda x: tn.pad(x, ((1, 0), (0, 2))), (3, 4)),
    "sum": (lambda x: tn.reduce("sum", x, (0,))[0], (3, 4)),
    "mean": (lambda x: tn.reduce("mean", x, (1,))[0], (3, 4)),
    "max": (lambda x: tn.reduce("max", x, (0, 2))[0], (3, 4, 2)),
    "logsumexp": (lambda x: tn.logsumexp(x, 1), (3, 4)),
    "conv1d_same": (lambda x: tn.conv(x, OTHER[:, None, :3].repeat(3, 1)[:2, :, :3], spatial_rank=1), (3, 7)),
    "conv2d_stride": (lambda x: tn.conv(x, np.ones((2, 3, 3, 3)) * 0.3, stride=2), (1, 3, 6, 6)),
    "conv2d_kernel": (lambda k: tn.conv(np.linspace(-1, 1, 75).reshape(3, 5, 5), k, padding="valid"), (2, 3, 3, 3)),
    "layer_norm": (lambda x: tn.layer_norm_channel(x, OTHER[:, 0] + 2.0, OTHER[:, 1]), (3, 5)),
    "layer_norm_gain": (
        lambda g: tn.layer_norm_channel(OTHER, g, np.zeros(3)), (3,)
    ),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradient(name):
    op, shape = GRAD_CASES[name]
    x = away_from_zero(np.random.default_rng(9), shape)
    assert tn.grad_check(weighted(op), x) < TOL


def test_grad_check_exact_on_quadratic():
    x = np.random.default_rng(10).uniform(-1, 1, 20)
    assert tn.grad_check(lambda t: tn.square(t).sum(), x) < 1e-8


def test_grad_check_catches_wrong_rule():
    def bad_square(x):
        x = tn.as_tensor(x)
        return tn._result(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")

    x = np.random.default_rng(11).uniform(0.5, 1.0, 5)
    assert tn.grad_check(lambda t: bad_square(t).sum(), x) > 1e-2


# ---------------------------------------------------------------- properties


arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                    elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=50, deadline=None)
@given(arrays)
def test_shape_and_grad_shape_invariants(x):
    t = tn.Tensor(x, requires_grad=True)
    y = tn.relu(t) * 2.0 + tn.square(t)
    assert y.data.size == int(np.prod(y.shape))
    tn.backward(y.sum())
    assert t.grad.shape == t.shape
    assert np.all(np.isfinite(t.grad))


@settings(max_examples=50, deadline=None)
@given(arrays)
def test_max_gradient_is_one_hot(x):
    t = tn.Tensor(x, requires_grad=True)
    tn.backward(tn.reduce("max", t)[0])
    assert t.grad.sum() == 1.0
    assert t.grad.ravel()[np.argmax(x.ravel())] == 1.0
