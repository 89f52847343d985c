import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdlnet import tensor as T
from hdlnet.tensor import Tensor, ShapeError, backward, grad_check

SEEDS = range(20)


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# -- oracle helpers (plain numpy, independent of the op implementations) --


def conv_naive(x, k, stride, padding):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for b in range(n):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * k[o])
    return out


def maxpool_naive(x, window, stride):
    n, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    out[b, ch, i, j] = x[b, ch, i * stride : i * stride + window, j * stride : j * stride + window].max()
    return out


# -- matmul --


def test_matmul_identity():
    out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, 4, 3), param(rng, 3, 5)
    w = rng.standard_normal((4, 5))
    rep = grad_check(lambda: T.sum_all(T.mul(T.matmul(a, b), Tensor(w))), {"a": a, "b": b})
    assert rep.passed(1e-5), rep.errors


# -- conv2d --


def test_conv_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.data.tolist() == [[[[9.0]]]]


def test_conv_stride_shape():
    out = T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    assert out.shape == (1, 1, 2, 2)


def test_conv_kernel_too_large():
    with pytest.raises(ShapeError, match="larger than padded input"):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), padding=1)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 3)])
def test_conv_matches_naive(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.standard_normal((2, 3, 7, 6))
    k = rng.standard_normal((4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, conv_naive(x, k, stride, padding), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x, k = param(rng, 2, 3, 8, 8), param(rng, 4, 3, 3, 3)
    w = rng.standard_normal((2, 4, 4, 4))
    fn = lambda: T.sum_all(T.mul(T.conv2d(x, k, stride=2, padding=1), Tensor(w)))
    rep = grad_check(fn, {"x": x, "k": k})
    assert rep.passed(1e-5), rep.errors


# -- relu --


def test_relu_values():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]


def test_relu_all_negative_zero_grad():
    x = Tensor(-np.ones(4) - 0.5, requires_grad=True)
    out = T.relu(x)
    assert not out.data.any()
    backward(T.sum_all(out))
    assert not x.grad.any()


def test_relu_grad_at_zero_is_zero():
    x = Tensor([0.0, 1.0], requires_grad=True)
    backward(T.sum_all(T.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0]


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradcheck(seed):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((3, 5))
    d[np.abs(d) < 1e-2] += 0.05
    x = Tensor(d, requires_grad=True)
    w = rng.standard_normal((3, 5))
    rep = grad_check(lambda: T.sum_all(T.mul(T.relu(x), Tensor(w))), {"x": x})
    assert rep.passed(1e-5), rep.errors


# -- max pool --


def test_maxpool_simple():
    assert T.max_pool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2).data.tolist() == [[[[4.0]]]]


def test_maxpool_tie_goes_to_first_index():
    x = Tensor(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
    out = T.max_pool2d(x, 2)
    assert out.data.item() == 3.0
    backward(T.sum_all(out))
    assert x.grad.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        T.max_pool2d(Tensor(np.zeros((1, 1, 2, 2))), 3)


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_brute_force(seed):
    x = np.random.default_rng(seed).standard_normal((1, 1, 6, 6))
    np.testing.assert_array_equal(T.max_pool2d(Tensor(x), 3, 3).data, maxpool_naive(x, 3, 3))


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = param(rng, 2, 2, 7, 7)
    w = rng.standard_normal((2, 2, 3, 3))
    rep = grad_check(lambda: T.sum_all(T.mul(T.max_pool2d(x, 3, 2), Tensor(w))), {"x": x})
    assert rep.passed(1e-5), rep.errors


# -- global average pool --


def test_gap_constant():
    out = T.global_avg_pool(Tensor(np.full((2, 3, 4, 4), 5.0)))
    np.testing.assert_array_equal(out.data, np.full((2, 3), 5.0))


def test_gap_small():
    assert T.global_avg_pool(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data.tolist() == [[2.5]]


@pytest.mark.parametrize("seed", SEEDS)
def test_gap_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = param(rng, 2, 3, 4, 5)
    w = rng.standard_normal((2, 3))
    rep = grad_check(lambda: T.sum_all(T.mul(T.global_avg_pool(x), Tensor(w))), {"x": x})
    assert rep.passed(1e-5), rep.errors


# -- batch norm --


def _bn(x, g, b, training=True):
    c = x.shape[1]
    return T.batch_norm(x, g, b, np.zeros(c), np.ones(c), training)


def test_bn_zero_variance_is_zero():
    x = Tensor(np.full((4, 2, 3, 3), 7.0))
    out = _bn(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
    assert np.all(out.data == 0) and np.all(np.isfinite(out.data))


def test_bn_standardized_input_unchanged():
    rng = np.random.default_rng(0)
    d = rng.standard_normal((8, 3, 4, 4))
    d = (d - d.mean(axis=(0, 2, 3), keepdims=True)) / d.std(axis=(0, 2, 3), keepdims=True)
    out = _bn(Tensor(d), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, d, atol=1e-4)


def test_bn_batch_of_one_rejected():
    with pytest.raises(ValueError, match="at least 2"):
        _bn(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_bn_running_stats_and_eval():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 2, 3, 3)) * 2 + 1
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
    m = x.size // 2
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    out = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, False)
    np.testing.assert_allclose(out.data, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_bn_gradcheck(seed, training):
    rng = np.random.default_rng(seed)
    x, g, b = param(rng, 3, 2, 3, 3), param(rng, 2), param(rng, 2)
    w = rng.standard_normal((3, 2, 3, 3))
    rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)

    def fn():
        return T.sum_all(T.mul(T.batch_norm(x, g, b, rm.copy(), rv.copy(), training), Tensor(w)))

    rep = grad_check(fn, {"x": x, "gamma": g, "beta": b})
    assert rep.passed(1e-4), rep.errors


# -- softmax cross-entropy --


def ce_oracle(z, y):
    # direct evaluation without max-shifting, float64
    return float(np.mean([-np.log(np.exp(z[i, y[i]]) / np.exp(z[i]).sum()) for i in range(len(y))]))


def test_ce_uniform():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
    assert loss.item() == pytest.approx(np.log(4), abs=1e-9)
    assert loss.item() == pytest.approx(1.386294, abs=1e-6)


def test_ce_large_logit_stable():
    z = np.zeros((1, 3))
    z[0, 1] = 1000.0
    x = Tensor(z, requires_grad=True)
    loss = T.softmax_cross_entropy(x, [1])
    backward(loss)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(x.grad))


def test_ce_out_of_range_label():
    with pytest.raises(ValueError, match="label 5"):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 5])


@pytest.mark.parametrize("seed", SEEDS)
def test_ce_against_direct_formula(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((8, 5))
    y = rng.integers(0, 5, 8)
    x = Tensor(z, requires_grad=True)
    loss = T.softmax_cross_entropy(x, y)
    backward(loss)
    assert loss.item() == pytest.approx(ce_oracle(z, y), abs=1e-6)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    p[np.arange(8), y] -= 1
    np.testing.assert_allclose(x.grad, p / 8, atol=1e-6)
    rep = grad_check(lambda: T.softmax_cross_entropy(x, y), {"z": x})
    assert rep.passed(1e-5), rep.errors


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(2, 7))
def test_softmax_rows_sum_to_one(seed, m, n):
    z = np.random.default_rng(seed).standard_normal((m, n)) * 30
    p = T.softmax(Tensor(z)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = param(rng, 4, 3)
    w = rng.standard_normal((4, 3))
    rep = grad_check(lambda: T.sum_all(T.mul(T.softmax(x), Tensor(w))), {"x": x})
    assert rep.passed(1e-5), rep.errors


# -- linear helpers --


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x, w, b = param(rng, 5, 4), param(rng, 3, 4), param(rng, 3)
    y = rng.integers(0, 3, 5)
    rep = grad_check(lambda: T.softmax_cross_entropy(T.linear(x, w, b), y), {"x": x, "w": w, "b": b})
    assert rep.passed(1e-5), rep.errors


@pytest.mark.parametrize("seed", SEEDS)
def test_channel_bias_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x, b = param(rng, 2, 3, 2, 2), param(rng, 3)
    w = rng.standard_normal((2, 3, 2, 2))
    rep = grad_check(lambda: T.sum_all(T.mul(T.add_channel_bias(x, b), Tensor(w))), {"x": x, "b": b})
    assert rep.passed(1e-5), rep.errors


# -- backward / accumulation --


def test_backward_sum():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_fan_out_accumulates():
    a = Tensor(np.array(3.0), requires_grad=True)
    backward(a + a)
    assert a.grad.item() == 2.0


def test_backward_non_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


@pytest.mark.parametrize("seed", range(5))
def test_two_consumers_equal_sum_of_single(seed):
    rng = np.random.default_rng(seed)
    x = param(rng, 3, 4)
    w1, w2 = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))

    def branch(w):
        return T.sum_all(T.square(T.matmul(x, Tensor(w))))

    backward(branch(w1))
    g1 = x.grad.copy()
    x.zero_grad()
    backward(branch(w2))
    g2 = x.grad.copy()
    x.zero_grad()
    backward(branch(w1) + branch(w2))
    np.testing.assert_allclose(x.grad, g1 + g2, rtol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_composite_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = param(rng, 2, 2, 8, 8)
    k = param(rng, 3, 2, 3, 3)
    w, b = param(rng, 4, 3), param(rng, 4)
    y = rng.integers(0, 4, 2)

    def fn():
        h = T.max_pool2d(T.relu(T.conv2d(x, k, 1, 1)), 2, 2)
        return T.softmax_cross_entropy(T.linear(T.global_avg_pool(h), w, b), y)

    rep = grad_check(fn, {"x": x, "k": k, "w": w, "b": b})
    assert rep.passed(1e-4), rep.errors


def test_gradcheck_identity_is_exact():
    x = Tensor(np.array([1.0, 2.0, -3.0]), requires_grad=True)
    rep = grad_check(lambda: T.sum_all(x), {"x": x}, eps=2.0**-20)
    assert rep.max_error == 0.0


def test_gradcheck_requires_float64():
    x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: x.sum(), {"x": x})


def test_float32_preserved():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
    k = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
    out = T.global_avg_pool(T.relu(T.conv2d(x, k, 1, 1)))
    assert out.dtype == np.float32


def test_forward_bitwise_repeatable():
    def run():
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        k = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        return T.max_pool2d(T.relu(T.conv2d(x, k, 2, 1)), 2).data.tobytes()

    assert run() == run()
