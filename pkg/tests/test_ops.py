import numpy as np
import pytest

from conftest import check_grad
from simple_cra.exceptions import InvalidConfigError, InvalidTargetError, SizeMismatchError
from simple_cra.ops import (
    BatchNormStats,
    Conv2dParams,
    adaptive_avg_pool,
    batch_norm,
    conv2d,
    fully_connected,
    global_avg_pool,
    max_pool,
    pad_shortcut,
    pool_bins,
    relu,
    sigmoid,
    softmax,
    softmax_cross_entropy,
)
from simple_cra.tensor import Tensor, finite_diff_grad, tensor_sum


def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    return out


def test_conv2d_matches_direct_loop(rng):
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    out = conv2d(Tensor(x), Conv2dParams(Tensor(w), stride=2, padding=1))
    assert out.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(out.data, naive_conv(x, w, 2, 1), rtol=1e-4, atol=1e-4)


def test_conv2d_gradients(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    check_grad(lambda x, w, b: conv2d(x, Conv2dParams(w, b, stride=2, padding=1)), [x, w, b])


def test_grouped_conv2d_gradients(rng):
    x = rng.standard_normal((2, 4, 5, 5))
    w = rng.standard_normal((4, 2, 3, 3))
    check_grad(lambda x, w: conv2d(x, Conv2dParams(w, padding=1, groups=2)), [x, w])


def test_depthwise_conv2d_is_per_channel(rng):
    x = rng.standard_normal((1, 3, 5, 5))
    w = rng.standard_normal((3, 1, 3, 3))
    out = conv2d(Tensor(x), Conv2dParams(Tensor(w), groups=3))
    for c in range(3):
        expected = naive_conv(x[:, c : c + 1], w[c : c + 1], 1, 0)
        np.testing.assert_allclose(out.data[:, c : c + 1], expected, rtol=1e-4, atol=1e-4)


def test_conv2d_channel_mismatch():
    with pytest.raises(InvalidConfigError):
        conv2d(Tensor(np.zeros((1, 2, 5, 5))), Conv2dParams(Tensor(np.zeros((4, 3, 3, 3)))))


def test_pool_bins_cover_input():
    assert pool_bins(5, 3) == [(0, 2), (1, 4), (3, 5)]
    assert pool_bins(6, 3) == [(0, 2), (2, 4), (4, 6)]


def test_adaptive_pool_identity_at_full_size(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    out = adaptive_avg_pool(Tensor(x), (5, 4))
    np.testing.assert_allclose(out.data, x, rtol=1e-6)


def test_adaptive_pool_sixteen_values():
    x = Tensor(np.arange(1.0, 17.0).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(adaptive_avg_pool(x, (2, 2)).data[0, 0], [[3.5, 5.5], [11.5, 13.5]])
    assert adaptive_avg_pool(x, (1, 1)).data.item() == 8.5


@pytest.mark.parametrize("shape,target", [((2, 3, 8, 8), (4, 4)), ((1, 4, 6, 9), (3, 3)), ((1, 2, 12, 4), (6, 1))])
def test_adaptive_pool_preserves_mean_on_even_bins(rng, shape, target):
    x = rng.standard_normal(shape)
    out = adaptive_avg_pool(Tensor(x), target)
    np.testing.assert_allclose(out.data.mean(axis=(2, 3)), x.mean(axis=(2, 3)), atol=1e-6)


def test_adaptive_pool_uneven_bins():
    x = np.arange(25.0).reshape(1, 1, 5, 5)
    out = adaptive_avg_pool(Tensor(x), (3, 3))
    assert out.data[0, 0, 0, 0] == pytest.approx(x[0, 0, 0:2, 0:2].mean())
    assert out.data[0, 0, 1, 1] == pytest.approx(x[0, 0, 1:4, 1:4].mean())
    assert out.data[0, 0, 2, 2] == pytest.approx(x[0, 0, 3:5, 3:5].mean())


@pytest.mark.parametrize("target", [(2, 2), (3, 2), (1, 1)])
def test_adaptive_pool_gradients(rng, target):
    x = rng.standard_normal((2, 2, 6, 5))
    check_grad(lambda x: adaptive_avg_pool(x, target), [x])


@pytest.mark.parametrize("target", [(0, 1), (7, 2), (2, 6)])
def test_adaptive_pool_rejects_target(target):
    with pytest.raises(InvalidTargetError):
        adaptive_avg_pool(Tensor(np.zeros((1, 1, 6, 5))), target)


def test_global_pool_equals_one_by_one(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    np.testing.assert_allclose(
        global_avg_pool(x).data, adaptive_avg_pool(x, (1, 1)).data.reshape(2, 3), rtol=1e-6
    )


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_sigmoid_is_stable_and_bounded(dtype):
    out = sigmoid(Tensor(np.array([-1000.0, -17.0, 0.0, 17.0, 40.0, 1000.0], dtype=dtype)))
    assert out.dtype == dtype
    assert np.all(np.isfinite(out.data))
    assert np.all(out.data > 0) and np.all(out.data < 1)
    assert out.data[2] == 0.5
    assert np.all(np.diff(out.data) >= 0)


def test_sigmoid_finite_difference_at_zero():
    def f(x):
        return tensor_sum(sigmoid(x))

    np.testing.assert_allclose(finite_diff_grad(f, Tensor(np.zeros(1)), step=1e-3), [0.25], atol=1e-6)


def test_sigmoid_relu_gradients(rng):
    x = rng.uniform(0.1, 2.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    check_grad(sigmoid, [x])
    check_grad(relu, [x])


def test_batch_norm_training_normalizes(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3.0 + 2.0
    stats = BatchNormStats.fresh(3)
    out = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), stats)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
    np.testing.assert_allclose(out.data.std(axis=(0, 2, 3)), 1.0, atol=1e-3)
    np.testing.assert_allclose(stats.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-4)


def test_batch_norm_inference_uses_running_stats():
    stats = BatchNormStats.fresh(2)
    stats.running_mean[...] = [1.0, -1.0]
    stats.running_var[...] = [4.0, 1.0]
    x = Tensor(np.array([[3.0, 0.0]]))
    out = batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, mode="inference")
    np.testing.assert_allclose(out.data, [[1.0, 1.0]], rtol=1e-4)


def test_batch_norm_no_stat_update():
    stats = BatchNormStats.fresh(2)
    batch_norm(Tensor(np.ones((3, 2)) * 5), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, update_stats=False)
    np.testing.assert_array_equal(stats.running_mean, 0.0)


def test_batch_norm_gradients(rng):
    x = rng.standard_normal((3, 2, 3, 3))
    gamma = rng.uniform(0.5, 1.5, 2)
    beta = rng.standard_normal(2)

    def fn(x, g, b):
        return batch_norm(x, g, b, BatchNormStats.fresh(2), update_stats=False)

    check_grad(fn, [x, gamma, beta])


def test_batch_norm_bad_mode():
    with pytest.raises(InvalidConfigError):
        batch_norm(Tensor(np.ones((2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormStats.fresh(2), "eval")


def test_fully_connected_gradients(rng):
    x = rng.standard_normal((3, 2, 2, 2))
    w = rng.standard_normal((5, 8))
    b = rng.standard_normal(5)
    check_grad(fully_connected, [x, w, b])


def test_fully_connected_feature_mismatch():
    with pytest.raises(SizeMismatchError):
        fully_connected(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_max_pool_values_and_gradients(rng):
    x = (rng.permutation(2 * 2 * 7 * 7) * 0.01).reshape(2, 2, 7, 7)
    out = max_pool(Tensor(x), 3, 2, padding=1)
    assert out.shape == (2, 2, 4, 4)
    assert out.data[0, 0, 1, 1] == pytest.approx(x[0, 0, 1:4, 1:4].max())
    check_grad(lambda x: max_pool(x, 3, 2, padding=1), [x])


def test_softmax_rows_sum_to_one(rng):
    probs = softmax(rng.standard_normal((4, 6)))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)


def test_cross_entropy_uniform_logits():
    loss = softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
    assert loss.shape == (1,)
    assert loss.item() == pytest.approx(np.log(4.0), rel=1e-6)


def test_cross_entropy_gradients(rng):
    logits = rng.standard_normal((4, 5))
    labels = [0, 4, 2, 2]
    check_grad(lambda z: softmax_cross_entropy(z, labels), [logits])


def test_cross_entropy_label_errors():
    with pytest.raises(InvalidConfigError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(SizeMismatchError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 1, 2])


def test_pad_shortcut_layout(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    out = pad_shortcut(Tensor(x), 4, 2)
    assert out.shape == (1, 4, 2, 2)
    np.testing.assert_array_equal(out.data[:, 0], 0.0)
    np.testing.assert_allclose(out.data[:, 1:3], x[:, :, ::2, ::2].astype(np.float32))
    check_grad(lambda x: pad_shortcut(x, 4, 2), [x])
