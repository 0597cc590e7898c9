import csv
import io
import json

import numpy as np
import pytest

from conftest import check_grad
from simple_cra.arch import build_toy
from simple_cra.attention import (
    AttentionTrace,
    CraConfig,
    CraParams,
    SeParams,
    channel_scale,
    cra_forward,
    extract_attentions,
    gdconv,
    se_forward,
    se_param_count,
    site_key,
)
from simple_cra.exceptions import EmptyTraceError, InvalidConfigError
from simple_cra.model import materialize
from simple_cra.ops import global_avg_pool, sigmoid
from simple_cra.tensor import ComputationGraph, Tensor, backward, mul, tensor_sum


def random_params(rng, channels, h, w, dtype=np.float64):
    return CraParams(
        Tensor(rng.standard_normal((channels, h, w)).astype(dtype)),
        Tensor(rng.standard_normal(channels).astype(dtype)),
    )


def test_attention_values_in_open_interval(rng):
    y = Tensor(rng.standard_normal((2, 6, 8, 8), dtype=np.float32) * 5)
    assert y.dtype == np.float32
    _, v = cra_forward(y, random_params(rng, 6, 4, 4, np.float32), CraConfig((4, 4), 6))
    assert v.shape == (2, 6)
    assert np.all(v.data > 0) and np.all(v.data < 1)


def test_saturated_attention_stays_below_one():
    y = Tensor(np.full((1, 2, 4, 4), 20.0, dtype=np.float32))
    params = CraParams(Tensor(np.ones((2, 2, 2), dtype=np.float32)), Tensor(np.zeros(2, dtype=np.float32)))
    out, v = cra_forward(y, params, CraConfig((2, 2), 2))
    assert v.dtype == np.float32
    assert np.all(v.data < 1) and np.all(v.data > 0)
    assert np.all(np.abs(out.data) <= np.abs(y.data))


def test_rescale_is_exact_product(rng):
    y = Tensor(rng.standard_normal((2, 5, 6, 6), dtype=np.float32) * 3)
    out, v = cra_forward(y, random_params(rng, 5, 3, 3, np.float32), CraConfig((3, 3), 5))
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out.data, y.data * v.data[:, :, None, None])
    assert np.all(np.abs(out.data) <= np.abs(y.data))


def test_hand_evaluated_two_channel_block():
    y = np.zeros((1, 2, 4, 4), dtype=np.float32)
    y[0, 0] = 1.0
    params = CraParams(Tensor(np.ones((2, 2, 2), dtype=np.float32)), Tensor(np.zeros(2, dtype=np.float32)))
    out, v = cra_forward(Tensor(y), params, CraConfig((2, 2), 2))
    np.testing.assert_allclose(v.data[0], [0.98201, 0.5], atol=1e-5)
    np.testing.assert_allclose(out.data[0, 0], 0.98201, atol=1e-5)
    np.testing.assert_array_equal(out.data[0, 1], 0.0)


def test_zero_params_give_half(rng):
    y = Tensor(rng.standard_normal((2, 4, 6, 6)))
    config = CraConfig((3, 3), 4)
    out, v = cra_forward(y, CraParams.zeros(config), config)
    np.testing.assert_array_equal(v.data, 0.5)
    np.testing.assert_allclose(out.data, 0.5 * y.data)


def test_channels_are_independent(rng):
    y = Tensor(rng.standard_normal((1, 5, 6, 6)))
    config = CraConfig((2, 2), 5)
    params = random_params(rng, 5, 2, 2)
    _, before = cra_forward(y, params, config)
    params.gdconv_kernels.data[2] += 1.0
    _, after = cra_forward(y, params, config)
    changed = np.flatnonzero(np.abs(after.data - before.data)[0] > 0)
    assert changed.tolist() == [2]


def test_one_by_one_target_is_affine_global_pool(rng):
    y = Tensor(rng.standard_normal((2, 3, 5, 5)))
    params = random_params(rng, 3, 1, 1)
    _, v = cra_forward(y, params, CraConfig((1, 1), 3))
    expected = 1 / (1 + np.exp(-(global_avg_pool(y).data * params.gdconv_kernels.data[:, 0, 0] + params.gdconv_bias.data)))
    np.testing.assert_allclose(v.data, expected, rtol=1e-6)


def test_full_size_target_skips_pooling(rng):
    y = Tensor(rng.standard_normal((1, 2, 4, 4)))
    params = random_params(rng, 2, 4, 4)
    _, v = cra_forward(y, params, CraConfig((4, 4), 2))
    z = (y.data[0] * params.gdconv_kernels.data).sum(axis=(1, 2)) + params.gdconv_bias.data
    np.testing.assert_allclose(v.data[0], sigmoid(Tensor(z)).data, rtol=1e-6)


def test_one_by_one_kernel_gradient_is_closed_form():
    a = np.array([0.7, -1.3])
    y = Tensor(np.broadcast_to(a[None, :, None, None], (1, 2, 3, 3)).copy().astype(np.float64))
    kernels = Tensor(np.array([0.4, -0.9]).reshape(2, 1, 1))
    bias = Tensor(np.array([0.1, 0.2]))
    with ComputationGraph() as graph:
        _, v = cra_forward(y, CraParams(kernels, bias), CraConfig((1, 1), 2))
        backward(graph, tensor_sum(v))
    s = 1 / (1 + np.exp(-(kernels.data[:, 0, 0] * a + bias.data)))
    np.testing.assert_allclose(kernels.grad[:, 0, 0], s * (1 - s) * a, rtol=1e-12)


def test_zero_upstream_gradient_gives_zero_parameter_gradients(rng):
    y = Tensor(rng.standard_normal((2, 3, 4, 4)))
    params = random_params(rng, 3, 2, 2)
    with ComputationGraph() as graph:
        out, _ = cra_forward(y, params, CraConfig((2, 2), 3))
        backward(graph, tensor_sum(mul(out, Tensor(np.zeros(out.shape)))))
    np.testing.assert_array_equal(params.gdconv_kernels.grad, 0.0)
    np.testing.assert_array_equal(params.gdconv_bias.grad, 0.0)
    np.testing.assert_array_equal(y.grad, 0.0)


def test_cra_gradients(rng):
    y = rng.standard_normal((2, 3, 6, 5))
    kernels = rng.standard_normal((3, 3, 2))
    bias = rng.standard_normal(3)
    config = CraConfig((3, 2), 3)
    check_grad(lambda y, k, b: cra_forward(y, CraParams(k, b), config)[0], [y, kernels, bias])


def test_gdconv_and_scale_gradients(rng):
    u = rng.standard_normal((2, 3, 2, 2))
    check_grad(gdconv, [u, rng.standard_normal((3, 2, 2)), rng.standard_normal(3)])
    check_grad(channel_scale, [rng.standard_normal((2, 3, 4, 4)), rng.uniform(0.1, 0.9, (2, 3))])


def test_cra_rejects_mismatches(rng):
    y = Tensor(rng.standard_normal((1, 4, 3, 3)))
    with pytest.raises(InvalidConfigError):
        cra_forward(y, CraParams.zeros(CraConfig((2, 2), 5)), CraConfig((2, 2), 5))
    with pytest.raises(InvalidConfigError):
        cra_forward(y, CraParams.zeros(CraConfig((4, 4), 4)), CraConfig((4, 4), 4))


def test_config_clamps_to_feature_map():
    config = CraConfig((7, 7), 8).clamped(4, 5)
    assert config.target == (4, 5)
    assert config.param_count == 8 * 21


def test_se_forward_and_count(rng):
    params = SeParams.zeros(32)
    assert params.param_count == se_param_count(32) == 2 * 32 * 2 + 2 + 32
    y = Tensor(rng.standard_normal((2, 32, 4, 4)))
    np.testing.assert_allclose(se_forward(y, params).data, 0.5 * y.data)


def test_se_ratio_must_divide():
    with pytest.raises(InvalidConfigError):
        SeParams.zeros(24)


def test_trace_csv_and_json():
    trace = AttentionTrace({site_key(1, 1): np.array([0.25, 0.75], dtype=np.float32)})
    rows = list(csv.DictReader(io.StringIO(trace.to_csv())))
    assert rows[0] == {"site_key": "CRA.1.1", "channel_index": "0", "attention_value": "0.25"}
    assert json.loads(trace.to_json()) == {"CRA.1.1": [0.25, 0.75]}


def test_extract_attentions_zero_model(toy_cra_zero, rng):
    x = Tensor(rng.uniform(0, 1, (3, 32, 32)))
    trace = extract_attentions(toy_cra_zero, x)
    assert trace.keys() == ["CRA.1.1"]
    assert trace["CRA.1.1"].shape == (8,)
    np.testing.assert_array_equal(trace["CRA.1.1"], 0.5)


def test_extract_attentions_is_deterministic(toy_cra, rng):
    x = rng.uniform(0, 1, (3, 32, 32))
    first = extract_attentions(toy_cra, Tensor(x))
    second = extract_attentions(toy_cra, Tensor(x.copy()))
    assert first.keys() == second.keys()
    for key in first.keys():
        np.testing.assert_array_equal(first[key], second[key])
        assert np.all(first[key] > 0) and np.all(first[key] < 1)


def test_extract_attentions_needs_cra_sites(rng):
    model = materialize(build_toy("base"))
    with pytest.raises(EmptyTraceError):
        extract_attentions(model, Tensor(rng.uniform(0, 1, (1, 3, 32, 32))))


def test_extract_attentions_single_image(toy_cra, rng):
    with pytest.raises(InvalidConfigError):
        extract_attentions(toy_cra, Tensor(rng.uniform(0, 1, (2, 3, 32, 32))))
