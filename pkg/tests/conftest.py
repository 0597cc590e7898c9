import numpy as np
import pytest

from simple_cra.arch import build_toy
from simple_cra.model import materialize
from simple_cra.tensor import ComputationGraph, Tensor, backward, finite_diff_grad, mul, tensor_sum


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_cra():
    return materialize(build_toy("cra"), seed=0)


@pytest.fixture
def toy_cra_zero():
    return materialize(build_toy("cra"), seed=0, zero_attention=True)


def check_grad(fn, arrays, seed=0, step=1e-3, rtol=1e-4, atol=1e-5):
    """Compare backprop of sum(fn(*inputs) * R) against central differences, in float64."""
    rng = np.random.default_rng(seed)
    inputs = [Tensor(np.asarray(a, dtype=np.float64)) for a in arrays]
    with ComputationGraph() as graph:
        out = fn(*inputs)
        proj = Tensor(rng.standard_normal(out.shape))
        backward(graph, tensor_sum(mul(out, proj)))

    for i, t in enumerate(inputs):

        def f(x, i=i):
            args = list(inputs)
            args[i] = x
            return tensor_sum(mul(fn(*args), proj))

        numeric = finite_diff_grad(f, t, step=step)
        np.testing.assert_allclose(t.grad, numeric, rtol=rtol, atol=atol, err_msg=f"input {i}")
