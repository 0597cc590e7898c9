"""Layer primitives with their backward rules.

All ops take and return `Tensor`s on the NCHW layout and record themselves
on the active graph. Arithmetic is vectorised numpy; reductions run in a
fixed order so repeated calls are bit-identical.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import (
    InvalidConfigError,
    InvalidShapeError,
    InvalidTargetError,
    SizeMismatchError,
)
from .tensor import Tensor, record_op, register_backward
from .util import validateparam

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _pair(value) -> tuple:
    if isinstance(value, (tuple, list)):
        return (int(value[0]), int(value[1]))
    return (int(value), int(value))


def _require_rank(x: Tensor, rank: int, name: str):
    if x.ndim != rank:
        raise SizeMismatchError(f"{name} expects a rank-{rank} input, got shape {x.shape}")


@dataclass
class Conv2dParams:
    """Convolution parameters.

    Args:
        kernel (Tensor): [C_out, C_in/groups, K_h, K_w]
        bias (Tensor, optional): [C_out]
        stride (tuple): (s_h, s_w)
        padding (tuple): (p_h, p_w)
        groups (int): channel groups; groups == C_in == C_out is the depthwise case
    """

    kernel: Tensor
    bias: Tensor = None
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    groups: int = 1

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        if self.kernel.ndim != 4:
            raise InvalidConfigError(f"kernel must be rank 4, got shape {self.kernel.shape}")
        if min(self.stride) < 1 or min(self.padding) < 0 or self.groups < 1:
            raise InvalidConfigError("stride must be positive, padding non-negative, groups positive")
        c_out = self.kernel.shape[0]
        if c_out % self.groups:
            raise InvalidConfigError(f"groups={self.groups} does not divide C_out={c_out}")
        if self.bias is not None and self.bias.shape != (c_out,):
            raise InvalidConfigError(f"bias must have shape ({c_out},), got {self.bias.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, params: Conv2dParams) -> Tensor:
    """Cross-correlation of `x` [N, C_in, H', W'] with `params.kernel`.

    Raises:
        InvalidConfigError: C_in does not match kernel and groups
        InvalidShapeError: the output would have no rows or columns
    """
    _require_rank(x, 4, "conv2d")
    n, c_in, height, width = x.shape
    kernel = params.kernel.data
    c_out, c_group, kh, kw = kernel.shape
    groups = params.groups
    if c_in != c_group * groups or c_in % groups:
        raise InvalidConfigError(
            f"input has {c_in} channels, kernel expects {c_group} x {groups} groups"
        )
    (sh, sw), (ph, pw) = params.stride, params.padding
    ho = conv_output_size(height, kh, sh, ph)
    wo = conv_output_size(width, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise InvalidShapeError(
            f"kernel {kh}x{kw} does not fit input {height}x{width} with padding {ph},{pw}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]

    if groups == 1:
        out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2)
    else:
        xg = windows.reshape(n, groups, c_group, ho, wo, kh, kw)
        wg = kernel.reshape(groups, c_out // groups, c_group, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", xg, wg, optimize=True)
        out = out.reshape(n, c_out, ho, wo)
    if params.bias is not None:
        out = out + params.bias.data.reshape(1, c_out, 1, 1)

    inputs = (x, params.kernel) if params.bias is None else (x, params.kernel, params.bias)
    saved = {
        "windows": windows,
        "kernel": kernel,
        "padded_shape": xp.shape,
        "input_shape": x.shape,
        "stride": params.stride,
        "padding": params.padding,
        "groups": groups,
        "has_bias": params.bias is not None,
    }
    return record_op("conv2d", inputs, np.ascontiguousarray(out), saved)


@register_backward("conv2d")
def _conv2d_backward(grad, saved):
    windows, kernel, groups = saved["windows"], saved["kernel"], saved["groups"]
    n, c_in, height, width = saved["input_shape"]
    c_out, c_group, kh, kw = kernel.shape
    (sh, sw), (ph, pw) = saved["stride"], saved["padding"]
    ho, wo = grad.shape[2], grad.shape[3]

    if groups == 1:
        d_kernel = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        d_cols = np.tensordot(grad, kernel, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    else:
        gg = grad.reshape(n, groups, c_out // groups, ho, wo)
        xg = windows.reshape(n, groups, c_group, ho, wo, kh, kw)
        wg = kernel.reshape(groups, c_out // groups, c_group, kh, kw)
        d_kernel = np.einsum("ngohw,ngchwij->gocij", gg, xg, optimize=True)
        d_kernel = d_kernel.reshape(c_out, c_group, kh, kw)
        d_cols = np.einsum("ngohw,gocij->ngchwij", gg, wg, optimize=True)
        d_cols = d_cols.reshape(n, c_in, ho, wo, kh, kw)

    d_padded = np.zeros(saved["padded_shape"], dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            d_padded[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += d_cols[
                :, :, :, :, i, j
            ]
    d_input = d_padded[:, :, ph : ph + height, pw : pw + width]

    grads = [np.ascontiguousarray(d_input), d_kernel.astype(grad.dtype, copy=False)]
    if saved["has_bias"]:
        grads.append(grad.sum(axis=(0, 2, 3)))
    return grads


def pool_bins(size: int, out: int) -> list:
    """Half-open [floor(a*size/out), ceil((a+1)*size/out)) ranges, one per output index."""
    return [(a * size // out, -((-(a + 1) * size) // out)) for a in range(out)]


def adaptive_avg_pool(x: Tensor, target) -> Tensor:
    """Average-pool `x` [N, C, H, W] down to the spatial size `target` = (h, w).

    Raises:
        InvalidTargetError: h or w is below 1 or above the input size
    """
    _require_rank(x, 4, "adaptive_avg_pool")
    n, c, height, width = x.shape
    h, w = _pair(target)
    if not (1 <= h <= height and 1 <= w <= width):
        raise InvalidTargetError(f"target {h}x{w} must lie within 1x1 .. {height}x{width}")

    if height % h == 0 and width % w == 0:
        out = x.data.reshape(n, c, h, height // h, w, width // w).mean(axis=(3, 5))
    else:
        out = np.empty((n, c, h, w), dtype=x.dtype)
        for a, (r0, r1) in enumerate(pool_bins(height, h)):
            for b, (c0, c1) in enumerate(pool_bins(width, w)):
                out[:, :, a, b] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    return record_op(
        "adaptive_avg_pool", (x,), np.ascontiguousarray(out), {"input_shape": x.shape, "target": (h, w)}
    )


@register_backward("adaptive_avg_pool")
def _adaptive_avg_pool_backward(grad, saved):
    n, c, height, width = saved["input_shape"]
    h, w = saved["target"]
    if height % h == 0 and width % w == 0:
        bh, bw = height // h, width // w
        d_input = np.repeat(np.repeat(grad, bh, axis=2), bw, axis=3) / (bh * bw)
        return (d_input.astype(grad.dtype, copy=False),)
    d_input = np.zeros(saved["input_shape"], dtype=grad.dtype)
    for a, (r0, r1) in enumerate(pool_bins(height, h)):
        for b, (c0, c1) in enumerate(pool_bins(width, w)):
            count = (r1 - r0) * (c1 - c0)
            d_input[:, :, r0:r1, c0:c1] += grad[:, :, a : a + 1, b : b + 1] / count
    return (d_input,)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_rank(x, 4, "global_avg_pool")
    return record_op("global_avg_pool", (x,), x.data.mean(axis=(2, 3)), {"input_shape": x.shape})


@register_backward("global_avg_pool")
def _global_avg_pool_backward(grad, saved):
    n, c, height, width = saved["input_shape"]
    scaled = grad.reshape(n, c, 1, 1) / (height * width)
    return (np.broadcast_to(scaled, saved["input_shape"]).astype(grad.dtype),)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function; outputs stay strictly inside (0, 1) in the input's precision."""
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    zero, one = x.dtype.type(0), x.dtype.type(1)
    out = np.clip(out, np.nextafter(zero, one), np.nextafter(one, zero))
    return record_op("sigmoid", (x,), out, {"out": out})


@register_backward("sigmoid")
def _sigmoid_backward(grad, saved):
    out = saved["out"]
    return (grad * out * (1.0 - out),)


def relu(x: Tensor) -> Tensor:
    return record_op("relu", (x,), np.maximum(x.data, 0), {"mask": x.data > 0})


@register_backward("relu")
def _relu_backward(grad, saved):
    return (grad * saved["mask"],)


@dataclass
class BatchNormStats:
    """Running statistics owned by the model, updated between forward passes."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        return cls(
            np.zeros(channels, dtype=np.float32),
            np.ones(channels, dtype=np.float32),
            momentum,
            eps,
        )


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: BatchNormStats,
    mode: str = "training",
    update_stats: bool = True,
) -> Tensor:
    """Per-channel normalisation of an [N, C, ...] input followed by the affine γ, β.

    "training" normalises with batch statistics and (unless `update_stats`
    is False) folds them into `stats` with its momentum; "inference" uses
    the running statistics.
    """
    validateparam(
        mode,
        ("training", "inference"),
        InvalidConfigError(f"batch_norm mode must be 'training' or 'inference', got '{mode}'"),
    )
    if x.ndim not in (2, 4):
        raise SizeMismatchError(f"batch_norm expects rank 2 or 4, got shape {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise SizeMismatchError(f"affine parameters must have shape ({channels},)")

    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    view = (1, channels) if x.ndim == 2 else (1, channels, 1, 1)
    if mode == "training":
        count = x.size // channels
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            m = stats.momentum
            unbiased = var * (count / max(count - 1, 1))
            stats.running_mean[...] = (1 - m) * stats.running_mean + m * mean
            stats.running_var[...] = (1 - m) * stats.running_var + m * unbiased
    else:
        mean = stats.running_mean.astype(x.dtype)
        var = stats.running_var.astype(x.dtype)

    inv_std = (1.0 / np.sqrt(var + stats.eps)).astype(x.dtype)
    x_hat = (x.data - mean.reshape(view)) * inv_std.reshape(view)
    out = gamma.data.reshape(view) * x_hat + beta.data.reshape(view)
    saved = {"x_hat": x_hat, "inv_std": inv_std, "gamma": gamma.data, "axes": axes, "view": view, "mode": mode}
    return record_op("batch_norm", (x, gamma, beta), out.astype(x.dtype, copy=False), saved)


@register_backward("batch_norm")
def _batch_norm_backward(grad, saved):
    x_hat, inv_std, axes, view = saved["x_hat"], saved["inv_std"], saved["axes"], saved["view"]
    d_gamma = (grad * x_hat).sum(axis=axes)
    d_beta = grad.sum(axis=axes)
    d_xhat = grad * saved["gamma"].reshape(view)
    if saved["mode"] == "inference":
        return d_xhat * inv_std.reshape(view), d_gamma, d_beta
    count = grad.size // grad.shape[1]
    d_input = (
        inv_std.reshape(view)
        / count
        * (
            count * d_xhat
            - d_xhat.sum(axis=axes).reshape(view)
            - x_hat * (d_xhat * x_hat).sum(axis=axes).reshape(view)
        )
    )
    return d_input, d_gamma, d_beta


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor = None) -> Tensor:
    """x [N, ...] flattened to [N, F] times weight [out, F]^T plus bias [out]."""
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    if weight.ndim != 2 or weight.shape[1] != flat.shape[1]:
        raise SizeMismatchError(
            f"weight {weight.shape} does not accept {flat.shape[1]} input features"
        )
    out = flat @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise SizeMismatchError(f"bias must have shape ({weight.shape[0]},)")
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)
    saved = {"flat": flat, "weight": weight.data, "input_shape": x.shape, "has_bias": bias is not None}
    return record_op("fully_connected", inputs, out, saved)


@register_backward("fully_connected")
def _fully_connected_backward(grad, saved):
    d_input = (grad @ saved["weight"]).reshape(saved["input_shape"])
    grads = [d_input, grad.T @ saved["flat"]]
    if saved["has_bias"]:
        grads.append(grad.sum(axis=0))
    return grads


def max_pool(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    _require_rank(x, 4, "max_pool")
    n, c, height, width = x.shape
    ho = conv_output_size(height, kernel, stride, padding)
    wo = conv_output_size(width, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise InvalidShapeError(f"max_pool window {kernel} does not fit {height}x{width}")
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad, constant_values=-np.inf)
    windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, ho, wo, kernel * kernel)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    saved = {"argmax": argmax, "padded_shape": xp.shape, "input_shape": x.shape, "kernel": kernel, "stride": stride, "padding": padding}
    return record_op("max_pool", (x,), out, saved)


@register_backward("max_pool")
def _max_pool_backward(grad, saved):
    k, s, p = saved["kernel"], saved["stride"], saved["padding"]
    height, width = saved["input_shape"][2:]
    ho, wo = grad.shape[2], grad.shape[3]
    d_padded = np.zeros(saved["padded_shape"], dtype=grad.dtype)
    for i in range(k):
        for j in range(k):
            hit = saved["argmax"] == i * k + j
            d_padded[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += grad * hit
    return (np.ascontiguousarray(d_padded[:, :, p : p + height, p : p + width]),)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer `labels` [N] under softmax(`logits` [N, K])."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise SizeMismatchError(f"logits {logits.shape} do not match {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InvalidConfigError(f"labels must lie in [0, {logits.shape[1]})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(labels.size)
    loss = np.mean(log_norm - shifted[rows, labels]).reshape(1).astype(logits.dtype)
    probs = np.exp(shifted - log_norm[:, None])
    return record_op("softmax_cross_entropy", (logits,), loss, {"probs": probs, "labels": labels})


@register_backward("softmax_cross_entropy")
def _softmax_cross_entropy_backward(grad, saved):
    probs, labels = saved["probs"], saved["labels"]
    d_logits = probs.copy()
    d_logits[np.arange(labels.size), labels] -= 1.0
    return (d_logits * (grad.reshape(()) / labels.size),)


def pad_shortcut(x: Tensor, out_channels: int, stride: int) -> Tensor:
    """Parameter-free residual shortcut: spatial subsampling plus zero channel padding."""
    _require_rank(x, 4, "pad_shortcut")
    c = x.shape[1]
    if out_channels < c:
        raise InvalidConfigError(f"cannot pad {c} channels down to {out_channels}")
    front = (out_channels - c) // 2
    sampled = x.data[:, :, ::stride, ::stride]
    out = np.zeros((sampled.shape[0], out_channels) + sampled.shape[2:], dtype=x.dtype)
    out[:, front : front + c] = sampled
    saved = {"input_shape": x.shape, "front": front, "stride": stride}
    return record_op("pad_shortcut", (x,), out, saved)


@register_backward("pad_shortcut")
def _pad_shortcut_backward(grad, saved):
    front, stride = saved["front"], saved["stride"]
    c = saved["input_shape"][1]
    d_input = np.zeros(saved["input_shape"], dtype=grad.dtype)
    d_input[:, :, ::stride, ::stride] = grad[:, front : front + c]
    return (d_input,)
