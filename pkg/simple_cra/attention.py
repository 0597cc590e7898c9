"""Channel attention blocks: CRA (pool -> GDConv -> sigmoid -> rescale) and the SE baseline."""

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import EmptyTraceError, InvalidConfigError
from .ops import adaptive_avg_pool, fully_connected, global_avg_pool, relu, sigmoid
from .tensor import Tensor, inference, record_op, register_backward

logger = logging.getLogger("cra")

SE_RATIO = 16


def site_key(stage_id: int, block_id: int) -> str:
    return f"CRA.{stage_id}.{block_id}"


@dataclass(frozen=True)
class CraConfig:
    """Pooled size (h, w) and channel count C for one CRA insertion."""

    target: tuple
    channels: int

    def __post_init__(self):
        h, w = (int(v) for v in self.target)
        object.__setattr__(self, "target", (h, w))
        if h < 1 or w < 1 or self.channels < 1:
            raise InvalidConfigError(f"CRA target {self.target} and channels {self.channels} must be positive")

    def clamped(self, height: int, width: int, site: str = "CRA") -> "CraConfig":
        """Same config with the target clipped to a height x width feature map."""
        h, w = self.target
        if h <= height and w <= width:
            return self
        logger.warning(f"{site}: CRA target {h}x{w} clamped to feature map {height}x{width}")
        return CraConfig((min(h, height), min(w, width)), self.channels)

    @property
    def param_count(self) -> int:
        h, w = self.target
        return self.channels * (h * w + 1)


@dataclass
class CraParams:
    """GDConv kernels L = [l^1 .. l^C], each h x w, plus one bias per channel."""

    gdconv_kernels: Tensor
    gdconv_bias: Tensor

    @classmethod
    def zeros(cls, config: CraConfig, dtype=np.float32):
        h, w = config.target
        return cls(
            Tensor(np.zeros((config.channels, h, w), dtype=dtype)),
            Tensor(np.zeros(config.channels, dtype=dtype)),
        )

    @property
    def param_count(self) -> int:
        return self.gdconv_kernels.size + self.gdconv_bias.size


@dataclass
class SeParams:
    """Squeeze-and-excitation weights: fc C -> C/r, relu, fc C/r -> C, both with bias."""

    reduce_weight: Tensor
    reduce_bias: Tensor
    expand_weight: Tensor
    expand_bias: Tensor
    ratio: int = SE_RATIO

    @classmethod
    def zeros(cls, channels: int, ratio: int = SE_RATIO, dtype=np.float32):
        if channels % ratio:
            raise InvalidConfigError(f"SE ratio {ratio} does not divide {channels} channels")
        hidden = channels // ratio
        return cls(
            Tensor(np.zeros((hidden, channels), dtype=dtype)),
            Tensor(np.zeros(hidden, dtype=dtype)),
            Tensor(np.zeros((channels, hidden), dtype=dtype)),
            Tensor(np.zeros(channels, dtype=dtype)),
            ratio,
        )

    @property
    def channels(self) -> int:
        return self.expand_weight.shape[0]

    @property
    def param_count(self) -> int:
        return sum(
            t.size for t in (self.reduce_weight, self.reduce_bias, self.expand_weight, self.expand_bias)
        )


def se_param_count(channels: int, ratio: int = SE_RATIO) -> int:
    return 2 * channels * channels // ratio + channels // ratio + channels


def gdconv(u: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Global depthwise convolution: one full-support correlation per channel, [N, C, h, w] -> [N, C]."""
    if u.shape[1:] != kernels.shape or bias.shape != (kernels.shape[0],):
        raise InvalidConfigError(
            f"GDConv kernels {kernels.shape} / bias {bias.shape} do not match input {u.shape}"
        )
    out = np.einsum("nchw,chw->nc", u.data, kernels.data) + bias.data
    return record_op("gdconv", (u, kernels, bias), out, {"u": u.data, "kernels": kernels.data})


@register_backward("gdconv")
def _gdconv_backward(grad, saved):
    d_u = grad[:, :, None, None] * saved["kernels"][None]
    d_kernels = np.einsum("nc,nchw->chw", grad, saved["u"])
    return d_u, d_kernels, grad.sum(axis=0)


def channel_scale(y: Tensor, v: Tensor) -> Tensor:
    """Multiply every feature map y[n, c] by the scalar v[n, c]."""
    if v.shape != y.shape[:2]:
        raise InvalidConfigError(f"attention {v.shape} does not match features {y.shape}")
    out = y.data * v.data[:, :, None, None]
    return record_op("channel_scale", (y, v), out, {"y": y.data, "v": v.data})


@register_backward("channel_scale")
def _channel_scale_backward(grad, saved):
    return grad * saved["v"][:, :, None, None], (grad * saved["y"]).sum(axis=(2, 3))


def cra_forward(y: Tensor, params: CraParams, config: CraConfig):
    """Channel reassessment attention over features `y` [N, C, H, W].

    Returns:
        tuple: (rescaled features [N, C, H, W], attentions V [N, C])

    Raises:
        InvalidConfigError: channel count, kernel size or target do not fit `y`
    """
    if y.ndim != 4:
        raise InvalidConfigError(f"CRA expects [N, C, H, W] features, got {y.shape}")
    _, c, height, width = y.shape
    h, w = config.target
    if c != config.channels or params.gdconv_kernels.shape != (c, h, w):
        raise InvalidConfigError(
            f"CRA configured for {config.channels} channels at {h}x{w}, "
            f"kernels {params.gdconv_kernels.shape}, features {y.shape}"
        )
    if h > height or w > width:
        raise InvalidConfigError(f"CRA target {h}x{w} exceeds feature map {height}x{width}")

    u = adaptive_avg_pool(y, (h, w))
    v = sigmoid(gdconv(u, params.gdconv_kernels, params.gdconv_bias))
    return channel_scale(y, v), v


def se_forward(y: Tensor, params: SeParams) -> Tensor:
    if y.ndim != 4 or y.shape[1] != params.channels:
        raise InvalidConfigError(f"SE block for {params.channels} channels got features {y.shape}")
    squeezed = global_avg_pool(y)
    hidden = relu(fully_connected(squeezed, params.reduce_weight, params.reduce_bias))
    s = sigmoid(fully_connected(hidden, params.expand_weight, params.expand_bias))
    return channel_scale(y, s)


@dataclass
class AttentionTrace:
    """Per-site attention vectors for one input, keyed 'CRA.stage.block' in network order."""

    sites: dict = field(default_factory=dict)

    def keys(self) -> list:
        return list(self.sites)

    def __getitem__(self, key) -> np.ndarray:
        return self.sites[key]

    def __len__(self):
        return len(self.sites)

    def rows(self):
        for key, values in self.sites.items():
            for channel, value in enumerate(values):
                yield {"site_key": key, "channel_index": channel, "attention_value": repr(float(value))}

    def write_csv(self, fh):
        writer = csv.DictWriter(fh, fieldnames=["site_key", "channel_index", "attention_value"])
        writer.writeheader()
        writer.writerows(self.rows())

    def to_csv(self) -> str:
        buffer = io.StringIO()
        self.write_csv(buffer)
        return buffer.getvalue()

    def to_json(self) -> str:
        return json.dumps({key: [float(v) for v in values] for key, values in self.sites.items()}, indent=2)


def extract_attentions(model, x: Tensor) -> AttentionTrace:
    """Run `model` in inference mode on one image and collect every CRA site's attentions.

    Args:
        model (Model): materialized network
        x (Tensor): [1, C, H, W] or [C, H, W]

    Raises:
        EmptyTraceError: the model has no CRA sites
        InvalidConfigError: more than one image was given
    """
    if not model.cra_sites():
        raise EmptyTraceError("model has no CRA modules to trace")
    if x.ndim == 3:
        x = Tensor(x.data[None])
    if x.shape[0] != 1:
        raise InvalidConfigError(f"attention traces are taken for one image, got a batch of {x.shape[0]}")

    trace = {}
    with inference():
        model.forward(x, training=False, trace=trace)
    return AttentionTrace({key: values[0].copy() for key, values in trace.items()})


