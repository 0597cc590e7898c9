"""Materialized networks: parameters + running statistics for an ArchDescriptor."""

import copy
import json
import logging
from pathlib import Path

import numpy as np

from .arch import ArchDescriptor
from .attention import CraConfig, CraParams, SeParams, cra_forward, se_forward, site_key
from .exceptions import InvalidConfigError
from .ops import (
    BatchNormStats,
    Conv2dParams,
    adaptive_avg_pool,
    batch_norm,
    conv2d,
    fully_connected,
    global_avg_pool,
    max_pool,
    pad_shortcut,
    relu,
    sigmoid,
)
from .tensor import Tensor, add, load_tensor, save_tensor

logger = logging.getLogger("cra")

CHECKPOINT_VERSION = 1


def _he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape, dtype=np.float32) * np.float32(np.sqrt(2.0 / fan_in))


def materialize(desc: ArchDescriptor, seed: int = 0, zero_attention: bool = False) -> "Model":
    """Allocate and initialize every parameter of `desc`, in graph order.

    Conv, fully connected, SE and GDConv weights are He-normal; biases and BN
    shifts start at zero, BN scales at one. With `zero_attention` the CRA/SE
    weights start at zero, so every attention begins at sigmoid(0) = 0.5.
    """
    rng = np.random.default_rng(seed)
    params = {}
    stats = {}
    for layer in desc.layers:
        p, name = layer.params, layer.name
        if layer.kind == "conv":
            kh, kw = p["kernel"]
            fan_in = p["in_channels"] // p["groups"] * kh * kw
            shape = (p["out_channels"], p["in_channels"] // p["groups"], kh, kw)
            params[f"{name}.weight"] = Tensor(_he_normal(rng, shape, fan_in))
            if p["bias"]:
                params[f"{name}.bias"] = Tensor(np.zeros(p["out_channels"], dtype=np.float32))
        elif layer.kind == "batch_norm":
            params[f"{name}.gamma"] = Tensor(np.ones(p["channels"], dtype=np.float32))
            params[f"{name}.beta"] = Tensor(np.zeros(p["channels"], dtype=np.float32))
            stats[name] = BatchNormStats.fresh(p["channels"])
        elif layer.kind == "fully_connected":
            shape = (p["out_features"], p["in_features"])
            params[f"{name}.weight"] = Tensor(_he_normal(rng, shape, p["in_features"]))
            if p["bias"]:
                params[f"{name}.bias"] = Tensor(np.zeros(p["out_features"], dtype=np.float32))
        elif layer.kind == "cra":
            h, w = p["target"]
            zeros = CraParams.zeros(CraConfig((h, w), p["channels"]))
            if not zero_attention:
                zeros.gdconv_kernels = Tensor(_he_normal(rng, (p["channels"], h, w), h * w))
            params[f"{name}.kernel"] = zeros.gdconv_kernels
            params[f"{name}.bias"] = zeros.gdconv_bias
        elif layer.kind == "se":
            se = SeParams.zeros(p["channels"], p["ratio"])
            if not zero_attention:
                se.reduce_weight = Tensor(_he_normal(rng, se.reduce_weight.shape, p["channels"]))
                se.expand_weight = Tensor(_he_normal(rng, se.expand_weight.shape, se.reduce_weight.shape[0]))
            params[f"{name}.reduce.weight"] = se.reduce_weight
            params[f"{name}.reduce.bias"] = se.reduce_bias
            params[f"{name}.expand.weight"] = se.expand_weight
            params[f"{name}.expand.bias"] = se.expand_bias
    logger.debug(f"materialized {desc.label}: {sum(t.size for t in params.values())} parameters")
    return Model(desc, params, stats)


class Model:
    """A descriptor bound to parameter tensors and BN running statistics.

    `params` is ordered like the descriptor's layers and keyed
    '<layer name>.<role>', e.g. 'stage1.block1.conv1.weight'.
    """

    def __init__(self, desc: ArchDescriptor, params: dict, stats: dict):
        self.desc = desc
        self.params = params
        self.stats = stats
        self._referenced = {l.source for l in desc.layers} | {l.skip for l in desc.layers}
        self._referenced.discard(None)

    def __repr__(self):
        return f"Model({self.desc.label}, {self.parameter_count()} parameters)"

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def decay_names(self) -> set:
        """Parameters that take weight decay: weights and GDConv kernels, not biases or BN affine."""
        return {name for name in self.params if name.endswith((".weight", ".kernel"))}

    def cra_sites(self) -> list:
        return [site_key(l.stage_id, l.block_id) for l in self.desc.layers if l.kind == "cra"]

    def buffers(self) -> dict:
        out = {}
        for name, stat in self.stats.items():
            out[f"{name}.running_mean"] = stat.running_mean
            out[f"{name}.running_var"] = stat.running_var
        return out

    def astype(self, dtype) -> "Model":
        """Detached copy with parameters in `dtype`; running statistics are copied."""
        params = {name: t.astype(dtype) for name, t in self.params.items()}
        return Model(self.desc, params, copy.deepcopy(self.stats))

    def forward(self, x: Tensor, training: bool = False, trace: dict = None, update_stats: bool = True) -> Tensor:
        """Logits for a batch x [N, C, H, W].

        The trailing softmax layer is not applied. CRA attentions are stored
        in `trace` under their site key when a dict is given.
        """
        if x.ndim != 4 or x.shape[1:] != self.desc.input_shape:
            raise InvalidConfigError(f"{self.desc.label} expects [N, {self.desc.input_shape}] input, got {x.shape}")
        outputs = {}
        current = x
        for layer in self.desc.layers:
            if layer.kind == "softmax":
                break
            inp = outputs[layer.source] if layer.source is not None else current
            current = self._run(layer, inp, outputs, training, trace, update_stats)
            if layer.name in self._referenced:
                outputs[layer.name] = current
        return current

    def _run(self, layer, inp, outputs, training, trace, update_stats):
        p, name, P = layer.params, layer.name, self.params
        kind = layer.kind
        if kind == "conv":
            conv = Conv2dParams(
                kernel=P[f"{name}.weight"],
                bias=P.get(f"{name}.bias"),
                stride=p["stride"],
                padding=p["padding"],
                groups=p["groups"],
            )
            return conv2d(inp, conv)
        if kind == "batch_norm":
            mode = "training" if training else "inference"
            return batch_norm(inp, P[f"{name}.gamma"], P[f"{name}.beta"], self.stats[name], mode, update_stats)
        if kind == "relu":
            return relu(inp)
        if kind == "sigmoid":
            return sigmoid(inp)
        if kind == "max_pool":
            return max_pool(inp, p["kernel"], p["stride"], p["padding"])
        if kind == "adaptive_avg_pool":
            return adaptive_avg_pool(inp, p["target"])
        if kind == "global_avg_pool":
            return global_avg_pool(inp)
        if kind == "fully_connected":
            return fully_connected(inp, P[f"{name}.weight"], P.get(f"{name}.bias"))
        if kind == "cra":
            out, v = cra_forward(
                inp,
                CraParams(P[f"{name}.kernel"], P[f"{name}.bias"]),
                CraConfig(p["target"], p["channels"]),
            )
            if trace is not None:
                trace[site_key(layer.stage_id, layer.block_id)] = v.data
            return out
        if kind == "se":
            se = SeParams(
                P[f"{name}.reduce.weight"],
                P[f"{name}.reduce.bias"],
                P[f"{name}.expand.weight"],
                P[f"{name}.expand.bias"],
                p["ratio"],
            )
            return se_forward(inp, se)
        if kind == "add":
            return add(inp, outputs[layer.skip])
        if kind == "pad_shortcut":
            return pad_shortcut(inp, p["out_channels"], p["stride"])
        raise InvalidConfigError(f"{name}: layer kind '{kind}' cannot be executed")


def save_tensors(directory, tensors: dict):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, value in tensors.items():
        save_tensor(directory / f"{name}.crat", value if isinstance(value, Tensor) else Tensor(value))


def load_tensors(directory, names) -> dict:
    directory = Path(directory)
    return {name: load_tensor(directory / f"{name}.crat") for name in names}


def save_checkpoint(model: Model, directory, seed: int = None) -> Path:
    """Write descriptor.json, manifest.json and one tensor file per parameter and buffer."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "descriptor.json").write_text(model.desc.to_json())
    buffers = model.buffers()
    manifest = {
        "version": CHECKPOINT_VERSION,
        "parameters": list(model.params),
        "buffers": list(buffers),
        "seed": seed,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    save_tensors(directory / "tensors", {**model.params, **buffers})
    logger.debug(f"checkpoint written to {directory}")
    return directory


def _read_manifest(directory: Path) -> dict:
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise InvalidConfigError(f"{directory}: unsupported checkpoint version {manifest.get('version')}")
    return manifest


def restore(model: Model, directory):
    """Load parameters and running statistics from a checkpoint into `model` in place."""
    directory = Path(directory)
    manifest = _read_manifest(directory)
    if manifest["parameters"] != list(model.params):
        raise InvalidConfigError(f"{directory}: parameter names do not match {model.desc.label}")
    loaded = load_tensors(directory / "tensors", manifest["parameters"] + manifest["buffers"])
    for name in manifest["parameters"]:
        if loaded[name].shape != model.params[name].shape:
            raise InvalidConfigError(f"{directory}: {name} has shape {loaded[name].shape}")
        model.params[name].data[...] = loaded[name].data
    for name, buffer in model.buffers().items():
        buffer[...] = loaded[name].data
    return model


def load_checkpoint(directory) -> Model:
    directory = Path(directory)
    desc = ArchDescriptor.from_json((directory / "descriptor.json").read_text())
    return restore(materialize(desc, seed=0), directory)
