"""Declarative network descriptors and the ResNet / toy builders.

A descriptor is an ordered list of `LayerSpec`s. Each layer reads the output
of the layer before it unless `source` names another producer; residual
`add` layers name their second operand in `skip`. Shapes are per sample:
(C, H, W) for feature maps and (F,) for vectors.
"""

import json
import logging
from dataclasses import dataclass, field, replace

from .attention import CraConfig
from .exceptions import (
    InvalidConfigError,
    InvalidShapeError,
    MissingConfigError,
    UnsupportedArchitectureError,
)
from .ops import conv_output_size
from .util import validateparam

logger = logging.getLogger("cra")

DESCRIPTOR_VERSION = 1

KINDS = (
    "conv",
    "batch_norm",
    "relu",
    "max_pool",
    "adaptive_avg_pool",
    "global_avg_pool",
    "fully_connected",
    "sigmoid",
    "cra",
    "se",
    "add",
    "softmax",
    "pad_shortcut",
)
ATTENTION_KINDS = ("cra", "se")
VARIANTS = ("base", "se", "cra")

IMAGENET_STAGES = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3)}
IMAGENET_WIDTHS = (64, 128, 256, 512)
BOTTLENECK_EXPANSION = 4
CIFAR_BLOCKS = {56: 9, 110: 18}
CIFAR_WIDTHS = (16, 32, 64)
SE_RATIO = 16


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _listify(value):
    if isinstance(value, tuple):
        return [_listify(v) for v in value]
    return value


@dataclass
class LayerSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    input_shape: tuple = ()
    output_shape: tuple = ()
    source: str = None
    skip: str = None
    stage_id: int = None
    block_id: int = None

    def __post_init__(self):
        validateparam(self.kind, KINDS, InvalidConfigError(f"unknown layer kind '{self.kind}'"))
        self.params = {k: _tuplify(v) for k, v in self.params.items()}
        self.input_shape = tuple(self.input_shape)
        self.output_shape = tuple(self.output_shape)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "params": {k: _listify(v) for k, v in self.params.items()},
            "input_shape": list(self.input_shape),
            "output_shape": list(self.output_shape),
            "source": self.source,
            "skip": self.skip,
            "stage_id": self.stage_id,
            "block_id": self.block_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LayerSpec":
        return cls(**data)


def infer_output_shape(layer: LayerSpec, in_shape: tuple, skip_shape: tuple = None) -> tuple:
    """Output shape of `layer` for a per-sample input shape.

    Raises:
        InvalidShapeError: the layer cannot accept `in_shape`
    """
    p, kind = layer.params, layer.kind

    def need_map():
        if len(in_shape) != 3:
            raise InvalidShapeError(f"{layer.name}: expects a (C, H, W) input, got {in_shape}")
        return in_shape

    def need_channels(c, expected):
        if c != expected:
            raise InvalidShapeError(f"{layer.name}: expects {expected} channels, got {c}")

    if kind == "conv":
        c, h, w = need_map()
        need_channels(c, p["in_channels"])
        (kh, kw), (sh, sw), (ph, pw) = p["kernel"], p["stride"], p["padding"]
        ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)
        if ho < 1 or wo < 1:
            raise InvalidShapeError(f"{layer.name}: kernel does not fit a {h}x{w} input")
        return (p["out_channels"], ho, wo)
    if kind == "max_pool":
        c, h, w = need_map()
        k, s, pad = p["kernel"], p["stride"], p["padding"]
        ho, wo = conv_output_size(h, k, s, pad), conv_output_size(w, k, s, pad)
        if ho < 1 or wo < 1:
            raise InvalidShapeError(f"{layer.name}: pooling window does not fit a {h}x{w} input")
        return (c, ho, wo)
    if kind == "adaptive_avg_pool":
        c, h, w = need_map()
        th, tw = p["target"]
        if th > h or tw > w:
            raise InvalidShapeError(f"{layer.name}: target {th}x{tw} exceeds {h}x{w}")
        return (c, th, tw)
    if kind == "global_avg_pool":
        return (need_map()[0],)
    if kind == "fully_connected":
        features = 1
        for dim in in_shape:
            features *= dim
        if features != p["in_features"]:
            raise InvalidShapeError(f"{layer.name}: expects {p['in_features']} features, got {features}")
        return (p["out_features"],)
    if kind in ("batch_norm", "cra", "se"):
        need_channels(in_shape[0], p["channels"])
        if kind == "cra":
            c, h, w = need_map()
            th, tw = p["target"]
            if th > h or tw > w:
                raise InvalidShapeError(f"{layer.name}: CRA target {th}x{tw} exceeds {h}x{w}")
        return in_shape
    if kind == "pad_shortcut":
        c, h, w = need_map()
        s = p["stride"]
        return (p["out_channels"], (h - 1) // s + 1, (w - 1) // s + 1)
    if kind == "add":
        if skip_shape != in_shape:
            raise InvalidShapeError(f"{layer.name}: residual operands {in_shape} and {skip_shape} differ")
        return in_shape
    # relu, sigmoid, softmax
    return in_shape


def propagate(layers: list, input_shape: tuple) -> list:
    """Fill in input/output shapes for `layers`, clamping CRA targets to their feature maps."""
    outputs = {}
    current = tuple(input_shape)
    shaped = []
    for layer in layers:
        if layer.source is not None and layer.source not in outputs:
            raise InvalidConfigError(f"{layer.name}: unknown source layer '{layer.source}'")
        in_shape = outputs[layer.source] if layer.source is not None else current
        params = dict(layer.params)
        if layer.kind == "cra":
            config = CraConfig(params["target"], params["channels"])
            params["target"] = config.clamped(in_shape[1], in_shape[2], layer.name).target
        skip_shape = None
        if layer.kind == "add":
            if layer.skip not in outputs:
                raise InvalidConfigError(f"{layer.name}: unknown skip layer '{layer.skip}'")
            skip_shape = outputs[layer.skip]
        updated = replace(layer, params=params, input_shape=in_shape)
        updated.output_shape = infer_output_shape(updated, in_shape, skip_shape)
        outputs[layer.name] = updated.output_shape
        current = updated.output_shape
        shaped.append(updated)
    return shaped


@dataclass
class ArchDescriptor:
    """A network description usable both for cost analysis and for `materialize`."""

    arch: str
    variant: str
    dataset: str
    input_shape: tuple
    num_classes: int
    layers: list
    cra_target: tuple = None

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if self.cra_target is not None:
            self.cra_target = tuple(self.cra_target)

    @property
    def label(self) -> str:
        base = {
            "resnet50": "ResNet-50",
            "resnet101": "ResNet-101",
            "resnet56": "ResNet-56",
            "resnet110": "ResNet-110",
        }.get(self.arch, self.arch)
        if self.variant == "base":
            return base
        return f"{self.variant.upper()}-{base}"

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def attention_sites(self, kind: str = "cra") -> list:
        return [layer for layer in self.layers if layer.kind == kind]

    def validate(self):
        """Check the shape chain and the attention placement rule.

        Raises:
            InvalidShapeError: a layer's recorded shapes disagree with its producer
            InvalidConfigError: an attention layer is not directly followed by the residual add
        """
        outputs = {}
        current = self.input_shape
        for i, layer in enumerate(self.layers):
            expected = outputs[layer.source] if layer.source is not None else current
            if layer.input_shape != expected:
                raise InvalidShapeError(
                    f"{layer.name}: input shape {layer.input_shape} != producer output {expected}"
                )
            skip_shape = outputs.get(layer.skip) if layer.kind == "add" else None
            if infer_output_shape(layer, layer.input_shape, skip_shape) != layer.output_shape:
                raise InvalidShapeError(f"{layer.name}: output shape {layer.output_shape} is inconsistent")
            if layer.kind in ATTENTION_KINDS:
                following = self.layers[i + 1] if i + 1 < len(self.layers) else None
                if following is None or following.kind != "add" or following.source is not None:
                    raise InvalidConfigError(f"{layer.name}: attention must sit right before the residual add")
            outputs[layer.name] = layer.output_shape
            current = layer.output_shape

    def at_resolution(self, size: int) -> "ArchDescriptor":
        """Same network re-propagated for a size x size input."""
        input_shape = (self.input_shape[0], int(size), int(size))
        try:
            layers = propagate(self.layers, input_shape)
        except InvalidShapeError as err:
            raise UnsupportedArchitectureError(f"{self.label} cannot run at {size}x{size}: {err}") from err
        return replace(self, input_shape=input_shape, layers=layers)

    def to_dict(self) -> dict:
        return {
            "version": DESCRIPTOR_VERSION,
            "arch": self.arch,
            "variant": self.variant,
            "dataset": self.dataset,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "cra_target": list(self.cra_target) if self.cra_target is not None else None,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ArchDescriptor":
        data = dict(data)
        version = data.pop("version", None)
        if version != DESCRIPTOR_VERSION:
            raise InvalidConfigError(f"unsupported descriptor version {version}")
        data["layers"] = [LayerSpec.from_dict(layer) for layer in data["layers"]]
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ArchDescriptor":
        return cls.from_dict(json.loads(text))


def descriptor_diff(a: ArchDescriptor, b: ArchDescriptor) -> list:
    """Layers present in only one of the two descriptors, as (side, LayerSpec) pairs."""
    a_layers = {layer.name: layer for layer in a.layers}
    b_layers = {layer.name: layer for layer in b.layers}
    diff = [("a", layer) for name, layer in a_layers.items() if b_layers.get(name) != layer]
    diff += [("b", layer) for name, layer in b_layers.items() if a_layers.get(name) != layer]
    return diff


class _LayerList:
    def __init__(self):
        self.layers = []

    @property
    def last(self) -> str:
        return self.layers[-1].name

    def add(self, name, kind, source=None, skip=None, stage=None, block=None, **params):
        self.layers.append(
            LayerSpec(name, kind, params, source=source, skip=skip, stage_id=stage, block_id=block)
        )
        return name

    def conv(self, name, in_channels, out_channels, kernel, stride=1, padding=0, source=None, bias=False):
        return self.add(
            name,
            "conv",
            source=source,
            in_channels=in_channels,
            out_channels=out_channels,
            kernel=(kernel, kernel),
            stride=(stride, stride),
            padding=(padding, padding),
            groups=1,
            bias=bias,
        )

    def attention(self, prefix, channels, attention, stage, block):
        kind, target = attention
        if kind == "cra":
            self.add(f"{prefix}.cra", "cra", stage=stage, block=block, channels=channels, target=target)
        elif kind == "se":
            self.add(f"{prefix}.se", "se", stage=stage, block=block, channels=channels, ratio=SE_RATIO)


def _bottleneck(b: _LayerList, stage, block, in_channels, width, stride, attention):
    prefix = f"stage{stage}.block{block}"
    block_input = b.last
    out_channels = width * BOTTLENECK_EXPANSION
    skip = block_input
    if stride != 1 or in_channels != out_channels:
        b.conv(f"{prefix}.shortcut.conv", in_channels, out_channels, 1, stride, source=block_input)
        skip = b.add(f"{prefix}.shortcut.bn", "batch_norm", channels=out_channels)
    b.conv(f"{prefix}.conv1", in_channels, width, 1, source=block_input)
    b.add(f"{prefix}.bn1", "batch_norm", channels=width)
    b.add(f"{prefix}.relu1", "relu")
    # downsampling stride sits on the 3x3 convolution
    b.conv(f"{prefix}.conv2", width, width, 3, stride, padding=1)
    b.add(f"{prefix}.bn2", "batch_norm", channels=width)
    b.add(f"{prefix}.relu2", "relu")
    b.conv(f"{prefix}.conv3", width, out_channels, 1)
    b.add(f"{prefix}.bn3", "batch_norm", channels=out_channels)
    b.attention(prefix, out_channels, attention, stage, block)
    b.add(f"{prefix}.add", "add", skip=skip)
    b.add(f"{prefix}.relu", "relu")
    return out_channels


def _basic_block(b: _LayerList, stage, block, in_channels, width, stride, attention):
    prefix = f"stage{stage}.block{block}"
    block_input = b.last
    skip = block_input
    if stride != 1 or in_channels != width:
        skip = b.add(
            f"{prefix}.shortcut", "pad_shortcut", source=block_input, out_channels=width, stride=stride
        )
    b.conv(f"{prefix}.conv1", in_channels, width, 3, stride, padding=1, source=block_input)
    b.add(f"{prefix}.bn1", "batch_norm", channels=width)
    b.add(f"{prefix}.relu1", "relu")
    b.conv(f"{prefix}.conv2", width, width, 3, padding=1)
    b.add(f"{prefix}.bn2", "batch_norm", channels=width)
    b.attention(prefix, width, attention, stage, block)
    b.add(f"{prefix}.add", "add", skip=skip)
    b.add(f"{prefix}.relu", "relu")
    return width


def default_cra_target(dataset: str) -> tuple:
    return (7, 7) if dataset == "imagenet-shape" else (8, 8)


def _attention_for(variant: str, cra_target) -> tuple:
    validateparam(
        variant, VARIANTS, InvalidConfigError(f"variant must be one of {', '.join(VARIANTS)}, got '{variant}'")
    )
    if variant == "cra":
        if cra_target is None:
            raise MissingConfigError("the cra variant needs a target (h, w)")
        h, w = (int(v) for v in cra_target)
        if h < 1 or w < 1:
            raise InvalidConfigError(f"CRA target must be positive, got {cra_target}")
        return ("cra", (h, w))
    return (variant, None)


def build_resnet(
    depth: int,
    variant: str = "base",
    num_classes: int = None,
    cra_target: tuple = None,
    input_size: int = None,
) -> ArchDescriptor:
    """Describe a ResNet in its base, SE or CRA form.

    Depths 50/101 are ImageNet-shape bottleneck networks (224x224 input by
    default); depths 56/110 are CIFAR-shape basic-block networks (32x32).

    Args:
        depth (int): 50, 101, 56 or 110
        variant (str): 'base', 'se' or 'cra'
        num_classes (int, optional): classifier width. Defaults to 1000 (ImageNet-shape) or 10 (CIFAR-shape).
        cra_target (tuple, optional): pooled size (h, w); required for 'cra'
        input_size (int, optional): square input resolution

    Raises:
        UnsupportedArchitectureError: depth unknown or input size not valid for the dataset shape
        MissingConfigError: variant 'cra' without a target
    """
    attention = _attention_for(variant, cra_target)
    b = _LayerList()

    if depth in IMAGENET_STAGES:
        dataset = "imagenet-shape"
        input_size = 224 if input_size is None else int(input_size)
        if input_size < 32:
            raise UnsupportedArchitectureError(f"ResNet-{depth} needs an input of at least 32x32")
        num_classes = 1000 if num_classes is None else num_classes
        b.conv("stem.conv", 3, 64, 7, 2, padding=3)
        b.add("stem.bn", "batch_norm", channels=64)
        b.add("stem.relu", "relu")
        b.add("stem.pool", "max_pool", kernel=3, stride=2, padding=1)
        channels = 64
        for stage, (blocks, width) in enumerate(zip(IMAGENET_STAGES[depth], IMAGENET_WIDTHS), start=1):
            for block in range(1, blocks + 1):
                stride = 2 if block == 1 and stage > 1 else 1
                channels = _bottleneck(b, stage, block, channels, width, stride, attention)
    elif depth in CIFAR_BLOCKS:
        dataset = "cifar-shape"
        input_size = 32 if input_size is None else int(input_size)
        if input_size != 32:
            raise UnsupportedArchitectureError(f"ResNet-{depth} is a 32x32 CIFAR-shape network, got {input_size}")
        num_classes = 10 if num_classes is None else num_classes
        b.conv("stem.conv", 3, 16, 3, padding=1)
        b.add("stem.bn", "batch_norm", channels=16)
        b.add("stem.relu", "relu")
        channels = 16
        for stage, width in enumerate(CIFAR_WIDTHS, start=1):
            for block in range(1, CIFAR_BLOCKS[depth] + 1):
                stride = 2 if block == 1 and stage > 1 else 1
                channels = _basic_block(b, stage, block, channels, width, stride, attention)
    else:
        raise UnsupportedArchitectureError(f"no ResNet of depth {depth}; supported: 50, 101, 56, 110")

    if num_classes < 1:
        raise InvalidConfigError("num_classes must be positive")
    b.add("head.pool", "global_avg_pool")
    b.add("head.fc", "fully_connected", in_features=channels, out_features=num_classes, bias=True)
    b.add("head.softmax", "softmax")

    input_shape = (3, input_size, input_size)
    desc = ArchDescriptor(
        arch=f"resnet{depth}",
        variant=variant,
        dataset=dataset,
        input_shape=input_shape,
        num_classes=num_classes,
        layers=propagate(b.layers, input_shape),
        cra_target=attention[1],
    )
    logger.debug(f"built {desc.label} with {len(desc.layers)} layers")
    return desc


def build_toy(
    variant: str = "cra",
    num_classes: int = 4,
    input_size: int = 32,
    width: int = 8,
    cra_target: tuple = (4, 4),
    pool: int = 4,
) -> ArchDescriptor:
    """Small network for desk-scale training and gradient checks.

    stem conv -> one residual basic block carrying the attention -> pooled classifier.
    """
    attention = _attention_for(variant, cra_target if variant == "cra" else None)
    if variant == "se" and width % SE_RATIO:
        raise InvalidConfigError(f"an SE toy needs a width divisible by {SE_RATIO}, got {width}")
    pool = min(pool, input_size)
    b = _LayerList()
    b.conv("stem.conv", 3, width, 3, padding=1)
    b.add("stem.bn", "batch_norm", channels=width)
    b.add("stem.relu", "relu")
    _basic_block(b, 1, 1, width, width, 1, attention)
    b.add("head.pool", "adaptive_avg_pool", target=(pool, pool))
    b.add("head.fc", "fully_connected", in_features=width * pool * pool, out_features=num_classes, bias=True)
    b.add("head.softmax", "softmax")

    input_shape = (3, input_size, input_size)
    return ArchDescriptor(
        arch=f"toy-{variant}",
        variant=variant,
        dataset="toy",
        input_shape=input_shape,
        num_classes=num_classes,
        layers=propagate(b.layers, input_shape),
        cra_target=attention[1],
    )
