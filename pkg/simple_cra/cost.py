"""Parameter and FLOP accounting over architecture descriptors."""

import csv
import io
import json
import logging
from dataclasses import dataclass, field

from .arch import ArchDescriptor, build_resnet
from .exceptions import InvalidConfigError, InvalidConventionError
from .util import format_count, validateparam

logger = logging.getLogger("cra")

# "mac": multiply-accumulates of conv / fc layers plus one op per input element a pool covers.
# "paper-cra-additive": same, with each CRA site counted as 2C(3HW + hw).
CONVENTIONS = ("mac", "paper-cra-additive")
FORMATS = ("text", "csv", "json")
DEFAULT_TARGETS = ((7, 7), (5, 5), (3, 3), (1, 1))
TABLE_FIELDS = ["arch", "variant", "target", "params_exact", "params_display", "flops_exact", "flops_display"]


def _prod(shape) -> int:
    out = 1
    for dim in shape:
        out *= dim
    return out


def cra_formula_flops(channels: int, height: int, width: int, h: int, w: int) -> int:
    """Closed-form CRA cost 2C(3HW + hw)."""
    return 2 * channels * (3 * height * width + h * w)


def layer_params(layer) -> int:
    p = layer.params
    if layer.kind == "conv":
        kh, kw = p["kernel"]
        count = kh * kw * (p["in_channels"] // p["groups"]) * p["out_channels"]
        return count + (p["out_channels"] if p["bias"] else 0)
    if layer.kind == "batch_norm":
        return 2 * p["channels"]
    if layer.kind == "fully_connected":
        return p["in_features"] * p["out_features"] + (p["out_features"] if p["bias"] else 0)
    if layer.kind == "cra":
        h, w = p["target"]
        return p["channels"] * (h * w + 1)
    if layer.kind == "se":
        c, hidden = p["channels"], p["channels"] // p["ratio"]
        return 2 * c * hidden + hidden + c
    return 0


def layer_flops(layer) -> tuple:
    """(counted ops, elementwise ops) for one layer under the 'mac' convention."""
    p, kind = layer.params, layer.kind
    out_elems = _prod(layer.output_shape)
    if kind == "conv":
        kh, kw = p["kernel"]
        macs = kh * kw * (p["in_channels"] // p["groups"]) * out_elems
        return macs, (out_elems if p["bias"] else 0)
    if kind == "fully_connected":
        return p["in_features"] * p["out_features"], (p["out_features"] if p["bias"] else 0)
    if kind == "max_pool":
        return p["kernel"] * p["kernel"] * out_elems, 0
    if kind == "global_avg_pool":
        return _prod(layer.input_shape), 0
    if kind == "adaptive_avg_pool":
        # every input element is read once, however the bins overlap
        return _prod(layer.input_shape), 0
    if kind == "cra":
        c, height, width = layer.input_shape
        h, w = p["target"]
        pool = c * height * width
        gdconv = c * h * w
        # bias add, sigmoid, rescale multiply
        return pool + gdconv, c + c + c * height * width
    if kind == "se":
        c, height, width = layer.input_shape
        hidden = c // p["ratio"]
        # fc biases, relu, sigmoid, rescale multiply
        return c * height * width + 2 * c * hidden, hidden + c + hidden + c + c * height * width
    if kind in ("batch_norm", "relu", "sigmoid", "add", "softmax"):
        return 0, out_elems
    return 0, 0


@dataclass
class CostRow:
    name: str
    kind: str
    output_shape: tuple
    params: int
    flops: int
    elementwise: int
    formula_flops: int = None


@dataclass
class CostReport:
    """Per-layer costs of one descriptor; totals are the sums of the rows."""

    arch: str
    variant: str
    target: tuple
    convention: str
    rows: list = field(default_factory=list)

    @property
    def params_total(self) -> int:
        return sum(row.params for row in self.rows)

    @property
    def flops_total(self) -> int:
        return sum(row.flops for row in self.rows)

    @property
    def cra_rows(self) -> list:
        return [row for row in self.rows if row.kind == "cra"]

    @property
    def formula_ratio(self):
        """Closed-form CRA cost over the direct op count (counted + elementwise), summed over sites."""
        rows = self.cra_rows
        if not rows:
            return None
        direct = sum(row.flops + row.elementwise for row in rows)
        formula = sum(row.formula_flops for row in rows)
        return formula / direct

    def summary(self) -> dict:
        return {
            "arch": self.arch,
            "variant": self.variant,
            "target": "x".join(str(v) for v in self.target) if self.target else "",
            "params_exact": self.params_total,
            "params_display": format_count(self.params_total),
            "flops_exact": self.flops_total if self.convention else "",
            "flops_display": format_count(self.flops_total) if self.convention else "",
        }


def count_params(desc: ArchDescriptor) -> CostReport:
    """Per-layer parameter counts; FLOP columns are left empty."""
    rows = [CostRow(l.name, l.kind, l.output_shape, layer_params(l), 0, 0) for l in desc.layers]
    return CostReport(desc.label, desc.variant, desc.cra_target, None, rows)


def count_flops(desc: ArchDescriptor, input_shape=None, convention: str = "mac") -> CostReport:
    """Per-layer parameter and FLOP counts, optionally at another input resolution.

    Raises:
        InvalidConventionError: unknown counting convention
        InvalidConfigError: input_shape is not square
    """
    validateparam(
        convention,
        CONVENTIONS,
        InvalidConventionError(f"convention must be one of {', '.join(CONVENTIONS)}, got '{convention}'"),
    )
    if input_shape is not None:
        if isinstance(input_shape, int):
            size = input_shape
        else:
            *_, height, width = input_shape
            if height != width:
                raise InvalidConfigError(f"only square inputs can be analyzed, got {tuple(input_shape)}")
            size = width
        if (size, size) != tuple(desc.input_shape[1:]):
            desc = desc.at_resolution(size)

    rows = []
    for layer in desc.layers:
        flops, elementwise = layer_flops(layer)
        formula = None
        if layer.kind == "cra":
            c, height, width = layer.input_shape
            formula = cra_formula_flops(c, height, width, *layer.params["target"])
            if convention == "paper-cra-additive":
                flops = formula
        rows.append(CostRow(layer.name, layer.kind, layer.output_shape, layer_params(layer), flops, elementwise, formula))
    report = CostReport(desc.label, desc.variant, desc.cra_target, convention, rows)
    logger.debug(f"{desc.label}: {report.params_total} parameters, {report.flops_total} flops ({convention})")
    return report


def emit_table(reports: list, fmt: str = "text", per_layer: bool = False) -> str:
    """Render reports as 'Arch, params, FLOPs' lines, CSV rows or JSON objects."""
    validateparam(fmt, FORMATS, InvalidConfigError(f"format must be one of {', '.join(FORMATS)}, got '{fmt}'"))
    if not reports:
        raise InvalidConfigError("nothing to render: no reports given")

    if fmt == "json":
        payload = []
        for report in reports:
            entry = report.summary()
            entry["convention"] = report.convention
            if report.formula_ratio is not None:
                entry["cra_formula_ratio"] = report.formula_ratio
            entry["per_layer"] = [
                {
                    "name": row.name,
                    "kind": row.kind,
                    "output_shape": list(row.output_shape),
                    "params": row.params,
                    "flops": row.flops,
                    "elementwise": row.elementwise,
                    "formula_flops": row.formula_flops,
                }
                for row in report.rows
            ]
            payload.append(entry)
        return json.dumps(payload, indent=2) + "\n"

    if fmt == "csv":
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=TABLE_FIELDS, lineterminator="\n")
        writer.writeheader()
        for report in reports:
            writer.writerow(report.summary())
        return buffer.getvalue()

    lines = []
    for report in reports:
        summary = report.summary()
        line = f"{report.arch}, {summary['params_display']}"
        if report.convention:
            line += f", {summary['flops_display']}"
        lines.append(line)
        if per_layer:
            for row in report.rows:
                lines.append(f"  {row.name:<32} {row.kind:<18} params={row.params:<10} flops={row.flops}")
    return "\n".join(lines) + "\n"


def ablation_table(
    depths=(50,),
    targets=DEFAULT_TARGETS,
    fmt: str = "text",
    include_baseline: bool = False,
) -> str:
    """Parameter counts of CRA-ResNets across pooled sizes (h, w)."""
    validateparam(fmt, FORMATS, InvalidConfigError(f"format must be one of {', '.join(FORMATS)}, got '{fmt}'"))
    entries = []
    for depth in depths:
        if include_baseline:
            entries.append(count_params(build_resnet(depth, "base")))
        for target in targets:
            entries.append(count_params(build_resnet(depth, "cra", cra_target=tuple(target))))

    if fmt == "text":
        lines = []
        for report in entries:
            label = f"{report.arch}, <{report.target[0]},{report.target[1]}>" if report.target else report.arch
            lines.append(f"{label}, {format_count(report.params_total)}")
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=TABLE_FIELDS[:5], lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for report in entries:
            writer.writerow(report.summary())
        return buffer.getvalue()
    return json.dumps([{k: r.summary()[k] for k in TABLE_FIELDS[:5]} for r in entries], indent=2) + "\n"
