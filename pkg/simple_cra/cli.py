"""Command-line interface: cost analysis, gradient checks, toy training and attention tracing."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .arch import build_resnet, build_toy, default_cra_target
from .attention import extract_attentions
from .cost import DEFAULT_TARGETS, ablation_table, count_flops, emit_table
from .data import load_cifar10, synth_dataset
from .exceptions import CRAError, InvalidConfigError
from .model import load_checkpoint, materialize, save_checkpoint
from .tensor import Tensor, load_tensor
from .train import TrainConfig, gradcheck, train
from .util import parse_pair, validateparam

logger = logging.getLogger("cra")

RESNETS = {"resnet50": 50, "resnet101": 101, "resnet56": 56, "resnet110": 110}
TOYS = ("toy-base", "toy-se", "toy-cra")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
# keys of a train config file that describe the run rather than the optimiser
RUN_KEYS = {
    "model": "toy-cra",
    "variant": "base",
    "hw": None,
    "width": None,
    "num_classes": 4,
    "samples": 512,
    "test_samples": 256,
    "noise": 0.05,
    "data_seed": 0,
    "cifar_dir": None,
    "output": "runs/toy",
    "zero_attention": False,
}


def _pair_arg(text):
    try:
        return parse_pair(text)
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err))


def _targets_arg(text):
    return tuple(_pair_arg(part) for part in text.split(";") if part.strip())


def describe(arch: str, variant: str = "base", hw=None, num_classes=None, input_size=None, width=None):
    """Descriptor for a named architecture; CRA targets default per dataset shape."""
    if arch in TOYS:
        variant = arch.split("-", 1)[1]
        width = width or (16 if variant == "se" else 8)
        return build_toy(
            variant,
            num_classes=num_classes or 4,
            input_size=input_size or 32,
            width=width,
            cra_target=hw or (4, 4),
        )
    if arch not in RESNETS:
        raise InvalidConfigError(f"unknown architecture '{arch}'")
    depth = RESNETS[arch]
    if variant == "cra" and hw is None:
        hw = default_cra_target("imagenet-shape" if depth in (50, 101) else "cifar-shape")
    return build_resnet(depth, variant, num_classes=num_classes, cra_target=hw, input_size=input_size)


def cmd_analyze(args) -> int:
    desc = describe(args.arch, args.variant, args.hw, args.num_classes, args.input_size)
    report = count_flops(desc, convention=args.convention)
    sys.stdout.write(emit_table([report], args.format, per_layer=args.per_layer))
    if report.formula_ratio is not None:
        logger.info(f"CRA closed-form / direct op count: {report.formula_ratio:.3f}")
    return 0


def cmd_ablation(args) -> int:
    sys.stdout.write(
        ablation_table((RESNETS[args.arch],), args.targets, args.format, include_baseline=args.baseline)
    )
    return 0


def cmd_gradcheck(args) -> int:
    variant = args.model.split("-", 1)[1]
    desc = build_toy(variant, num_classes=4, input_size=8, width=16 if variant == "se" else 4, pool=2)
    model = materialize(desc, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    x = Tensor(rng.uniform(0.0, 1.0, size=(4,) + desc.input_shape))
    report = gradcheck(model, x, np.arange(4) % 4, args.tol, args.samples, args.step, args.seed)
    for name, err in report.errors.items():
        logger.info(f"{name:<32} {err:.3e}")
    if not report.passed:
        logger.error(f"gradcheck failed for: {', '.join(report.failures)}")
        return 1
    logger.info(f"gradcheck passed ({len(report.errors)} tensors, tol {args.tol:g})")
    return 0


def cmd_train(args) -> int:
    settings = json.loads(Path(args.config).read_text())
    run = {key: settings.pop(key, default) for key, default in RUN_KEYS.items()}
    config = TrainConfig.from_dict(settings)
    output = Path(args.out or run["output"])

    if run["cifar_dir"]:
        train_set, test_set = load_cifar10(run["cifar_dir"])
        num_classes = train_set.num_classes
    else:
        num_classes = run["num_classes"]
        train_set = synth_dataset(run["samples"], num_classes, seed=run["data_seed"], noise=run["noise"])
        test_set = synth_dataset(
            run["test_samples"], num_classes, seed=run["data_seed"] + 1, noise=run["noise"], split="test"
        )
    hw = tuple(run["hw"]) if run["hw"] else None
    desc = describe(run["model"], run["variant"], hw, num_classes, width=run["width"])
    model = materialize(desc, seed=config.seed, zero_attention=run["zero_attention"])
    history = train(model, train_set, test_set, config, checkpoint_dir=output, resume=args.resume)
    last = history.rows[-1]
    logger.info(f"finished: train err {last['train_err']:.4f}, test err {last['test_err']:.4f}; written to {output}")
    return 0


def cmd_attentions(args) -> int:
    model = load_checkpoint(args.checkpoint)
    images = load_tensor(args.input)
    if images.ndim == 4:
        if not 0 <= args.index < images.shape[0]:
            raise InvalidConfigError(f"--index {args.index} outside a batch of {images.shape[0]}")
        images = Tensor(images.data[args.index : args.index + 1])
    trace = extract_attentions(model, images)
    text = trace.to_csv() if args.format == "csv" else trace.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
        logger.info(f"{len(trace)} attention sites written to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_export_desc(args) -> int:
    desc = describe(args.arch, args.variant, args.hw, args.num_classes, args.input_size)
    if args.out:
        Path(args.out).write_text(desc.to_json())
    else:
        sys.stdout.write(desc.to_json())
    if args.checkpoint:
        model = materialize(desc, seed=args.seed, zero_attention=args.zero_attention)
        save_checkpoint(model, args.checkpoint, seed=args.seed)
        logger.info(f"initialised checkpoint for {desc.label} written to {args.checkpoint}")
    return 0


def _arch_flags(parser, archs):
    parser.add_argument("--arch", choices=archs, required=True, help="Network to describe.")
    parser.add_argument("--variant", choices=("base", "se", "cra"), default="base", help="Attention variant.")
    parser.add_argument("--hw", type=_pair_arg, help="CRA pooled size as H,W. Defaults to 7,7 (ImageNet) or 8,8 (CIFAR).")
    parser.add_argument("--input-size", type=int, help="Square input resolution.")
    parser.add_argument("--num-classes", type=int, help="Classifier width.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simple-cra",
        description="Channel reassessment attention: cost analysis, gradient checks and desk-scale training.",
    )
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="Parameter and FLOP report for one network.")
    _arch_flags(p, list(RESNETS) + list(TOYS))
    p.add_argument("--convention", choices=("mac", "paper-cra-additive"), default="mac", help="FLOP counting convention.")
    p.add_argument("--format", choices=("text", "csv", "json"), default="text")
    p.add_argument("--per-layer", action="store_true", help="List every layer in text output.")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablation", help="CRA parameter counts across pooled sizes.")
    p.add_argument("--arch", choices=("resnet50", "resnet101"), default="resnet50")
    p.add_argument("--targets", type=_targets_arg, default=DEFAULT_TARGETS, help="Semicolon-separated H,W pairs.")
    p.add_argument("--format", choices=("text", "csv", "json"), default="text")
    p.add_argument("--baseline", action="store_true", help="Add the network without attention.")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("gradcheck", help="Backprop vs finite differences on a toy network.")
    p.add_argument("--model", choices=("toy-cra", "toy-se"), default="toy-cra")
    p.add_argument("--tol", type=float, default=1e-3, help="Maximum relative error.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=20, help="Coordinates checked per tensor.")
    p.add_argument("--step", type=float, default=1e-3, help="Finite-difference step.")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="Train from a JSON config.")
    p.add_argument("--config", required=True, help="JSON file with TrainConfig fields and run settings.")
    p.add_argument("--out", help="Checkpoint directory, overrides 'output' in the config.")
    p.add_argument("--resume", action="store_true", help="Continue from <out>/last.")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attentions", help="Trace CRA attentions for one image.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="Tensor file holding [C,H,W] or [N,C,H,W] images.")
    p.add_argument("--index", type=int, default=0, help="Image to trace when the input is a batch.")
    p.add_argument("--out", help="Output file, stdout when omitted.")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_attentions)

    p = sub.add_parser("export-desc", help="Write a descriptor JSON, optionally with an initialised checkpoint.")
    _arch_flags(p, list(RESNETS) + list(TOYS))
    p.add_argument("--out", help="Descriptor file, stdout when omitted.")
    p.add_argument("--checkpoint", help="Also write a freshly initialised checkpoint here.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero-attention", action="store_true", help="Start CRA/SE parameters at zero.")
    p.set_defaults(func=cmd_export_desc)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    ch = logging.StreamHandler()
    ch.setLevel(logging.DEBUG)
    logger.addHandler(ch)

    try:
        level = (os.environ.get("CRA_LOG_LEVEL") or ("DEBUG" if args.verbose else "INFO")).upper()
        validateparam(
            level,
            LOG_LEVELS,
            InvalidConfigError(f"CRA_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}, got '{level}'"),
        )
        logger.setLevel(level)
        return args.func(args)
    except (CRAError, OSError, json.JSONDecodeError) as e:
        logger.error(f"Error: {e}")
        return 2
    finally:
        logger.removeHandler(ch)
