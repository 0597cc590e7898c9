"""SGD training loop, learning-rate schedules, checkpoint/resume and gradient checks."""

import csv
import json
import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from tqdm import tqdm

from .data import LabeledDataset, augment, channel_stats, normalize
from .exceptions import DivergedTrainingError, InvalidConfigError
from .model import Model, load_tensors, restore, save_checkpoint, save_tensors
from .ops import softmax_cross_entropy
from .tensor import ComputationGraph, Tensor, backward, finite_diff_grad, inference
from .util import num_threads, relative_error

logger = logging.getLogger("cra")

HISTORY_FIELDS = ["epoch", "train_loss", "train_err", "test_err", "lr"]


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 300
    lr_milestones: tuple = (150, 225)
    lr_decay: float = 0.1
    lr_step: int = None
    seed: int = 0
    deterministic: bool = True
    augment: bool = True
    frozen: tuple = ()
    workers: int = None
    progress: bool = False

    def __post_init__(self):
        self.lr_milestones = tuple(self.lr_milestones)
        self.frozen = tuple(self.frozen)
        if self.lr <= 0:
            raise InvalidConfigError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidConfigError("momentum must lie in [0, 1)")
        if not 0 < self.lr_decay < 1:
            raise InvalidConfigError("lr_decay must lie in (0, 1)")
        if self.weight_decay < 0:
            raise InvalidConfigError("weight_decay must not be negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidConfigError("batch_size and epochs must be positive")
        if self.lr_step is not None and self.lr_step < 1:
            raise InvalidConfigError("lr_step must be positive")

    @classmethod
    def cifar(cls, **overrides) -> "TrainConfig":
        return cls(**{"lr": 0.1, "batch_size": 64, "epochs": 300, "lr_milestones": (150, 225), **overrides})

    @classmethod
    def imagenet(cls, **overrides) -> "TrainConfig":
        settings = {"lr": 0.1, "batch_size": 256, "epochs": 100, "lr_milestones": (), "lr_step": 30}
        return cls(**{**settings, **overrides})

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidConfigError(f"unknown training settings: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch."""
        if self.lr_step is not None:
            decays = epoch // self.lr_step
        else:
            decays = sum(1 for milestone in self.lr_milestones if epoch >= milestone)
        return self.lr * self.lr_decay**decays


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)

    def append(self, epoch, train_loss, train_err, test_err, lr, seconds):
        self.rows.append(
            {
                "epoch": epoch,
                "train_loss": float(train_loss),
                "train_err": float(train_err),
                "test_err": float(test_err),
                "lr": float(lr),
                "seconds": float(seconds),
            }
        )

    def __len__(self):
        return len(self.rows)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(self.rows)


def sgd_step(params: dict, grads: dict, state: dict, config: TrainConfig, lr: float = None, decay=()):
    """One momentum-SGD update in place: v = mu*v + g + wd*p (wd on `decay` names only); p -= lr*v.

    Raises:
        DivergedTrainingError: a gradient holds NaN or infinity
    """
    lr = config.lr if lr is None else lr
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            raise DivergedTrainingError(f"non-finite gradient for {name}", parameter=name)
        step = grad.astype(param.dtype, copy=True)
        if name in decay and config.weight_decay:
            step += param.dtype.type(config.weight_decay) * param.data
        velocity = state.get(name)
        if velocity is not None:
            step += param.dtype.type(config.momentum) * velocity
        state[name] = step
        param.data -= param.dtype.type(lr) * step
    return state


def _batches(dataset: LabeledDataset, order, seeds, batch_size, policy, workers):
    """Yield (images, labels) per batch, loading ahead on a thread pool; batch i uses seeds[i]."""
    slices = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]

    def load(i):
        idx = slices[i]
        images = dataset.images.data[idx]
        if policy:
            images = augment(images, np.random.default_rng(seeds[i]), policy)
        return images, dataset.labels[idx]

    if workers <= 1:
        for i in range(len(slices)):
            yield load(i)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        for i in range(len(slices)):
            pending.append(pool.submit(load, i))
            if len(pending) > 2 * workers:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def evaluate(model: Model, dataset: LabeledDataset, mean=None, std=None, batch_size: int = 256) -> float:
    """Top-1 error of `model` over `dataset` with BN in inference mode."""
    if mean is None:
        mean, std = dataset.mean, dataset.std
    wrong = 0
    with inference():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images.data[start : start + batch_size]
            logits = model.forward(Tensor(normalize(images, mean, std)), training=False)
            wrong += int(np.sum(logits.data.argmax(axis=1) != dataset.labels[start : start + batch_size]))
    return wrong / max(len(dataset), 1)


def _save_train_state(directory: Path, epoch, rng, state, history):
    save_tensors(directory / "momentum", state)
    rows = [{k: v for k, v in row.items() if k != "seconds"} for row in history.rows]
    payload = {"epoch": epoch, "rng": rng.bit_generator.state, "momentum": list(state), "history": rows}
    (directory / "train_state.json").write_text(json.dumps(payload, indent=2) + "\n")


def _load_train_state(directory: Path, model: Model):
    restore(model, directory)
    payload = json.loads((directory / "train_state.json").read_text())
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng"]
    state = {name: t.data for name, t in load_tensors(directory / "momentum", payload["momentum"]).items()}
    return payload["epoch"] + 1, rng, state, TrainHistory(payload["history"])


def train(
    model: Model,
    train_set: LabeledDataset,
    test_set: LabeledDataset,
    config: TrainConfig,
    checkpoint_dir=None,
    resume: bool = False,
) -> TrainHistory:
    """Train `model` in place with momentum SGD and cross-entropy.

    After every epoch the full state goes to `checkpoint_dir`/last and the
    lowest-test-error model to `checkpoint_dir`/best. With `resume` the run
    continues from `checkpoint_dir`/last, reproducing the uninterrupted run.

    Raises:
        DivergedTrainingError: the loss or a gradient became non-finite
    """
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if resume and checkpoint_dir is None:
        raise InvalidConfigError("resume needs a checkpoint directory")

    if train_set.mean is None:
        train_set.mean, train_set.std = channel_stats(train_set.images)
    mean, std = train_set.mean, train_set.std
    frozen = [name for name in model.params if name.startswith(config.frozen)] if config.frozen else []
    trainable = {name: p for name, p in model.params.items() if name not in frozen}
    decay = model.decay_names() - set(frozen)
    policy = ("pad4-crop32", "horizontal-flip") if config.augment else ()
    workers = 1 if config.deterministic and config.workers is None else (config.workers or num_threads())

    rng = np.random.default_rng(config.seed)
    state, history, start_epoch = {}, TrainHistory(), 0
    if resume:
        start_epoch, rng, state, history = _load_train_state(checkpoint_dir / "last", model)
        logger.info(f"resuming {model.desc.label} at epoch {start_epoch}")
    best = min((row["test_err"] for row in history.rows), default=float("inf"))

    for epoch in tqdm(range(start_epoch, config.epochs), desc="epochs", disable=not config.progress):
        lr = config.lr_at(epoch)
        started = time.perf_counter()
        order = rng.permutation(len(train_set))
        seeds = rng.integers(0, 2**63 - 1, size=-(-len(order) // config.batch_size))
        total_loss, wrong = 0.0, 0

        for images, labels in _batches(train_set, order, seeds, config.batch_size, policy, workers):
            for param in model.params.values():
                param.grad = None
            with ComputationGraph() as graph:
                logits = model.forward(Tensor(normalize(images, mean, std)), training=True)
                loss = softmax_cross_entropy(logits, labels)
                backward(graph, loss)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergedTrainingError(f"loss became {value} at epoch {epoch}", epoch=epoch)
            grads = {name: p.grad for name, p in trainable.items()}
            try:
                sgd_step(trainable, grads, state, config, lr=lr, decay=decay)
            except DivergedTrainingError as err:
                raise DivergedTrainingError(f"{err} at epoch {epoch}", epoch=epoch, parameter=err.parameter) from err
            total_loss += value * len(labels)
            wrong += int(np.sum(logits.data.argmax(axis=1) != labels))

        test_err = evaluate(model, test_set, mean, std)
        seen = len(train_set)
        history.append(epoch, total_loss / seen, wrong / seen, test_err, lr, time.perf_counter() - started)
        logger.info(
            f"epoch {epoch}: loss {total_loss / seen:.4f} train err {wrong / seen:.4f} test err {test_err:.4f} lr {lr:g}"
        )

        if checkpoint_dir is not None:
            last = save_checkpoint(model, checkpoint_dir / "last", seed=config.seed)
            _save_train_state(last, epoch, rng, state, history)
            if test_err < best:
                best = test_err
                save_checkpoint(model, checkpoint_dir / "best", seed=config.seed)
            history.write_csv(checkpoint_dir / "history.csv")
    return history


@dataclass
class GradcheckReport:
    errors: dict
    tolerance: float
    # coordinates passed over because a +-step move flips a ReLU or max-pool decision
    skipped: dict = field(default_factory=dict)

    @property
    def failures(self) -> list:
        return [name for name, err in self.errors.items() if not err < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> tuple:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def _branch_pattern(f, data: np.ndarray) -> list:
    """ReLU masks and max-pool winners chosen while evaluating `f` at `data`."""
    with ComputationGraph() as graph:
        f(Tensor(data))
    return [
        node.saved["mask"] if node.op == "relu" else node.saved["argmax"]
        for node in graph.nodes
        if node.op in ("relu", "max_pool")
    ]


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def smooth_coordinates(f, target: Tensor, step: float, count: int, rng) -> tuple:
    """Up to `count` random flat coordinates of `target` where f is smooth over [-step, +step].

    A coordinate qualifies when neither perturbation changes any ReLU mask or
    max-pool winner. Returns (coordinates, number skipped).
    """
    work = target.data.astype(np.float64)
    base = _branch_pattern(f, work)
    picks, skipped = [], 0
    for idx in rng.permutation(target.size):
        original = work.flat[idx]
        smooth = True
        for delta in (step, -step):
            work.flat[idx] = original + delta
            if not _same_pattern(_branch_pattern(f, work), base):
                smooth = False
                break
        work.flat[idx] = original
        if not smooth:
            skipped += 1
            continue
        picks.append(int(idx))
        if len(picks) == count:
            break
    return np.asarray(picks, dtype=np.int64), skipped


def gradcheck(
    model: Model,
    x: Tensor,
    labels,
    tolerance: float = 1e-3,
    sample_count: int = 20,
    step: float = 1e-3,
    seed: int = 0,
) -> GradcheckReport:
    """Compare backpropagated gradients of the cross-entropy loss with central differences.

    Runs on a float64 copy of `model`, BN in training mode without touching
    running statistics. Up to `sample_count` coordinates of the input and of
    every parameter tensor are checked, drawn only where the loss is smooth
    within one step (see `smooth_coordinates`).
    """
    shadow = model.astype(np.float64)
    x64 = Tensor(x.data.astype(np.float64))
    labels = np.asarray(labels)

    def loss_at(inp):
        return softmax_cross_entropy(shadow.forward(inp, training=True, update_stats=False), labels)

    with ComputationGraph() as graph:
        backward(graph, loss_at(x64))
    analytic = {"input": x64.grad}
    analytic.update({name: p.grad for name, p in shadow.params.items()})

    rng = np.random.default_rng(seed)
    errors, skipped = {}, {}
    for name in analytic:
        target = x64 if name == "input" else shadow.params[name]

        def f(t, name=name, target=target):
            if name == "input":
                return loss_at(t)
            shadow.params[name] = t
            try:
                return loss_at(x64)
            finally:
                shadow.params[name] = target

        picks, skipped[name] = smooth_coordinates(f, target, step, min(sample_count, target.size), rng)
        if not picks.size:
            logger.warning(f"gradcheck {name}: every coordinate sits within {step:g} of a kink, not checked")
            continue
        numeric = finite_diff_grad(f, target, step=step, indices=picks)
        errors[name] = float(relative_error(analytic[name].reshape(-1)[picks], numeric).max())
        logger.debug(f"gradcheck {name}: {picks.size} coordinates, {skipped[name]} skipped near kinks")
    report = GradcheckReport(errors, tolerance, skipped)
    logger.info(f"gradcheck {model.desc.label}: worst {report.worst[0]} at {report.worst[1]:.2e}")
    return report
