"""Dense tensors and a tape-based reverse-mode autodiff engine.

Ops append one node per call to the active `ComputationGraph`; `backward`
walks the tape in reverse and applies the rule registered for each node's
op tag in `BACKWARD_RULES`.
"""

import logging
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    DetachedTensorError,
    InvalidConfigError,
    InvalidShapeError,
    NonScalarLossError,
    NumericOverflowError,
    SizeMismatchError,
)
from .util import validateparam

logger = logging.getLogger("cra")

DTYPE = np.float32
MAGIC = b"CRAT"
FORMAT_VERSION = 1

# op tag -> fn(grad_out, saved) returning one gradient (or None) per recorded input
BACKWARD_RULES = {}

_state = threading.local()


def register_backward(tag: str):
    """Decorator registering the backward rule for an op tag."""

    def wrap(fn):
        BACKWARD_RULES[tag] = fn
        return fn

    return wrap


class Tensor:
    """Dense row-major array with an optional gradient buffer.

    float32 is the working precision. float64 data is kept as-is so the
    finite-difference oracle can evaluate the same ops in double precision.
    """

    def __init__(self, data, grad: np.ndarray = None):
        data = np.asarray(data)
        if data.dtype != np.float64:
            data = data.astype(DTYPE, copy=False)
        self.data = np.ascontiguousarray(data)
        self.grad = grad
        self.node_id = None
        self._graph = None

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise SizeMismatchError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        """Detached copy in another precision."""
        return Tensor(self.data.astype(dtype))

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


@dataclass
class Node:
    op: str
    inputs: tuple
    saved: dict = field(default_factory=dict)
    leaf: Tensor = None


class ComputationGraph:
    """Append-only tape of recorded ops.

    Use as a context manager to make the graph active for the current thread.
    In "inference" mode ops run without appending nodes or saving activations.
    """

    def __init__(self, mode: str = "recording"):
        validateparam(
            mode,
            ("recording", "inference"),
            InvalidConfigError(f"graph mode must be 'recording' or 'inference', got '{mode}'"),
        )
        self.mode = mode
        self.nodes = []
        self._leaves = {}

    @property
    def recording(self) -> bool:
        return self.mode == "recording"

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def track(self, tensor: Tensor) -> int:
        """Node id of `tensor`, registering it as a leaf on first use."""
        if tensor._graph is self:
            return tensor.node_id
        key = id(tensor)
        if key not in self._leaves:
            self.nodes.append(Node("leaf", (), leaf=tensor))
            self._leaves[key] = len(self.nodes) - 1
        return self._leaves[key]

    def record(self, op: str, inputs, output: Tensor, saved: dict):
        input_ids = tuple(self.track(t) for t in inputs)
        self.nodes.append(Node(op, input_ids, saved))
        output.node_id = len(self.nodes) - 1
        output._graph = self


def current_graph():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def inference():
    """Context manager: run ops without recording."""
    return ComputationGraph(mode="inference")


def record_op(op: str, inputs, out_data: np.ndarray, saved: dict = None) -> Tensor:
    """Wrap `out_data` in a Tensor and record it on the active graph."""
    out = Tensor(out_data)
    graph = current_graph()
    if graph is not None and graph.recording:
        graph.record(op, inputs, out, saved or {})
    return out


def tensor_create(shape, values) -> Tensor:
    """Build a Tensor from a dimension list and a flat row-major value sequence.

    Raises:
        InvalidShapeError: a dimension is zero, negative or not an integer
        SizeMismatchError: product(shape) != len(values)
    """
    shape = tuple(shape)
    for dim in shape:
        if isinstance(dim, bool) or not isinstance(dim, (int, np.integer)) or dim < 1:
            raise InvalidShapeError(f"dimensions must be positive integers, got {shape}")
    values = np.asarray(values, dtype=DTYPE).reshape(-1)
    expected = int(np.prod(shape)) if shape else 1
    if values.size != expected:
        raise SizeMismatchError(
            f"shape {shape} holds {expected} elements but {values.size} values were given"
        )
    return Tensor(values.reshape(shape))


def backward(graph: ComputationGraph, loss: Tensor) -> dict:
    """Reverse-mode sweep from `loss`.

    Every leaf reached gets its `.grad` set; the return value maps node id to
    gradient for every reached node. Contributions from several consumers are
    summed.

    Raises:
        DetachedTensorError: loss was not produced by an op recorded in `graph`
        NonScalarLossError: loss has more than one element
    """
    if loss._graph is not graph or loss.node_id is None:
        raise DetachedTensorError("loss is not recorded in this graph")
    if loss.size != 1:
        raise NonScalarLossError(f"loss must be a single element, shape is {loss.shape}")

    grads = {loss.node_id: np.ones_like(loss.data)}
    for node_id in range(loss.node_id, -1, -1):
        grad = grads.get(node_id)
        if grad is None:
            continue
        node = graph.nodes[node_id]
        if node.op == "leaf":
            node.leaf.grad = grad.astype(node.leaf.dtype, copy=False)
            continue
        input_grads = BACKWARD_RULES[node.op](grad, node.saved)
        for input_id, input_grad in zip(node.inputs, input_grads):
            if input_grad is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + input_grad
            else:
                grads[input_id] = input_grad
    return grads


def _check_same_shape(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise SizeMismatchError(f"shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    return record_op("add", (a, b), a.data + b.data)


@register_backward("add")
def _add_backward(grad, saved):
    return grad, grad


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    return record_op("mul", (a, b), a.data * b.data, {"a": a.data, "b": b.data})


@register_backward("mul")
def _mul_backward(grad, saved):
    return grad * saved["b"], grad * saved["a"]


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all elements as a one-element tensor."""
    return record_op("sum", (a,), np.sum(a.data).reshape(1), {"shape": a.shape})


@register_backward("sum")
def _sum_backward(grad, saved):
    return (np.broadcast_to(grad.reshape(()), saved["shape"]).copy(),)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise SizeMismatchError(f"cannot reshape {a.shape} into {shape}")
    return record_op("reshape", (a,), a.data.reshape(shape), {"shape": a.shape})


@register_backward("reshape")
def _reshape_backward(grad, saved):
    return (grad.reshape(saved["shape"]),)


def _as_scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(np.asarray(value).reshape(-1)[0])


def finite_diff_grad(f, x: Tensor, step: float = 1e-3, indices=None) -> np.ndarray:
    """Central-difference gradient of scalar-valued `f` at `x`, in float64.

    Args:
        f (callable): takes one Tensor, returns a one-element Tensor or float
        x (Tensor): evaluation point
        step (float): perturbation size
        indices (sequence, optional): flat coordinates to estimate; all of them when omitted

    Returns:
        np.ndarray: gradient shaped like `x`, or one value per index when `indices` is given

    Raises:
        NumericOverflowError: f returned a non-finite value
    """
    if step <= 0:
        raise ValueError("'step' must be positive")
    work = x.data.astype(np.float64)
    coords = range(work.size) if indices is None else indices
    estimates = np.zeros(len(coords), dtype=np.float64)

    with inference():
        for k, idx in enumerate(coords):
            original = work.flat[idx]
            work.flat[idx] = original + step
            f_plus = _as_scalar(f(Tensor(work)))
            work.flat[idx] = original - step
            f_minus = _as_scalar(f(Tensor(work)))
            work.flat[idx] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericOverflowError(f"non-finite function value at coordinate {idx}")
            estimates[k] = (f_plus - f_minus) / (2.0 * step)

    if indices is None:
        return estimates.reshape(x.shape)
    return estimates


def save_tensor(path, tensor: Tensor):
    """Write `tensor` as: 'CRAT', version u32, rank u32, dims u32..., float32 payload (little-endian)."""
    header = struct.pack("<4sII", MAGIC, FORMAT_VERSION, tensor.ndim)
    dims = struct.pack(f"<{tensor.ndim}I", *tensor.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(tensor.data.astype("<f4").tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise InvalidConfigError(f"{path} is too short to be a tensor file")
    magic, version, rank = struct.unpack_from("<4sII", blob, 0)
    if magic != MAGIC:
        raise InvalidConfigError(f"{path} is not a tensor file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise InvalidConfigError(f"{path} has unsupported tensor format version {version}")
    offset = 12 + 4 * rank
    if len(blob) < offset:
        raise SizeMismatchError(f"{path} header is truncated")
    shape = struct.unpack_from(f"<{rank}I", blob, 12)
    count = int(np.prod(shape)) if rank else 1
    payload = blob[offset:]
    if len(payload) != 4 * count:
        raise SizeMismatchError(
            f"{path} holds {len(payload)} payload bytes, shape {shape} needs {4 * count}"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(shape)
    return Tensor(data)
