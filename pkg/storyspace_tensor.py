"""
Storyspace - Tensors and the Reverse-Mode Tape

The numerical substrate for every layer:
- Tensor: a dense numpy array plus gradient bookkeeping
- Tape: define-by-run record of differentiable operations
- Ops: matmul, add/sub/mul, activations, softmax, concat, stack,
  row selection, row masking, cross-entropy
- Gradient checking against central finite differences

A tape is rebuilt for every forward pass and may be walked backward once:

    with Tape() as tape:
        loss = cross_entropy(matmul(x, w), targets)
    tape.backward(loss)
    grad_w = tape.gradient(w)

Precision is a global run mode ("f64" for gradient checks and fixtures,
"f32" for throughput); a tape never mixes the two.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from storyspace_inputs import ConfigError


SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

ACTIVATIONS = ("relu", "selu", "tanh", "sigmoid")


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(ValueError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a tape (second backward, foreign loss, mixed precision)."""


class DegenerateBatchError(ValueError):
    """Every target position of a loss is padding."""


# ============================================================================
# PRECISION
# ============================================================================

PRECISIONS = {"f64": np.float64, "f32": np.float32}
_RUN_MODE = {"precision": "f64"}


def set_precision(mode: str) -> None:
    if mode not in PRECISIONS:
        raise ConfigError(f"unknown precision '{mode}' (choose from f32, f64)")
    _RUN_MODE["precision"] = mode


def get_precision() -> str:
    return _RUN_MODE["precision"]


def get_dtype() -> np.dtype:
    return np.dtype(PRECISIONS[_RUN_MODE["precision"]])


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the global precision."""
    previous = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


def _check_finite(data: np.ndarray, where: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{where} produced non-finite values")


# ============================================================================
# TENSOR
# ============================================================================

class Tensor:
    """Dense real tensor. `data` is row-major numpy storage of the run dtype."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=get_dtype())
        if any(extent <= 0 for extent in array.shape):
            raise ShapeError(f"tensor extents must be positive, got {array.shape}")
        _check_finite(array, "tensor construction")
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _from_op(cls, data: np.ndarray) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = data
        tensor.requires_grad = False
        tensor.name = None
        tensor.node_id = None
        tensor._tape = None
        return tensor

    @staticmethod
    def zeros(shape: Sequence[int]) -> "Tensor":
        return Tensor(np.zeros(tuple(shape)))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype} requires_grad={self.requires_grad}>"

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)


TensorLike = Union[Tensor, np.ndarray, float, int]


def _as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# ============================================================================
# TAPE
# ============================================================================

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "storyspace_active_tape", default=None
)


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Optional[int], ...]   # None for inputs that do not need gradients
    backward: Optional[BackwardFn]      # None for leaves
    shape: Tuple[int, ...]


class Tape:
    """
    Reverse-accumulation record. Nodes are appended in execution order, so
    every node's inputs precede it. A tape is confined to one worker and is
    consumed by a single backward() call.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.gradients: Dict[int, Tensor] = {}
        self.dtype = get_dtype()
        self._leaf_ids: Dict[int, int] = {}
        self._leaves: List[Tensor] = []   # keeps id() keys alive
        self._consumed = False
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("tape already consumed; run a fresh forward pass")
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> bool:
        _ACTIVE_TAPE.reset(self._tokens.pop())
        return False

    @property
    def consumed(self) -> bool:
        return self._consumed

    def node_of(self, tensor: Tensor) -> Optional[int]:
        if tensor._tape is self:
            return tensor.node_id
        return self._leaf_ids.get(id(tensor))

    def watch(self, tensor: Tensor) -> int:
        """Register a leaf (typically a parameter) and return its node id."""
        node_id = self.node_of(tensor)
        if node_id is not None:
            return node_id
        if tensor.dtype != self.dtype:
            raise TapeError(f"precision mismatch: tape is {self.dtype}, tensor is {tensor.dtype}")
        node_id = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), None, tensor.shape))
        self._leaf_ids[id(tensor)] = node_id
        self._leaves.append(tensor)
        return node_id

    def _participates(self, tensor: Tensor) -> bool:
        return tensor._tape is self or tensor.requires_grad

    def record(self, op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        if self._consumed:
            raise TapeError("tape already consumed; run a fresh forward pass")
        out = Tensor._from_op(data)
        if not any(self._participates(t) for t in inputs):
            return out
        if data.dtype != self.dtype:
            raise TapeError(f"precision mismatch in {op}: tape is {self.dtype}, result is {data.dtype}")
        ids = tuple(self.watch(t) if self._participates(t) else None for t in inputs)
        out.node_id = len(self.nodes)
        out._tape = self
        out.requires_grad = True
        self.nodes.append(TapeNode(op, ids, backward, data.shape))
        return out

    def backward(self, loss: Tensor) -> Dict[int, Tensor]:
        """Accumulate d(loss)/d(node) for every node in reverse order."""
        if self._consumed:
            raise TapeError("backward already ran on this tape; run a fresh forward pass")
        if loss.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise TapeError("loss was not produced on this tape")
        self._consumed = True

        grads: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones(loss.shape, dtype=self.dtype)
        for node_id in range(loss.node_id, -1, -1):
            upstream = grads[node_id]
            node = self.nodes[node_id]
            if upstream is None or node.backward is None:
                continue
            for source, grad in zip(node.inputs, node.backward(upstream)):
                if source is None or grad is None:
                    continue
                grads[source] = grad if grads[source] is None else grads[source] + grad

        self.gradients = {node_id: Tensor._from_op(g) for node_id, g in enumerate(grads) if g is not None}
        return self.gradients

    def gradient(self, tensor: Tensor) -> Optional[Tensor]:
        """Gradient of the loss w.r.t. `tensor`; zeros if it was recorded but unreachable."""
        node_id = self.node_of(tensor)
        if node_id is None:
            return None
        grad = self.gradients.get(node_id)
        if grad is None and self._consumed:
            return Tensor._from_op(np.zeros(tensor.shape, dtype=self.dtype))
        return grad


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Evaluate without recording, even inside an outer tape."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def backward(tape: Tape, loss: Tensor) -> Dict[int, Tensor]:
    return tape.backward(loss)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    data = np.asarray(data)
    _check_finite(data, op)
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return Tensor._from_op(data)
    return tape.record(op, data, inputs, backward_fn)


# ============================================================================
# ELEMENTWISE
# ============================================================================

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_pair(a: TensorLike, b: TensorLike, op: str) -> Tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _broadcast_pair(a, b, "add")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), backward_fn)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _broadcast_pair(a, b, "sub")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), backward_fn)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _broadcast_pair(a, b, "mul")

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), backward_fn)


def activation(kind: str, x: TensorLike) -> Tensor:
    """Elementwise relu / selu / tanh / sigmoid."""
    x = _as_tensor(x)
    d = x.data
    if kind == "relu":
        out = np.maximum(d, 0)
        slope = (d > 0).astype(d.dtype)
    elif kind == "tanh":
        out = np.tanh(d)
        slope = 1 - out * out
    elif kind == "sigmoid":
        # tanh form never overflows
        out = 0.5 * (1.0 + np.tanh(0.5 * d))
        slope = out * (1 - out)
    elif kind == "selu":
        negative = SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(d, 0))
        out = np.where(d > 0, SELU_LAMBDA * d, negative).astype(d.dtype, copy=False)
        slope = np.where(d > 0, SELU_LAMBDA, negative + SELU_LAMBDA * SELU_ALPHA).astype(d.dtype, copy=False)
    else:
        raise ConfigError(f"unknown activation '{kind}' (choose from {', '.join(ACTIVATIONS)})")

    def backward_fn(g):
        return (g * slope,)

    return _emit(kind, out, (x,), backward_fn)


def relu(x: TensorLike) -> Tensor:
    return activation("relu", x)


def selu(x: TensorLike) -> Tensor:
    return activation("selu", x)


def tanh(x: TensorLike) -> Tensor:
    return activation("tanh", x)


def sigmoid(x: TensorLike) -> Tensor:
    return activation("sigmoid", x)


# ============================================================================
# LINEAR ALGEBRA & SHAPE
# ============================================================================

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product for rank-1/rank-2 operands (vectors act as rows or columns)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul needs rank-1 or rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def backward_fn(g):
        a2 = a.data if a.ndim == 2 else a.data[None, :]
        b2 = b.data if b.ndim == 2 else b.data[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return _emit("matmul", a.data @ b.data, (a, b), backward_fn)


def transpose(x: TensorLike) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {x.shape}")

    def backward_fn(g):
        return (g.T,)

    return _emit("transpose", x.data.T.copy(), (x,), backward_fn)


def _normalise_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    """Softmax along `axis`, shifted by the per-slice max."""
    x = _as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    axis = _normalise_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), backward_fn)


def concat(parts: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    ndim = parts[0].ndim
    if ndim == 0:
        raise ShapeError("concat cannot join scalars")
    axis = _normalise_axis(axis, ndim)
    reference = parts[0].shape
    for part in parts:
        if part.ndim != ndim or any(part.shape[i] != reference[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat extents differ off axis {axis}: {[p.shape for p in parts]}")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", np.concatenate([p.data for p in parts], axis=axis), parts, backward_fn)


def stack(parts: Sequence[TensorLike]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("stack needs at least one tensor")
    if any(p.shape != parts[0].shape for p in parts):
        raise ShapeError(f"stack needs equal shapes, got {[p.shape for p in parts]}")

    def backward_fn(g):
        return tuple(g[i] for i in range(len(parts)))

    return _emit("stack", np.stack([p.data for p in parts], axis=0), parts, backward_fn)


def take(x: TensorLike, index: int) -> Tensor:
    """Row `index` of x along the leading axis."""
    x = _as_tensor(x)
    if x.ndim == 0 or not 0 <= index < x.shape[0]:
        raise ShapeError(f"row {index} out of range for shape {x.shape}")

    def backward_fn(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _emit("take", np.array(x.data[index], copy=True), (x,), backward_fn)


def sum_all(x: TensorLike) -> Tensor:
    x = _as_tensor(x)

    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward_fn)


def mask_rows(x: TensorLike, keep: Sequence[bool]) -> Tensor:
    """Zero the rows where keep is False; kept rows pass through untouched."""
    x = _as_tensor(x)
    keep = np.asarray(keep, dtype=bool)
    if x.ndim != 2 or keep.shape != (x.shape[0],):
        raise ShapeError(f"mask of shape {keep.shape} does not fit rows of {x.shape}")
    select = keep[:, None]

    def backward_fn(g):
        return (np.where(select, g, 0).astype(g.dtype, copy=False),)

    out = np.where(select, x.data, 0).astype(x.dtype, copy=False)
    return _emit("mask_rows", out, (x,), backward_fn)


# ============================================================================
# LOSS
# ============================================================================

def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    """Untracked log-softmax over the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: TensorLike, targets: Sequence[int], pad_mask: Optional[Sequence[bool]] = None) -> Tensor:
    """
    Mean token cross-entropy over non-pad positions.

    Args:
        logits: T x V scores
        targets: T target ids
        pad_mask: T flags, True where the position is padding
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy needs T x V logits, got {logits.shape}")
    steps, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (steps,):
        raise ShapeError(f"expected {steps} targets, got shape {targets.shape}")
    padded = np.zeros(steps, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    if padded.shape != (steps,):
        raise ShapeError(f"expected {steps} pad flags, got shape {padded.shape}")
    if (targets < 0).any() or (targets >= vocab).any():
        raise ShapeError(f"target ids must lie in [0, {vocab})")
    valid = ~padded
    count = int(valid.sum())
    if count == 0:
        raise DegenerateBatchError("every target position is padding")

    log_probs = log_softmax_np(logits.data)
    rows = np.arange(steps)
    loss = -log_probs[rows, targets][valid].sum() / count

    def backward_fn(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        grad *= valid[:, None] / count
        return (grad * g,)

    return _emit("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn)


# ============================================================================
# GRADIENT CHECKING
# ============================================================================

def _scalar_value(value: Tensor) -> float:
    if value.size != 1:
        raise ShapeError(f"gradient check needs a scalar function, got shape {value.shape}")
    return value.item()


def grad_check_params(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-8,
) -> float:
    """
    Worst relative error between tape gradients of f() and central
    differences, over the coordinates of `params` (perturbed in place and
    restored). With max_coords set, that many coordinates per tensor are
    sampled from rng. The error denominator is max(|analytic|, |numeric|, floor).
    """
    if get_dtype() != np.float64:
        raise TapeError("gradient checks need 64-bit precision")
    with Tape() as tape:
        loss = f()
    _scalar_value(loss)
    tape.backward(loss)

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    with no_tape():
        for param in params:
            grad = tape.gradient(param)
            analytic = np.zeros(param.shape) if grad is None else grad.data
            coords = list(np.ndindex(*param.shape))
            if max_coords is not None and len(coords) > max_coords:
                picked = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
                coords = [coords[i] for i in picked]
            for idx in coords:
                original = param.data[idx]
                param.data[idx] = original + eps
                plus = _scalar_value(f())
                param.data[idx] = original - eps
                minus = _scalar_value(f())
                param.data[idx] = original
                if not (np.isfinite(plus) and np.isfinite(minus)):
                    raise NonFiniteError(f"non-finite function value while perturbing {idx}")
                numeric = (plus - minus) / (2 * eps)
                exact = float(analytic[idx])
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                worst = max(worst, error)
    return worst


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Worst relative gradient error of scalar f at x."""
    leaf = Tensor(x.data, requires_grad=True)
    return grad_check_params(lambda: f(leaf), [leaf], eps=eps, max_coords=max_coords, rng=rng)
