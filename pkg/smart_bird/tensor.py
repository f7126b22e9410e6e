"""Minimal dense tensor engine with tape-based reverse-mode differentiation and Adam.

Values are numpy arrays in the current default dtype (float32 unless changed with
:func:`default_dtype`). Products, reductions and normalizations accumulate in float64 and
cast the result back. Operations are recorded only while a :class:`Tape` is active and at
least one operand requires a gradient, so forward passes outside a tape build no graph."""
import contextlib
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import (
    BinaryIO,
    Callable,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from smart_bird.exceptions import ArtifactMismatchError, ShapeError

logger = logging.getLogger(__name__)

_local = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


##################################################
# Precision
##################################################
def get_default_dtype() -> type:
    """The numpy scalar type new tensors are stored in (per thread)"""
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of new tensors in the current thread.

    Gradient checks run under `default_dtype(np.float64)` so finite differences are not
    dominated by float32 rounding"""
    previous = get_default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


def _cast(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=get_default_dtype())


def _f64(tensor: "Tensor") -> np.ndarray:
    return tensor.values.astype(np.float64)


##################################################
# Tensor
##################################################
class Tensor:
    """Dense n-dimensional float array with an optional gradient buffer

    Parameters
    ----------
    values: Array-like
        Initial values. Always copied into the default dtype
    requires_grad: Boolean, default=False
        Whether operations on this tensor are recorded for differentiation
    name: String (optional)
        Label used in error messages and checkpoints"""

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values: np.ndarray = np.array(values, dtype=get_default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Tuple["Tape", int]] = None
        self.name = name
        self.nan_flag = False

    @classmethod
    def _wrap(cls, values: np.ndarray) -> "Tensor":
        """Build a tensor around freshly computed values without copying them"""
        tensor = cls.__new__(Tensor)
        tensor.values = _cast(values)
        tensor.grad = None
        tensor.requires_grad = False
        tensor.node = None
        tensor.name = None
        tensor.nan_flag = False
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate gradients of every tensor this scalar depends on. See :func:`backward`"""
        backward(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        label = " name={!r}".format(self.name) if self.name else ""
        return "Tensor(shape={}{}, requires_grad={})".format(self.shape, label, self.requires_grad)


class Parameter(Tensor):
    """A trainable leaf tensor. :class:`Module` collects these for optimizers and checkpoints"""

    def __init__(self, values, name: Optional[str] = None):
        super().__init__(values, requires_grad=True, name=name)


def _coerce(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


##################################################
# Tape
##################################################
@dataclass
class TapeEntry:
    """One recorded operation: its operands, its result, and the rule mapping the result's
    gradient to operand gradients (None for operands that receive nothing)"""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations, used as a context manager::

        with Tape() as tape:
            loss = cross_entropy(model_logits, labels)
            loss.backward()

    Entries are appended in execution order, so every entry's inputs are leaves or outputs of
    earlier entries. The tape belongs to the thread that entered it."""

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_rule) -> None:
        output.node = (self, len(self.entries))
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward_rule))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(.) through the recorded entries in reverse order. Gradients are
        added to existing `grad` buffers, so repeated calls accumulate"""
        if loss.size != 1:
            raise ShapeError("backward() needs a scalar loss, got shape {}".format(loss.shape))
        if loss.node is None or loss.node[0] is not self:
            raise ValueError("loss was not recorded on this tape")

        pending: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
        for entry in reversed(self.entries[: loss.node[1] + 1]):
            upstream = pending.pop(id(entry.output), None)
            if upstream is None:
                continue
            _accumulate(entry.output, upstream)
            for tensor, grad in zip(entry.inputs, entry.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.node is not None and tensor.node[0] is self:
                    key = id(tensor)
                    pending[key] = pending[key] + grad if key in pending else grad
                else:
                    _accumulate(tensor, grad)


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    """The innermost tape entered in this thread, if any"""
    stack = _tape_stack()
    return stack[-1] if stack else None


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=tensor.values.dtype).reshape(tensor.shape)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def backward(loss: Tensor) -> None:
    """Differentiate a scalar `loss` with respect to every tensor on its tape

    Raises
    ------
    ShapeError
        If `loss` is not a scalar
    ValueError
        If `loss` was computed outside a tape"""
    if loss.size != 1:
        raise ShapeError("backward() needs a scalar loss, got shape {}".format(loss.shape))
    if loss.node is None:
        raise ValueError("loss is not on a tape; compute it inside `with Tape():`")
    loss.node[0].backward(loss)


def _result(op: str, inputs: Sequence[Tensor], values: np.ndarray, backward_rule) -> Tensor:
    out = Tensor._wrap(values)
    if any(t.requires_grad for t in inputs):
        tape = active_tape()
        if tape is not None:
            out.requires_grad = True
            tape.record(op, inputs, out, backward_rule)
    return out


##################################################
# Elementwise Operations
##################################################
def _broadcast_shape(a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeError("incompatible broadcast shapes {} and {}".format(a.shape, b.shape))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_shape(a, b)
    return _result(
        "add",
        (a, b),
        a.values + b.values,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def subtract(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_shape(a, b)
    return _result(
        "subtract",
        (a, b),
        a.values - b.values,
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_shape(a, b)
    a64, b64 = _f64(a), _f64(b)
    return _result(
        "multiply",
        (a, b),
        a64 * b64,
        lambda g: (_unbroadcast(g * b64, a.shape), _unbroadcast(g * a64, b.shape)),
    )


def scale(x: ArrayLike, factor: float) -> Tensor:
    x = _coerce(x)
    return _result("scale", (x,), _f64(x) * factor, lambda g: (g * factor,))


def relu(x: ArrayLike) -> Tensor:
    """Rectified linear unit; the subgradient at 0 is 0"""
    x = _coerce(x)
    active = x.values > 0
    return _result("relu", (x,), np.where(active, x.values, 0.0), lambda g: (g * active,))


def tanh(x: ArrayLike) -> Tensor:
    x = _coerce(x)
    y = np.tanh(_f64(x))
    return _result("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


_ELEMENTWISE = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "scale": scale,
    "relu": relu,
    "tanh": tanh,
}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch one of the elementwise operations by name (`add`, `subtract`, `multiply`,
    `scale`, `relu`, `tanh`). `scale` takes a tensor and a Python float"""
    try:
        op = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(
            "unknown elementwise op {!r}; expected one of {}".format(kind, sorted(_ELEMENTWISE))
        )
    return op(*operands)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout: surviving activations are scaled by 1 / (1 - `rate`) during training,
    and the input is returned unchanged at evaluation"""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result("dropout", (x,), _f64(x) * keep, lambda g: (g * keep,))


##################################################
# Structural Operations
##################################################
def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("transpose expects a matrix, got shape {}".format(x.shape))
    return _result("transpose", (x,), x.values.T.copy(), lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        values = x.values.reshape(tuple(shape)).copy()
    except ValueError:
        raise ShapeError("cannot reshape {} into {}".format(x.shape, tuple(shape)))
    return _result("reshape", (x,), values, lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along `axis`; the gradient is split back into the original pieces"""
    tensors = [_coerce(t) for t in tensors]
    try:
        values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("cannot concatenate shapes {}".format([t.shape for t in tensors]))
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concat", tensors, values, lambda g: tuple(np.split(g, offsets, axis=axis)))


def gather_rows(table: Tensor, index) -> Tensor:
    """Select rows of `table` by an integer array of any shape. The result has shape
    `index.shape + table.shape[1:]`; the backward pass scatter-adds into the source rows, so a
    row gathered twice receives both contributions

    Raises
    ------
    IndexError
        If an index falls outside `[0, table.shape[0])`"""
    index = np.asarray(index, dtype=np.int64)
    rows = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise IndexError(
            "gather index out of range: [{}, {}] for {} rows".format(index.min(), index.max(), rows)
        )

    def _backward(g):
        scattered = np.zeros(table.shape, dtype=np.float64)
        np.add.at(scattered, index, g)
        return (scattered,)

    return _result("gather_rows", (table,), table.values[index], _backward)


##################################################
# Products and Reductions
##################################################
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of an m×k and a k×n matrix, accumulated in float64

    Raises
    ------
    ShapeError
        If either operand is not a matrix or the inner dimensions differ"""
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul: cannot multiply {} by {}".format(a.shape, b.shape))
    a64, b64 = _f64(a), _f64(b)
    return _result("matmul", (a, b), a64 @ b64, lambda g: (g @ b64.T, a64.T @ g))


def einsum(spec: str, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Two-operand Einstein summation (e.g. `"nd,nkd->nk"`). Every index of an operand must
    appear in the other operand or in the output, which keeps the backward pass an einsum too"""
    a, b = _coerce(a), _coerce(b)
    inputs, output = spec.replace(" ", "").split("->")
    sub_a, sub_b = inputs.split(",")
    for sub, other in ((sub_a, sub_b), (sub_b, sub_a)):
        if any(index not in other + output for index in sub):
            raise ValueError("einsum {!r}: every operand index must be reused".format(spec))
    a64, b64 = _f64(a), _f64(b)
    try:
        values = np.einsum(spec, a64, b64)
    except ValueError as err:
        raise ShapeError("einsum {!r} on {} and {}: {}".format(spec, a.shape, b.shape, err))

    def _backward(g):
        grad_a = np.einsum("{},{}->{}".format(output, sub_b, sub_a), g, b64)
        grad_b = np.einsum("{},{}->{}".format(output, sub_a, sub_b), g, a64)
        return grad_a, grad_b

    return _result("einsum", (a, b), values, _backward)


def sum_all(x: ArrayLike) -> Tensor:
    x = _coerce(x)
    return _result(
        "sum", (x,), np.array(_f64(x).sum()), lambda g: (np.full(x.shape, float(g)),)
    )


def mean(x: ArrayLike) -> Tensor:
    x = _coerce(x)
    count = max(x.size, 1)
    return _result(
        "mean", (x,), np.array(_f64(x).sum() / count), lambda g: (np.full(x.shape, g / count),)
    )


def softmax_rows(x: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    Parameters
    ----------
    x: Tensor
        Scores; rows are the last axis
    mask: numpy.ndarray of bool (optional)
        Broadcastable to `x`. Masked-out entries get probability exactly 0; rows with no
        unmasked entry come out all-zero

    Returns
    -------
    Tensor
        Row-stochastic weights. NaN inputs propagate to the affected rows and set
        `nan_flag` on the result"""
    x = _coerce(x)
    x64 = _f64(x)
    has_nan = bool(np.isnan(x64).any())
    with np.errstate(invalid="ignore"):
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
            x64 = np.where(mask, x64, -np.inf)
        row_max = np.max(x64, axis=-1, keepdims=True) if x.size else x64
        row_max = np.where(np.isinf(row_max), 0.0, row_max)
        exps = np.exp(x64 - row_max)
        if mask is not None:
            exps = np.where(mask, exps, 0.0)
        totals = exps.sum(axis=-1, keepdims=True)
        y = exps / np.where(totals > 0, totals, 1.0)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    out = _result("softmax_rows", (x,), y, _backward)
    if has_nan:
        out.nan_flag = True
        logger.warning("softmax_rows received NaN input of shape %s", x.shape)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of `x` to zero mean and unit variance (with `eps` added to the
    variance), then scale by `gain` and shift by `bias`"""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            "layer_norm: gain {} / bias {} do not match width {}".format(
                gain.shape, bias.shape, width
            )
        )
    x64 = _f64(x)
    centered = x64 - x64.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    gain64, bias64 = _f64(gain), _f64(bias)

    def _backward(g):
        d_normed = g * gain64
        d_x = inv_std * (
            d_normed
            - d_normed.mean(axis=-1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=-1, keepdims=True)
        )
        d_gain = (g * normed).reshape(-1, width).sum(axis=0)
        d_bias = g.reshape(-1, width).sum(axis=0)
        return d_x, d_gain, d_bias

    return _result("layer_norm", (x, gain, bias), normed * gain64 + bias64, _backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of `labels` under a row-wise softmax of `logits` (n×C)

    Raises
    ------
    IndexError
        If a label is outside `[0, C)`"""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy expects n×C logits, got {}".format(logits.shape))
    rows, classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != rows:
        raise ShapeError("{} labels for {} rows of logits".format(labels.shape[0], rows))
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IndexError("labels must lie in [0, {}), got {}".format(classes, labels.tolist()))
    shifted = _f64(logits) - _f64(logits).max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = np.arange(rows)
    loss = -log_probs[picked, labels].mean()

    def _backward(g):
        grad = np.exp(log_probs)
        grad[picked, labels] -= 1.0
        return (grad * (float(g) / rows),)

    return _result("cross_entropy", (logits,), np.array(loss), _backward)


##################################################
# Modules
##################################################
def xavier_uniform(shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Glorot/Xavier uniform initialization for a weight of `shape` (fan_in, fan_out, ...)"""
    fan_in, fan_out = shape[0], shape[-1] if len(shape) > 1 else shape[0]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Container of :class:`Parameter` attributes and nested modules. Parameters are found by
    walking instance attributes in definition order (lists of parameters or modules included),
    which fixes their names for checkpoints"""

    training = True
    frozen = False

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for position, item in enumerate(value):
                    yield "{}.{}".format(name, position), item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters("{}{}.".format(prefix, name))

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        """Stop recording gradients for every parameter and switch to evaluation mode"""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        for module in self.modules():
            module.frozen = True
        return self.eval()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]) -> None:
        """Copy `arrays` into the parameters of the same name

        Raises
        ------
        ArtifactMismatchError
            If names or shapes differ from this module's parameters"""
        own = dict(self.named_parameters())
        if set(own) != set(arrays):
            missing, unexpected = sorted(set(own) - set(arrays)), sorted(set(arrays) - set(own))
            raise ArtifactMismatchError(
                "parameter names differ (missing {}, unexpected {})".format(missing, unexpected)
            )
        for name, param in own.items():
            if tuple(np.shape(arrays[name])) != param.shape:
                raise ArtifactMismatchError(
                    "parameter {} has shape {}, checkpoint has {}".format(
                        name, param.shape, np.shape(arrays[name])
                    )
                )
            param.values = np.array(arrays[name], dtype=param.values.dtype)


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gain = Parameter(np.ones(width))
        self.bias = Parameter(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    """Position-wise `relu(x W1 + b1) W2 + b2` with inner width `inner`"""

    def __init__(self, width: int, inner: int, rng: np.random.Generator):
        self.w1 = Parameter(xavier_uniform((width, inner), rng))
        self.b1 = Parameter(np.zeros(inner))
        self.w2 = Parameter(xavier_uniform((inner, width), rng))
        self.b2 = Parameter(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(relu(add(matmul(x, self.w1), self.b1)), self.w2), self.b2)


##################################################
# Optimization
##################################################
@dataclass
class AdamState:
    """Moment buffers of :func:`adam_step`, one pair per parameter, plus the step counter"""

    step: int = 0
    first: List[np.ndarray] = field(default_factory=list)
    second: List[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Apply one bias-corrected Adam update to `params` in place.

    Parameters whose gradient is missing or identically zero are left untouched, moments
    included.

    Returns
    -------
    AdamState
        `state`, advanced by one step

    Raises
    ------
    ShapeError
        If a gradient or moment buffer does not match its parameter"""
    if not state.first:
        state.first = [np.zeros(p.shape, dtype=np.float64) for p in params]
        state.second = [np.zeros(p.shape, dtype=np.float64) for p in params]
    if len(state.first) != len(params) or len(grads) != len(params):
        raise ShapeError(
            "adam_step: {} params, {} grads, {} moment buffers".format(
                len(params), len(grads), len(state.first)
            )
        )
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for param, grad, first, second in zip(params, grads, state.first, state.second):
        if first.shape != param.shape:
            raise ShapeError("moment shape {} vs param {}".format(first.shape, param.shape))
        if grad is None or not np.any(grad):
            continue
        if grad.shape != param.shape:
            raise ShapeError("grad shape {} vs param {}".format(grad.shape, param.shape))
        grad = grad.astype(np.float64)
        first *= beta1
        first += (1.0 - beta1) * grad
        second *= beta2
        second += (1.0 - beta2) * grad * grad
        update = lr * (first / correction1) / (np.sqrt(second / correction2) + eps)
        param -= update.astype(param.dtype)
    return state


class Adam:
    """Adam optimizer over a list of :class:`Parameter`

    Parameters
    ----------
    parameters: List[Parameter]
        Tensors updated by :meth:`step`
    lr: Float, default=1e-4
    betas: Tuple[float, float], default=(0.9, 0.999)
    eps: Float, default=1e-8"""

    def __init__(
        self,
        parameters: Sequence[Parameter],
        lr: float = 1e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.parameters = list(parameters)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step(
            [p.values for p in self.parameters],
            [p.grad for p in self.parameters],
            self.state,
            lr=self.lr,
            beta1=self.betas[0],
            beta2=self.betas[1],
            eps=self.eps,
        )

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.zero_grad()


def clip_grad_norm(parameters: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most `max_norm`

    Returns
    -------
    Float
        The global norm before clipping"""
    grads = [p.grad for p in parameters if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in parameters:
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.grad.dtype)
    return total


##################################################
# Gradient Checking
##################################################
def numeric_gradient(
    fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-3
) -> List[np.ndarray]:
    """Central finite differences of the scalar `fn(*tensors)` with respect to each array"""
    with default_dtype(np.float64):
        tensors = [Tensor(a) for a in arrays]
        grads = []
        for tensor in tensors:
            grad = np.zeros(tensor.shape, dtype=np.float64)
            flat, flat_grad = tensor.values.reshape(-1), grad.reshape(-1)
            for position in range(flat.size):
                original = flat[position]
                flat[position] = original + eps
                upper = fn(*tensors).item()
                flat[position] = original - eps
                lower = fn(*tensors).item()
                flat[position] = original
                flat_grad[position] = (upper - lower) / (2.0 * eps)
            grads.append(grad)
    return grads


def gradcheck(
    fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-3
) -> float:
    """Compare tape gradients of the scalar `fn(*tensors)` with central finite differences,
    both in float64.

    Returns
    -------
    Float
        The largest relative error `||analytic - numeric|| / max(||analytic||, ||numeric||)`
        over all inputs"""
    with default_dtype(np.float64):
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape():
            fn(*tensors).backward()
        analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in tensors]
    numeric = numeric_gradient(fn, arrays, eps=eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale_ = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - n) / scale_))
    return worst


##################################################
# Binary Dump Format
##################################################
def dump_tensor(values: Union[Tensor, np.ndarray], stream: BinaryIO) -> None:
    """Write `values` as little-endian `u32 rank, u32 dims[rank], f32 data[]`"""
    array = values.values if isinstance(values, Tensor) else np.asarray(values)
    array = np.ascontiguousarray(array, dtype="<f4")
    stream.write(np.array([array.ndim, *array.shape], dtype="<u4").tobytes())
    stream.write(array.tobytes(order="C"))


def load_tensor(stream: BinaryIO) -> np.ndarray:
    """Read one array written by :func:`dump_tensor`

    Raises
    ------
    ValueError
        If the stream ends before the array is complete"""

    def _read(count: int) -> bytes:
        chunk = stream.read(count)
        if len(chunk) != count:
            raise ValueError(
                "truncated tensor dump: wanted {} bytes, got {}".format(count, len(chunk))
            )
        return chunk

    rank = int(np.frombuffer(_read(4), dtype="<u4")[0])
    dims = tuple(int(d) for d in np.frombuffer(_read(4 * rank), dtype="<u4")) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    data = np.frombuffer(_read(4 * count), dtype="<f4")
    return data.reshape(dims).astype(np.float32)
