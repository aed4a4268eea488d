"""Small dense tensor engine with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient the result records its parents and a backward function mapping the
output gradient to one gradient per parent. :func:`backward` walks that tape
once in reverse topological order and then releases it.
"""
from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import GraphConsumedError, NonScalarLossError, ShapeMismatchError, UnknownTokenError

_LOGGER = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """ Disable graph recording in the current thread. """
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None) -> None:
        array = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        self.data: np.ndarray = array
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = ""
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other) -> Tensor:
        return add(self, other)

    def __sub__(self, other) -> Tensor:
        return add(self, scale(as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other) -> Tensor:
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index) -> Tensor:
        return getitem(self, index)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    needs_grad = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad, dtype=data.dtype)
    out.op = op
    if needs_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def custom_op(inputs: Sequence[Tensor], value: np.ndarray, backward_fn: BackwardFn, name: str = "custom") -> Tensor:
    """
    Wrap a value computed outside the engine with a hand-written backward.

    Args:
        inputs: Tensors the value depends on
        value: Forward result
        backward_fn: Maps the output gradient to one gradient per input (None for no contribution)
        name: Op label used in debug output

    Returns:
        A tensor recorded on the tape like any built-in op
    """
    return _record(np.asarray(value), inputs, backward_fn, name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """ Batched matrix product; a 2-D right operand is shared across the batch. """
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    if b.ndim > 2 and (b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2]):
        raise ShapeMismatchError("matmul", a.shape, b.shape)

    a_data, b_data = a.data, b.data

    def backward_fn(grad: np.ndarray):
        grad_a = grad @ np.swapaxes(b_data, -1, -2)
        if b_data.ndim == 2 and a_data.ndim > 2:
            grad_b = a_data.reshape(-1, a_data.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            grad_b = np.swapaxes(a_data, -1, -2) @ grad
        return grad_a, grad_b

    return _record(a_data @ b_data, (a, b), backward_fn, "matmul")


def add(a: Tensor, b) -> Tensor:
    """ Elementwise sum of equal shapes, or ``b`` as a bias over the last dimension. """
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.shape == b.shape:
        return _record(a.data + b.data, (a, b), lambda grad: (grad, grad), "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        width = b.shape[0]
        return _record(
            a.data + b.data, (a, b),
            lambda grad: (grad, grad.reshape(-1, width).sum(axis=0)),
            "add_bias",
        )
    raise ShapeMismatchError("add", a.shape, b.shape)


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeMismatchError("mul", a.shape, b.shape)
    a_data, b_data = a.data, b.data
    return _record(a_data * b_data, (a, b), lambda grad: (grad * b_data, grad * a_data), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    return _record(a.data * a.data.dtype.type(factor), (a,), lambda grad: (grad * factor,), "scale")


def shift(a: Tensor, offset: float) -> Tensor:
    return _record(a.data + a.data.dtype.type(offset), (a,), lambda grad: (grad,), "shift")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """ Concatenate along the last dimension. """
    if axis not in (-1, tensors[0].ndim - 1):
        raise ValueError("concat only supports the last dimension")
    head = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != head:
            raise ShapeMismatchError("concat", tensors[0].shape, t.shape)
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def backward_fn(grad: np.ndarray):
        return np.split(grad, splits, axis=-1)

    return _record(np.concatenate([t.data for t in tensors], axis=-1), tensors, backward_fn, "concat")


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """ Rows of ``table`` selected by integer ``indices`` of any shape. """
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatchError("embedding_lookup", table.shape)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise UnknownTokenError(f"Index outside 0..{table.shape[0] - 1} for table {table.name or table.shape}")
    rows, width = table.shape

    def backward_fn(grad: np.ndarray):
        grad_table = np.zeros((rows, width), dtype=grad.dtype)
        np.add.at(grad_table, indices.reshape(-1), grad.reshape(-1, width))
        return (grad_table,)

    return _record(table.data[indices], (table,), backward_fn, "embedding")


def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=-1, keepdims=True)

    def backward_fn(grad: np.ndarray):
        return (out * (grad - (grad * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), backward_fn, "softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """ Normalise over the last dimension, then apply the optional affine pair. """
    width = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (width,):
            raise ShapeMismatchError("layer_norm", x.shape, p.shape)

    mean_ = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean_
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def backward_fn(grad: np.ndarray):
        d_hat = grad * gamma.data if gamma is not None else grad
        grad_x = inv_std / width * (
            width * d_hat
            - d_hat.sum(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True)
        )
        grads: list[np.ndarray] = [grad_x]
        if gamma is not None:
            grads.append((grad * x_hat).reshape(-1, width).sum(axis=0))
        if beta is not None:
            grads.append(grad.reshape(-1, width).sum(axis=0))
        return grads

    return _record(out.astype(x.dtype, copy=False), parents, backward_fn, "layer_norm")


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return _record(np.where(active, a.data, 0).astype(a.dtype), (a,), lambda grad: (grad * active,), "relu")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """ Inverted dropout; identity at eval time or when ``p`` is zero. """
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout needs an explicit generator at train time")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return _record(a.data * keep, (a,), lambda grad: (grad * keep,), "dropout")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """ Permute axes; swaps the last two when ``axes`` is omitted. """
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatchError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda grad: (np.transpose(grad, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeMismatchError("reshape", original, tuple(shape)) from err
    return _record(data, (a,), lambda grad: (grad.reshape(original),), "reshape")


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward_fn(grad: np.ndarray):
        expanded = grad if axis is None else np.expand_dims(grad, axis)
        return (np.broadcast_to(expanded, shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis)), (a,), backward_fn, "sum")


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis), 1.0 / count)


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    """ Natural log of ``max(a, eps)``; clamped entries pass no gradient. """
    clamped = np.maximum(a.data, eps) if eps > 0 else a.data
    active = a.data > eps if eps > 0 else np.ones_like(a.data, dtype=bool)
    data = a.data

    def backward_fn(grad: np.ndarray):
        return (np.where(active, grad / np.where(active, data, 1), 0),)

    return _record(np.log(clamped), (a,), backward_fn, "log")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward_fn(grad: np.ndarray):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, grad)
        return (full,)

    return _record(np.array(a.data[index]), (a,), backward_fn, "getitem")


def take_last(a: Tensor, indices: np.ndarray) -> Tensor:
    """ Gather one entry per row along the last axis. """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape != a.shape[:-1]:
        raise ShapeMismatchError("take_last", a.shape, indices.shape)
    expanded = indices[..., None]
    shape, dtype = a.shape, a.dtype

    def backward_fn(grad: np.ndarray):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, expanded, grad[..., None], axis=-1)
        return (full,)

    return _record(np.take_along_axis(a.data, expanded, axis=-1)[..., 0], (a,), backward_fn, "take_last")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """
    Reverse-mode pass from a scalar loss.

    Gradients are stored in ``.grad`` of every leaf that requires one and are
    returned as a mapping leaf -> gradient. Frozen tensors get nothing. The
    tape is released afterwards.

    Raises:
        NonScalarLossError: If ``loss`` has more than one element
        GraphConsumedError: If backward already ran on this graph
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("Graph already consumed by a previous backward; run the forward pass again")
    if not loss.requires_grad:
        return {}

    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}

    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = grad
            leaves[node] = grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = np.asarray(parent_grad, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
        node._parents = ()
        node._backward = None
        node._consumed = True

    loss._consumed = True
    return leaves


def finite_difference_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    n_samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """
    Compare autodiff gradients with central differences.

    Args:
        f: Builds the scalar loss from ``tensors`` (must be deterministic)
        tensors: Inputs to perturb; frozen ones are skipped
        h: Step size
        n_samples: Coordinates checked per tensor; all when omitted
        rng: Generator choosing the sampled coordinates

    Returns:
        Max over checked coordinates of |autodiff - fd| / max(1, |fd|)
    """
    rng = np.random.default_rng(0) if rng is None else rng
    analytic = backward(f(tensors))
    worst = 0.0

    for tensor in tensors:
        if not tensor.requires_grad:
            continue
        ad = analytic.get(tensor)
        ad = np.zeros_like(tensor.data) if ad is None else ad
        tensor.data = np.ascontiguousarray(tensor.data)
        flat = tensor.data.reshape(-1)
        coords = np.arange(flat.size)
        if n_samples is not None and n_samples < flat.size:
            coords = rng.choice(flat.size, size=n_samples, replace=False)

        for coord in coords:
            original = flat[coord]
            with no_grad():
                flat[coord] = original + h
                plus = f(tensors).item()
                flat[coord] = original - h
                minus = f(tensors).item()
            flat[coord] = original
            fd = (plus - minus) / (2.0 * h)
            error = abs(float(ad.reshape(-1)[coord]) - fd) / max(1.0, abs(fd))
            worst = max(worst, error)

    _LOGGER.debug("Finite-difference check over %d tensors: max relative error %.3e", len(tensors), worst)
    return worst
