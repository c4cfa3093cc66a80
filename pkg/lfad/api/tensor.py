# This file is part of lfad, long-form attention decoding on a desk-scale speech model.
#
# Copyright 2024 The lfad Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
# ==============================================================================
"""A minimal define-by-run reverse-mode automatic differentiation core over :mod:`numpy`.

Every operation records a closure that maps the upstream gradient to the gradients of its
inputs. Calling :func:`backward` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into the leaf tensors that require them.

All values are stored as 64-bit floats.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Generator, Iterable, Sequence, Union

import numpy as np

from lfad.api.errors import ContractError, DimensionError, TokenIndexError


__all__ = [
    'Tensor',
    'Parameter',
    'no_grad',
    'is_grad_enabled',
    'as_tensor',
    'custom_op',
    'matmul',
    'concat',
    'stack',
    'where',
    'take',
    'exp',
    'log',
    'sigmoid',
    'swish',
    'softmax',
    'log_softmax',
    'logsumexp',
    'layer_norm',
    'cross_entropy',
    'backward',
    'AdamState',
    'adam_step',
    'clip_grad_norm',
    'numerical_gradient',
    'relative_error',
    'gradient_check',
]


ArrayLike = Union['Tensor', np.ndarray, float, int]
GradFn = Callable[[np.ndarray], Sequence[Union[np.ndarray, None]]]

_GRAD_MODE = threading.local()


def is_grad_enabled() -> bool:
    """Return whether new operations record the backward graph in the current thread."""
    return getattr(_GRAD_MODE, 'enabled', True)


@contextlib.contextmanager
def no_grad() -> Generator[None, None, None]:
    """A context manager that disables graph recording in the current thread.

    Examples:
        >>> with no_grad():
        ...     logits = model.decoder.forward(memory, tokens)  # no graph is kept
    """
    previous = is_grad_enabled()
    _GRAD_MODE.enabled = False
    try:
        yield
    finally:
        _GRAD_MODE.enabled = previous


class Tensor:
    """A dense array of 64-bit floats with an optional gradient and a backward graph node.

    Attributes:
        data (np.ndarray):
            The row-major value array. ``data.size == prod(shape)``.
        grad (Optional[np.ndarray]):
            The accumulated gradient (same shape as ``data``), populated by :func:`backward` for
            tensors created with ``requires_grad=True``.
    """

    __array_ufunc__ = None  # make ``ndarray <op> Tensor`` dispatch to the reflected Tensor operator

    def __init__(self, data: ArrayLike, *, requires_grad: bool = False) -> None:
        """Create a leaf tensor from array-like data."""
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad: bool = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        """The dimension sizes of the tensor."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """The number of dimensions of the tensor."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """The number of scalars in the tensor."""
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Return the underlying value array."""
        return self.data

    def item(self) -> float:
        """Return the value of a single-element tensor as a Python float."""
        if self.data.size != 1:
            raise ContractError(f'item() requires a single-element tensor, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        """Reset the accumulated gradient."""
        self.grad = None

    def backward(self) -> None:
        """Back-propagate from this scalar tensor. See :func:`backward`."""
        backward(self)

    def __repr__(self) -> str:
        """Return a string representation of the tensor."""
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f'{self.__class__.__name__}(shape={self.shape}{flag})'

    # Arithmetic ###################################################################################

    def __add__(self, other: ArrayLike) -> Tensor:
        other = as_tensor(other)
        return _record(self.data + other.data, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> Tensor:
        other = as_tensor(other)
        return _record(self.data - other.data, (self, other), lambda g: (g, -g))

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return as_tensor(other) - self

    def __mul__(self, other: ArrayLike) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        return _record(a * b, (self, other), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        return _record(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other: ArrayLike) -> Tensor:
        return as_tensor(other) / self

    def __neg__(self) -> Tensor:
        return _record(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> Tensor:
        a = self.data
        return _record(a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other: ArrayLike) -> Tensor:
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> Tensor:
        return matmul(other, self)

    def __getitem__(self, index: object) -> Tensor:
        shape = self.shape
        basic = _is_basic_index(index)

        def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
            full = np.zeros(shape, dtype=np.float64)
            if basic:
                full[index] += g  # type: ignore[index]
            else:
                np.add.at(full, index, g)  # type: ignore[arg-type]
            return (full,)

        return _record(self.data[index], (self,), grad_fn)  # type: ignore[index]

    # Shape and reductions #########################################################################

    def reshape(self, *shape: int) -> Tensor:
        """Return a tensor with the same data and a new shape."""
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return _record(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),))

    def transpose(self, *axes: int) -> Tensor:
        """Permute the dimensions (reverse them when no axes are given)."""
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return _record(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swapaxes(self, axis1: int, axis2: int) -> Tensor:
        """Interchange two axes."""
        return _record(
            np.swapaxes(self.data, axis1, axis2),
            (self,),
            lambda g: (np.swapaxes(g, axis1, axis2),),
        )

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        """Sum over the given axes."""
        shape = self.shape

        def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, _normalize_axes(axis, len(shape)))
            return (np.broadcast_to(g, shape),)

        return _record(self.data.sum(axis=axis, keepdims=keepdims), (self,), grad_fn)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        """Average over the given axes."""
        if axis is None:
            count = self.size
        else:
            count = math.prod(self.shape[a] for a in _normalize_axes(axis, self.ndim))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def exp(self) -> Tensor:
        """Element-wise exponential."""
        return exp(self)

    def log(self) -> Tensor:
        """Element-wise natural logarithm."""
        return log(self)


class Parameter(Tensor):
    """A named trainable tensor.

    The name is assigned by :meth:`lfad.api.layers.Module.named_parameters` from the attribute path
    and is unique within one model instance.
    """

    def __init__(self, data: ArrayLike, name: str | None = None) -> None:
        """Create a trainable tensor."""
        super().__init__(data, requires_grad=True)
        self.name: str | None = name

    @property
    def tensor(self) -> Tensor:
        """The parameter itself, viewed as a plain tensor."""
        return self

    def __repr__(self) -> str:
        """Return a string representation of the parameter."""
        return f'{self.__class__.__name__}(name={self.name!r}, shape={self.shape})'


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap a value in a constant tensor unless it is already a tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: GradFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out._parents = ()
    out._grad_fn = None
    out.requires_grad = False
    if is_grad_enabled() and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def custom_op(data: np.ndarray, parents: Sequence[ArrayLike], grad_fn: GradFn) -> Tensor:
    """Wrap the result of an operation computed directly on arrays as a node of the backward graph.

    ``grad_fn`` maps the upstream gradient to one gradient (or :data:`None`) per parent.
    """
    return _record(np.asarray(data), tuple(as_tensor(parent) for parent in parents), grad_fn)


def _normalize_axes(axis: int | Iterable[int], ndim: int) -> tuple[int, ...]:
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _is_basic_index(index: object) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(
        item is None or item is Ellipsis or isinstance(item, (int, np.integer, slice))
        for item in items
    )


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Operations #######################################################################################


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product with broadcasting over leading batch dimensions.

    Raises:
        DimensionError:
            If the operands are not at least 2-D or the inner dimensions disagree.

    Examples:
        >>> matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data
        array([[11.]])
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError('matmul inner dimensions do not agree', a.shape, b.shape)
    x, y = a.data, b.data
    return _record(
        x @ y,
        (a, b),
        lambda g: (g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g),
    )


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    """Join tensors along an existing axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError('concat() needs at least one tensor')
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    """Join same-shape tensors along a new axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError('stack() needs at least one tensor')
    return _record(
        np.stack([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


def where(condition: np.ndarray, x: ArrayLike, y: ArrayLike) -> Tensor:
    """Select from ``x`` where ``condition`` holds and from ``y`` elsewhere."""
    condition = np.asarray(condition, dtype=bool)
    x, y = as_tensor(x), as_tensor(y)
    return _record(
        np.where(condition, x.data, y.data),
        (x, y),
        lambda g: (np.where(condition, g, 0.0), np.where(condition, 0.0, g)),
    )


def take(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    indices = np.asarray(indices, dtype=np.int64)
    n_rows = table.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= n_rows):
        raise TokenIndexError(f'Row index out of range [0, {n_rows}): {indices.tolist()}')
    shape = table.shape

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, indices, g)
        return (full,)

    return _record(table.data[indices], (table,), grad_fn)


def exp(x: ArrayLike) -> Tensor:
    """Element-wise exponential."""
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: ArrayLike) -> Tensor:
    """Element-wise natural logarithm."""
    x = as_tensor(x)
    value = x.data
    return _record(np.log(value), (x,), lambda g: (g / value,))


def sigmoid(x: ArrayLike) -> Tensor:
    """Element-wise logistic function."""
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def swish(x: ArrayLike) -> Tensor:
    """Element-wise ``x * sigmoid(x)`` (smooth everywhere, unlike ReLU)."""
    x = as_tensor(x)
    return x * sigmoid(x)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``.

    Examples:
        >>> softmax(Tensor([1000.0, 0.0])).data
        array([1., 0.])
    """
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(
        out,
        (x,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    """Numerically stabilized log-softmax along ``axis``."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _record(
        out,
        (x,),
        lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),),
    )


def logsumexp(x: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stabilized ``log(sum(exp(x)))`` along ``axis``."""
    x = as_tensor(x)
    peak = np.max(x.data, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    total = np.log(np.exp(x.data - peak).sum(axis=axis, keepdims=True)) + peak
    weights = np.exp(x.data - total)
    out = total if keepdims else np.squeeze(total, axis=axis)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return _record(out, (x,), grad_fn)


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean and unit variance, then scale and shift.

    Examples:
        >>> layer_norm(Tensor([[5.0, 5.0, 5.0]]), 1.0, 0.0).data
        array([[0., 0., 0.]])
    """
    if eps <= 0.0:
        raise ContractError(f'layer_norm() requires eps > 0, got {eps!r}')
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    value = x.data
    mean = value.mean(axis=-1, keepdims=True)
    centered = value - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normalized = centered * inv_std
    scale = gain.data

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d_norm = g * scale
        d_x = inv_std * (
            d_norm
            - d_norm.mean(axis=-1, keepdims=True)
            - normalized * (d_norm * normalized).mean(axis=-1, keepdims=True)
        )
        return d_x, g * normalized, g

    return _record(normalized * scale + bias.data, (x, gain, bias), grad_fn)


def cross_entropy(
    logits: Tensor,
    targets: Sequence[int] | np.ndarray,
    ignore_index: int = -100,
) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits`` over non-ignored positions.

    Args:
        logits (Tensor):
            Unnormalized scores of shape ``(..., V)``.
        targets (Sequence[int]):
            Token ids with the leading shape of ``logits``.
        ignore_index (int):
            Target value excluded from the mean.

    Raises:
        TokenIndexError:
            If a target id is outside ``[0, V)`` and is not ``ignore_index``.
        DimensionError:
            If the target shape does not match the leading shape of the logits.

    Examples:
        >>> cross_entropy(Tensor(np.zeros((1, 4))), [2]).item()  # ln 4
        1.3862943611198906
    """
    targets = np.asarray(targets, dtype=np.int64)
    n_classes = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(
            'targets must match the leading shape of logits',
            targets.shape,
            logits.shape,
        )
    flat_targets = targets.reshape(-1)
    valid = flat_targets != ignore_index
    bad = valid & ((flat_targets < 0) | (flat_targets >= n_classes))
    if bad.any():
        raise TokenIndexError(
            f'Target id {int(flat_targets[bad][0])} is out of range [0, {n_classes}).',
        )
    if not valid.any():
        return Tensor(0.0)
    log_probs = log_softmax(logits.reshape(-1, n_classes), axis=-1)
    rows = np.flatnonzero(valid)
    picked = log_probs[rows, flat_targets[rows]]
    return -picked.mean()


# Backward #########################################################################################


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
        stack.extend((parent, False) for parent in node._parents if id(parent) not in visited)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every reachable leaf with gradients.

    Gradients accumulate across calls until they are reset (``Module.zero_grad``).

    Raises:
        ContractError:
            If ``loss`` is not a single-element tensor.

    Examples:
        >>> x = Tensor(2.0, requires_grad=True)
        >>> backward(x * x)
        >>> x.grad
        array(4.)
    """
    if loss.size != 1:
        raise ContractError(f'backward() requires a scalar root, got shape {loss.shape}')
    if not loss.requires_grad:
        return

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._grad_fn is None:
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._grad_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = _unbroadcast(np.asarray(parent_grad, dtype=np.float64), parent.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad


# Optimizer ########################################################################################


@dataclass
class AdamState:
    """First and second moment buffers of Adam, keyed by parameter name."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


# pylint: disable-next=too-many-arguments
def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Apply one bias-corrected Adam update to ``params`` in place and return the updated state.

    A missing gradient (:data:`None`) counts as a zero gradient.

    Raises:
        DimensionError:
            If a gradient or a state buffer does not match its parameter shape.
    """
    if len(params) != len(grads):
        raise DimensionError('params and grads differ in length', (len(params),), (len(grads),))

    step = state.step + 1
    m_state, v_state = dict(state.m), dict(state.v)
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    for index, (param, grad) in enumerate(zip(params, grads)):
        key = param.name if param.name is not None else str(index)
        grad = np.zeros_like(param.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise DimensionError(
                f'gradient of {key!r} has the wrong shape',
                grad.shape,
                param.shape,
            )
        m = m_state.get(key, np.zeros_like(param.data))
        v = v_state.get(key, np.zeros_like(param.data))
        if m.shape != param.shape or v.shape != param.shape:
            raise DimensionError(
                f'optimizer state of {key!r} has the wrong shape',
                m.shape,
                param.shape,
            )
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        param.data = param.data - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        m_state[key], v_state[key] = m, v
    return AdamState(step=step, m=m_state, v=v_state)


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Rescale the gradients in place so that their global norm is at most ``max_norm``.

    Returns:
        The global gradient norm before clipping.
    """
    params = [param for param in params if param.grad is not None]
    squares = (float((param.grad * param.grad).sum()) for param in params)  # type: ignore[operator]
    total = math.sqrt(sum(squares))
    if max_norm > 0.0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for param in params:
            param.grad = param.grad * scale  # type: ignore[operator]
    return total


# Finite differences ###############################################################################


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of the scalar function ``f`` w.r.t. the array ``x``.

    ``x`` is perturbed in place and restored after each evaluation.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat_x = x.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + h
        plus = f()
        flat_x[i] = original - h
        minus = f()
        flat_x[i] = original
        flat_grad[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Relative error ``|a - n| / max(|a| + |n|, tiny)`` in the Euclidean norm."""
    difference = float(np.linalg.norm(np.asarray(analytic) - np.asarray(numeric)))
    scale = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    if scale < 1e-12:
        return difference
    return difference / scale


def gradient_check(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
) -> dict[str, float]:
    """Compare the analytic gradients of ``f()`` w.r.t. ``tensors`` with central finite differences.

    Args:
        f (Callable[[], Tensor]):
            A closure returning a scalar tensor; it is re-evaluated for every perturbation.
        tensors (Sequence[Tensor]):
            Leaf tensors (usually parameters) whose ``data`` arrays are perturbed.
        h (float):
            The finite-difference step.

    Returns:
        A mapping from tensor name (or position) to the relative error of its gradient.
    """
    for tensor in tensors:
        tensor.grad = None
    backward(f())
    errors = {}
    for index, tensor in enumerate(tensors):
        analytic = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad.copy()
        with no_grad():
            numeric = numerical_gradient(lambda: f().item(), tensor.data, h=h)
        name = getattr(tensor, 'name', None) or str(index)
        errors[name] = relative_error(analytic, numeric)
    return errors
