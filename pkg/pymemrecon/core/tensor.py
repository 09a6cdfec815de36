"""
Minimal dense tensors with reverse-mode differentiation.

Every model and loss computation in ``pymemrecon`` is composed from the
primitives in this module. A ``Tensor`` wraps a NumPy array; operations on
tensors that require gradients record a backward closure and their parent
tensors, and ``Tensor.backward()`` replays those closures in reverse
topological order, accumulating gradients into the leaf tensors.
"""
__all__ = [
    'Tensor',
    'add',
    'as_tensor',
    'concat',
    'div',
    'exp',
    'gelu',
    'grad_enabled',
    'index',
    'layer_norm',
    'log',
    'matmul',
    'mean',
    'mul',
    'neg',
    'no_grad',
    'norm',
    'power',
    'relu',
    'reshape',
    'softmax',
    'sqrt',
    'sub',
    'sum',
    'tensor',
    'transpose',
    'LAYER_NORM_EPS',
]


import builtins
import threading

from contextlib import contextmanager

import numpy as np

from scipy.special import erf

from ..exceptions import (
    DimensionError,
    NonFiniteError,
)


LAYER_NORM_EPS = 1e-5

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_state = threading.local()


def grad_enabled():
    """
    Whether operations currently record a backward tape (thread-local).
    """
    return getattr(_grad_state, 'enabled', True)


@contextmanager
def no_grad():
    """
    Context manager disabling tape recording in the current thread - used by
    inference, where weights are read-only and no gradients are needed.
    """
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """
    A dense array plus the bookkeeping for reverse-mode differentiation.

    Tensors are treated as immutable values once created; the only state
    that changes afterwards is ``grad``, which accumulates during
    ``backward()``. Optimisers replace ``data`` with a new array instead of
    writing into it.
    """
    # NumPy arrays on the left of an operator defer to the reflected
    # Tensor method instead of building object arrays.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _op=''):
        """
        Class initialiser.

        Parameters
        ----------
        ``data`` : array-like
            The tensor values - anything ``numpy.asarray`` accepts

        ``requires_grad`` : ``bool``
            Whether gradients should be accumulated into this tensor

        ``dtype`` : ``numpy.dtype``, ``None``
            Storage dtype - defaults to the dtype of ``data`` for float
            arrays and ``float64`` otherwise
        """
        array = np.asarray(data, dtype=dtype)
        if dtype is None and array.dtype.kind != 'f':
            array = array.astype(np.float64)

        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def __repr__(self):
        return (
            f'{self.__module__}.{self.__class__.__name__}('
            f'shape={self.shape}, dtype={self.dtype}, '
            f'requires_grad={self.requires_grad}'
            f')'
        )

    def __len__(self):
        return len(self.data)

    def numpy(self):
        """
        Returns a copy of the tensor values as a NumPy array.
        """
        return self.data.copy()

    def item(self):
        return self.data.item()

    def detach(self):
        """
        Returns a tensor sharing the values of this one but cut off from the
        tape.
        """
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _topological_order(self):
        # Iterative post-order walk, parents in recorded order, so that the
        # backward pass is deterministic and deep graphs do not hit the
        # recursion limit.
        order = []
        visited = set()
        stack = [(self, False)]

        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        return order

    def backward(self, grad=None):
        """
        Backpropagates from this tensor, accumulating gradients into every
        leaf tensor with ``requires_grad=True`` that it depends on.

        Parameters
        ----------
        ``grad`` : array-like, ``None``
            The upstream gradient - may be omitted for single-element
            tensors, where it defaults to one

        Raises
        ------
        ``pymemrecon.exceptions.DimensionError`` :
            If ``grad`` is omitted for a tensor with more than one element,
            or has the wrong shape
        ``pymemrecon.exceptions.NonFiniteError`` :
            If a non-finite gradient is produced
        """
        if not self.requires_grad:
            raise DimensionError('backward() called on a tensor that does not require gradients')

        if grad is None:
            if self.size != 1:
                raise DimensionError(
                    f'backward() without an explicit gradient needs a single-element '
                    f'tensor, got shape {self.shape}'
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise DimensionError(
                    f'gradient shape {grad.shape} does not match tensor shape {self.shape}'
                )

        pending = {id(self): grad}

        for node in reversed(self._topological_order()):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue

            if node.is_leaf:
                node_grad = np.array(node_grad, dtype=node.dtype)
                node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue

            parent_grads = node._backward(node_grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                _check_finite(parent_grad, f'backward of {node._op}')
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    # Operator overloads

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    # Method forms of the module-level primitives

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def softmax(self, axis=-1):
        return softmax(self, axis=axis)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(value, dtype=None):
    """
    Returns ``value`` unchanged if it is already a ``Tensor``, otherwise a
    constant tensor wrapping it (in ``dtype`` if given).
    """
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False, dtype=dtype)


def _check_finite(array, op):
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f'non-finite values produced by "{op}"')


def _result(data, parents, backward, op):
    _check_finite(data, op)
    requires_grad = grad_enabled() and builtins.any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, requires_grad=False)

    out = Tensor(data, requires_grad=True, _parents=parents, _op=op)
    out._backward = backward
    return out


def _binary_operands(a, b):
    # Python scalars and arrays take the dtype of the tensor operand.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def _unbroadcast(grad, shape):
    """
    Sums ``grad`` over the axes along which an operand of ``shape`` was
    broadcast, returning an array of exactly ``shape``.
    """
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze_axes = tuple(
        axis for axis, size in enumerate(shape)
        if size == 1 and grad.shape[axis] != 1
    )
    if squeeze_axes:
        grad = grad.sum(axis=squeeze_axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f'{op}: shapes {a.shape} and {b.shape} cannot be broadcast')


def add(a, b):
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, 'add')

    def backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _result(a.data + b.data, (a, b), backward, 'add')


def sub(a, b):
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, 'sub')

    def backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return _result(a.data - b.data, (a, b), backward, 'sub')


def mul(a, b):
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, 'mul')

    def backward(grad):
        return (
            _unbroadcast(grad * b.data, a.shape),
            _unbroadcast(grad * a.data, b.shape),
        )

    return _result(a.data * b.data, (a, b), backward, 'mul')


def div(a, b):
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, 'div')

    def backward(grad):
        return (
            _unbroadcast(grad / b.data, a.shape),
            _unbroadcast(-grad * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), backward, 'div')


def neg(a):
    a = as_tensor(a)

    def backward(grad):
        return (-grad,)

    return _result(-a.data, (a,), backward, 'neg')


def power(a, exponent):
    """
    Elementwise ``a ** exponent`` for a constant (non-tensor) exponent.
    """
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(grad):
        return (grad * exponent * a.data ** (exponent - 1.0),)

    return _result(a.data ** exponent, (a,), backward, 'power')


def exp(a):
    a = as_tensor(a)
    with np.errstate(over='ignore'):
        out_data = np.exp(a.data)

    def backward(grad):
        return (grad * out_data,)

    return _result(out_data, (a,), backward, 'exp')


def log(a):
    a = as_tensor(a)
    with np.errstate(divide='ignore', invalid='ignore'):
        out_data = np.log(a.data)

    def backward(grad):
        return (grad / a.data,)

    return _result(out_data, (a,), backward, 'log')


def sqrt(a):
    a = as_tensor(a)
    with np.errstate(invalid='ignore'):
        out_data = np.sqrt(a.data)

    def backward(grad):
        return (grad * 0.5 / out_data,)

    return _result(out_data, (a,), backward, 'sqrt')


def relu(a):
    a = as_tensor(a)
    positive = a.data > 0

    def backward(grad):
        return (grad * positive,)

    return _result(np.where(positive, a.data, 0).astype(a.dtype), (a,), backward, 'relu')


def gelu(a):
    """
    Exact (error-function) GELU: ``0.5 x (1 + erf(x / sqrt(2)))``.
    """
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))

    def backward(grad):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (grad * (cdf + x * pdf),)

    return _result((x * cdf).astype(a.dtype), (a,), backward, 'gelu')


def matmul(a, b):
    """
    Matrix product of the last two axes, with leading (batch) axes
    broadcast as in ``numpy.matmul``.

    Raises
    ------
    ``pymemrecon.exceptions.DimensionError`` :
        If either operand has fewer than two axes, the inner dimensions
        disagree or the batch axes cannot be broadcast
    """
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f'matmul needs operands of rank >= 2, got {a.shape} and {b.shape}')
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f'matmul inner dimensions disagree: {a.shape} x {b.shape}')
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f'matmul batch dimensions disagree: {a.shape} x {b.shape}')

    def backward(grad):
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward, 'matmul')


def _normalized_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalized_axes(axis, a.ndim)

    def backward(grad):
        if not keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, a.shape),)

    return _result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward, 'sum')


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalized_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def backward(grad):
        if not keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad / count, a.shape),)

    return _result(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), backward, 'mean')


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f'cannot reshape {a.shape} into {tuple(shape)}')

    def backward(grad):
        return (grad.reshape(a.shape),)

    return _result(out_data, (a,), backward, 'reshape')


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise DimensionError(f'invalid transpose axes {axes} for shape {a.shape}')
    inverse = tuple(np.argsort([ax % a.ndim for ax in axes]))

    def backward(grad):
        return (np.transpose(grad, inverse),)

    return _result(np.transpose(a.data, axes), (a,), backward, 'transpose')


def concat(tensors, axis=0):
    """
    Concatenates tensors along ``axis``.
    """
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError('concat needs at least one tensor')
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f'concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}'
        )
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(grad):
        return tuple(np.split(grad, splits, axis=axis))

    return _result(out_data, tensors, backward, 'concat')


def index(a, key):
    """
    Basic or advanced indexing; the backward pass scatters gradients back
    with ``numpy.add.at`` so repeated indices accumulate.
    """
    a = as_tensor(a)
    if isinstance(key, Tensor):
        key = key.data.astype(np.int64)
    out_data = a.data[key]

    def backward(grad):
        full = np.zeros_like(a.data)
        np.add.at(full, key, grad)
        return (full,)

    return _result(np.array(out_data), (a,), backward, 'index')


def softmax(x, axis=-1):
    """
    Softmax along ``axis``, computed with max-subtraction so that large
    logits saturate instead of overflowing.
    """
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out_data = exps / np.sum(exps, axis=axis, keepdims=True)

    def backward(grad):
        inner = np.sum(grad * out_data, axis=axis, keepdims=True)
        return (out_data * (grad - inner),)

    return _result(out_data, (x,), backward, 'softmax')


def norm(x, axis=-1, keepdims=False):
    """
    Euclidean norm along ``axis``. The gradient at a zero-length vector is
    taken as zero (the subgradient of smallest magnitude), which keeps the
    regression loss differentiable at a perfect prediction.
    """
    x = as_tensor(x)
    out_data = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))

    def backward(grad):
        if not keepdims:
            grad = np.expand_dims(grad, axis)
        safe = np.where(out_data > 0, out_data, 1.0)
        unit = np.where(out_data > 0, x.data / safe, 0.0)
        return (grad * unit,)

    result = out_data if keepdims else np.squeeze(out_data, axis=axis)
    return _result(result, (x,), backward, 'norm')


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """
    Layer normalisation over the last axis, composed from primitives:
    ``(x - mean) / sqrt(var + eps) * gain + bias``. A constant row maps to
    zeros before the gain and bias are applied.
    """
    x = as_tensor(x)
    centred = x - mean(x, axis=-1, keepdims=True)
    variance = mean(centred * centred, axis=-1, keepdims=True)
    normalised = centred * power(variance + eps, -0.5)
    return normalised * gain + bias
