"""
Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a Function subclass. Function.apply runs the
forward pass on plain ndarrays and links the output to the Function instance,
so backward() can replay the recorded graph in reverse topological order.
"""
import logging
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from bags.errors import DomainError, GraphError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]

_SUPPORTED_DTYPES = (np.float32, np.float64)


class _GradMode:
    enabled = True
    default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Select the float width used for new tensors ("float32" or "float64")"""
    resolved = np.dtype(dtype).type
    if resolved not in _SUPPORTED_DTYPES:
        raise ValueError(f"unsupported tensor dtype: {dtype}")
    _GradMode.default_dtype = resolved


def get_default_dtype():
    return _GradMode.default_dtype


def is_grad_enabled() -> bool:
    return _GradMode.enabled


@contextmanager
def no_grad():
    """Evaluate without recording anything on the graph"""
    previous = _GradMode.enabled
    _GradMode.enabled = False
    try:
        yield
    finally:
        _GradMode.enabled = previous


def _float_array(data, dtype=None) -> np.ndarray:
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype.type in _SUPPORTED_DTYPES:
            dtype = data.dtype
        else:
            dtype = _GradMode.default_dtype
    return np.array(data, dtype=dtype)


class Tensor:
    """
    An immutable ndarray plus the bookkeeping needed for reverse-mode differentiation.

    The underlying array is read-only. Optimizers replace it wholesale through
    the `data` setter instead of writing into it.
    """

    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self._data = None
        self.data = _float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._ctx: Optional["Function"] = None
        self._retain = False

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out._data = None
        out.data = array
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._ctx = None
        out._retain = False
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value: np.ndarray):
        array = np.asarray(value)
        if array.dtype.type not in _SUPPORTED_DTYPES:
            dtype = self._data.dtype if self._data is not None else _GradMode.default_dtype
            array = array.astype(dtype)
        if array.flags.writeable:
            array = array.view()
            array.flags.writeable = False
        self._data = array

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{grad})"

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError("item() needs a single-element tensor", self.shape)
        return float(self._data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data, False)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after backward()"""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> Dict["Tensor", np.ndarray]:
        return backward(self, retain_graph=retain_graph)

    # arithmetic
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, key):
        return GetItem.apply(self, key=key)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def relu(self):
        return Relu.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def abs(self):
        return Abs.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def clip(self, low: float, high: float):
        return Clip.apply(self, low=low, high=high)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    @property
    def T(self):
        return self.transpose()


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants; a constant takes the dtype of `like` when given"""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(_float_array(value, dtype), False)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("shapes are not broadcast-compatible", a.shape, b.shape) from None


class Function:
    """
    Base class for recorded operations.

    forward() receives the input arrays and returns the output array.
    backward() receives dL/d(output) and returns one entry per input:
    dL/d(input), or None where no gradient is needed.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        like = next((x for x in inputs if isinstance(x, Tensor)), None)
        tensors = tuple(as_tensor(x, like) for x in inputs)
        fn = cls(*tensors)
        out = np.asarray(fn.forward(*(t.data for t in tensors), **kwargs))
        requires_grad = _GradMode.enabled and any(t.requires_grad for t in tensors)
        result = Tensor._wrap(out, requires_grad)
        if requires_grad:
            result._ctx = fn
        return result


class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        if np.any(b == 0):
            raise DomainError("division by zero")
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return unbroadcast(grad_a, self.a.shape), unbroadcast(grad_b, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError(f"log of non-positive value (min {a.min():.6g})")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0).astype(a.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, a):
        self.out = expit(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad):
        return (grad * self.sign,)


class Sqrt(Function):
    def forward(self, a):
        if np.any(a < 0):
            raise DomainError(f"sqrt of negative value (min {a.min():.6g})")
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        if np.any(self.out == 0):
            raise DomainError("sqrt is not differentiable at 0")
        return (grad / (2.0 * self.out),)


class Pow(Function):
    def forward(self, a, exponent: float):
        self.a, self.exponent = a, exponent
        return np.power(a, exponent)

    def backward(self, grad):
        return (grad * self.exponent * np.power(self.a, self.exponent - 1.0),)


class Clip(Function):
    def forward(self, a, low: float, high: float):
        self.mask = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


class Sum(Function):
    def forward(self, a, axis=None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        out = np.mean(a, axis=axis, keepdims=keepdims)
        self.count = a.size // max(np.size(out), 1) if a.size else 1
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape to {tuple(shape)}", a.shape) from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a, key):
        self.shape, self.key, self.dtype = a.shape, key, a.dtype
        try:
            return a[key]
        except IndexError as e:
            raise ShapeError(f"invalid index ({e})", a.shape) from None

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(full, self.key, grad)
        return (full,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul inner dimensions differ", a.shape, b.shape)
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return unbroadcast(grad_a, self.a.shape), unbroadcast(grad_b, self.b.shape)


_ELEMENTWISE = {
    "add": Add,
    "sub": Sub,
    "mul": Mul,
    "div": Div,
    "exp": Exp,
    "log": Log,
    "neg": Neg,
    "relu": Relu,
    "sigmoid": Sigmoid,
    "abs": Abs,
    "sqrt": Sqrt,
}

_BINARY = {"add", "sub", "mul", "div"}


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply a named elementwise operation (binary ops broadcast over trailing dimensions)"""
    try:
        function = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op '{op}'") from None
    if op in _BINARY:
        if b is None:
            raise ValueError(f"'{op}' needs two operands")
        return function.apply(a, b)
    return function.apply(a)


class Graph:
    """The recorded operations reachable from an output, in topological order"""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in reversed(node._ctx.inputs):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)

    def leaves(self) -> List[Tensor]:
        return [node for node in self.nodes if node._ctx is None]


def backward(loss: Tensor, retain_graph: bool = False) -> Dict[Tensor, np.ndarray]:
    """
    Back-propagate from a scalar loss.

    Gradients are accumulated into `.grad` of every reachable leaf (and of
    non-leaves marked with retain_grad()). Returns the leaf -> gradient map.
    """
    if not isinstance(loss, Tensor):
        raise GraphError(f"backward() needs a Tensor, got {type(loss).__name__}")
    if loss.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    graph = Graph.trace(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    gradients: Dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        fn = node._ctx
        if fn is None or node._retain:
            node.grad = grad if node.grad is None else node.grad + grad
        if fn is None:
            gradients[node] = node.grad
            continue
        for parent, parent_grad in zip(fn.inputs, fn.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise GraphError(
                    f"{type(fn).__name__} produced a gradient of shape {parent_grad.shape} "
                    f"for an input of shape {parent.shape}"
                )
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
        if not retain_graph:
            node._ctx = None
    logger.debug("backward visited %d nodes", len(graph))
    return gradients
