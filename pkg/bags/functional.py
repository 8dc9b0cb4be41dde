"""Differentiable operations beyond elementwise arithmetic"""
from typing import Optional, Sequence

import numpy as np

from bags.errors import ShapeError
from bags.tensor import Function, MatMul, Tensor, as_tensor


def _check_axis(axis: int, ndim: int, shape) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range", shape)
    return axis % ndim


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)"""
    return MatMul.apply(a, b)


class Softmax(Function):
    def forward(self, a, axis: int = -1):
        self.axis = _check_axis(axis, a.ndim, a.shape)
        shifted = a - np.max(a, axis=self.axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=self.axis, keepdims=True)
        return self.out

    def backward(self, grad):
        inner = np.sum(grad * self.out, axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


def softmax(a, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


class Conv2d(Function):
    """
    Cross-correlation of a C_in x H x W map with C_out x C_in x k x k weights.

    Zero padding of (k - 1) / 2 keeps the spatial size. The kernel loop runs
    over the k*k offsets in a fixed order, each offset contracting the channel
    axis with tensordot.
    """

    def forward(self, x, weight, bias=None):
        if x.ndim != 3 or weight.ndim != 4:
            raise ShapeError("conv2d expects C x H x W input and C_out x C_in x k x k weights", x.shape, weight.shape)
        c_out, c_in, kh, kw = weight.shape
        if kh != kw or kh % 2 == 0:
            raise ShapeError("conv2d kernels must be square with odd size", weight.shape)
        if c_in != x.shape[0]:
            raise ShapeError("conv2d input channels differ from weight channels", x.shape, weight.shape)
        if bias is not None and bias.shape != (c_out,):
            raise ShapeError("conv2d bias must have one entry per output channel", bias.shape, (c_out,))

        pad = kh // 2
        _, h, w = x.shape
        padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        out = np.zeros((c_out, h, w), dtype=np.result_type(x, weight))
        for dy in range(kh):
            for dx in range(kw):
                out += np.tensordot(weight[:, :, dy, dx], padded[:, dy:dy + h, dx:dx + w], axes=([1], [0]))
        if bias is not None:
            out += bias[:, None, None]
        self.padded, self.weight, self.pad = padded, weight, pad
        return out

    def backward(self, grad):
        c_out, c_in, k, _ = self.weight.shape
        h, w = grad.shape[1:]
        grad_weight = np.zeros_like(self.weight)
        grad_padded = np.zeros_like(self.padded)
        for dy in range(k):
            for dx in range(k):
                window = self.padded[:, dy:dy + h, dx:dx + w]
                grad_weight[:, :, dy, dx] = np.tensordot(grad, window, axes=([1, 2], [1, 2]))
                grad_padded[:, dy:dy + h, dx:dx + w] += np.tensordot(self.weight[:, :, dy, dx], grad, axes=([0], [0]))
        p = self.pad
        grad_x = grad_padded[:, p:p + h, p:p + w]
        if len(self.inputs) == 3:
            return grad_x, grad_weight, grad.sum(axis=(1, 2))
        return grad_x, grad_weight


def conv2d(x, weight, bias=None) -> Tensor:
    if bias is None:
        return Conv2d.apply(x, weight)
    return Conv2d.apply(x, weight, bias)


class Concat(Function):
    def forward(self, *arrays, axis: int = 0):
        ref = arrays[0]
        self.axis = _check_axis(axis, ref.ndim, ref.shape)
        for other in arrays[1:]:
            if other.ndim != ref.ndim or any(
                a != b for i, (a, b) in enumerate(zip(ref.shape, other.shape)) if i != self.axis
            ):
                raise ShapeError(f"concat along axis {axis} needs matching shapes", ref.shape, other.shape)
        self.sizes = [a.shape[self.axis] for a in arrays]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)


class Stack(Function):
    def forward(self, *arrays, axis: int = 0):
        ref = arrays[0]
        for other in arrays[1:]:
            if other.shape != ref.shape:
                raise ShapeError("stack needs equal shapes", ref.shape, other.shape)
        self.axis = _check_axis(axis, ref.ndim + 1, ref.shape)
        return np.stack(arrays, axis=self.axis)

    def backward(self, grad):
        return tuple(np.take(grad, i, axis=self.axis) for i in range(grad.shape[self.axis]))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    return Stack.apply(*tensors, axis=axis)


class ValidFilter(Function):
    """Correlate every channel of a C x H x W map with one fixed 2D window, no padding"""

    def forward(self, x, window: np.ndarray):
        k_h, k_w = window.shape
        if x.ndim != 3 or x.shape[1] < k_h or x.shape[2] < k_w:
            raise ShapeError("image smaller than the filter window", x.shape, window.shape)
        out_h, out_w = x.shape[1] - k_h + 1, x.shape[2] - k_w + 1
        out = np.zeros((x.shape[0], out_h, out_w), dtype=x.dtype)
        for dy in range(k_h):
            for dx in range(k_w):
                out += window[dy, dx] * x[:, dy:dy + out_h, dx:dx + out_w]
        self.shape, self.window = x.shape, window
        return out

    def backward(self, grad):
        k_h, k_w = self.window.shape
        out_h, out_w = grad.shape[1:]
        grad_x = np.zeros(self.shape, dtype=grad.dtype)
        for dy in range(k_h):
            for dx in range(k_w):
                grad_x[:, dy:dy + out_h, dx:dx + out_w] += self.window[dy, dx] * grad
        return (grad_x,)


def filter_valid(x, window: np.ndarray) -> Tensor:
    return ValidFilter.apply(x, window=np.asarray(window, dtype=as_tensor(x).dtype))


class Quantile(Function):
    """
    Linearly interpolated quantile of all entries (numpy's default "linear" method).

    The gradient flows to the one or two order statistics the value is
    interpolated from.
    """

    def forward(self, a, q: float):
        if not 0.0 <= q <= 1.0:
            raise ValueError(f"quantile must be in [0, 1], got {q}")
        flat = a.ravel()
        if flat.size == 0:
            raise ShapeError("quantile of an empty tensor", a.shape)
        order = np.argsort(flat, kind="stable")
        position = q * (flat.size - 1)
        lo = int(np.floor(position))
        hi = min(lo + 1, flat.size - 1)
        frac = position - lo
        self.shape, self.lo, self.hi, self.frac = a.shape, order[lo], order[hi], frac
        return np.asarray((1.0 - frac) * flat[order[lo]] + frac * flat[order[hi]], dtype=a.dtype)

    def backward(self, grad):
        out = np.zeros(int(np.prod(self.shape)), dtype=grad.dtype)
        out[self.lo] += (1.0 - self.frac) * grad
        out[self.hi] += self.frac * grad
        return (out.reshape(self.shape),)


def quantile(a, q: float) -> Tensor:
    return Quantile.apply(a, q=float(q))


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select from a where mask holds, from b elsewhere (mask is a constant)"""
    mask = np.asarray(mask, dtype=bool)
    keep = as_tensor(mask.astype(as_tensor(a).dtype))
    return a * keep + b * (1.0 - keep)


def linear(x, weight, bias: Optional[Tensor] = None) -> Tensor:
    """Rows of x (N x in) through an in x out weight matrix"""
    out = matmul(x, weight)
    return out if bias is None else out + bias
