"""Small reverse-mode autodiff engine on float64 numpy arrays.

Feature maps are laid out (N, C, X, Y, Z). Every op records its parents and a
closure that pushes the output gradient back to them; Tensor.backward walks the
graph in reverse topological order.
"""

import itertools
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from models.errors import InvalidInputError

ArrayLike = Union[np.ndarray, float, int]

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording the graph (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise InvalidInputError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)

        def backward(g: np.ndarray) -> None:
            self._accumulate(g)
            other._accumulate(g)

        return _result(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return _result(-self.data, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)

        def backward(g: np.ndarray) -> None:
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)

        return _result(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)

        def backward(g: np.ndarray) -> None:
            self._accumulate(g / other.data)
            other._accumulate(-g * self.data / (other.data * other.data))

        return _result(self.data / other.data, (self, other), backward)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        exponent = float(exponent)

        def backward(g: np.ndarray) -> None:
            self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        return _result(self.data ** exponent, (self,), backward)

    # reductions / shape ---------------------------------------------------

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        def backward(g: np.ndarray) -> None:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))

        return _result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        total = self.data.size if axis is None else int(np.prod([self.data.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / total)

    def reshape(self, *shape: int) -> "Tensor":
        original = self.data.shape
        return _result(self.data.reshape(*shape), (self,), lambda g: self._accumulate(g.reshape(original)))

    # nonlinearities -------------------------------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return _result(self.data * mask, (self,), lambda g: self._accumulate(g * mask))

    def sigmoid(self) -> "Tensor":
        out = 1.0 / (1.0 + np.exp(-self.data))
        return _result(out, (self,), lambda g: self._accumulate(g * out * (1.0 - out)))


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable[[np.ndarray], None]) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(g[tuple(index)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# Volumetric layers
# ---------------------------------------------------------------------------


def _check_feature_map(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise InvalidInputError(f"{what} expects (N, C, X, Y, Z) input, got shape {x.shape}")


def conv3d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: Union[int, str] = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 3D cross-correlation; w has shape (C_out, C_in / groups, kx, ky, kz)."""
    _check_feature_map(x, "conv3d")
    n, c_in, *spatial = x.shape
    c_out, c_in_g, *kernel = w.shape
    if groups < 1 or c_in % groups or c_out % groups or c_in // groups != c_in_g:
        raise InvalidInputError(
            f"conv3d channel mismatch: input {c_in}, weight {w.shape}, groups {groups}"
        )
    if padding == "same":
        if any(k % 2 == 0 for k in kernel):
            raise InvalidInputError("'same' padding needs odd kernels")
        pad = [k // 2 for k in kernel]
    else:
        pad = [int(padding)] * 3
    out_spatial = [(s + 2 * p - k) // stride + 1 for s, p, k in zip(spatial, pad, kernel)]
    if any(o < 1 for o in out_spatial):
        raise InvalidInputError(f"conv3d output would be empty for input {x.shape} and kernel {kernel}")
    c_out_g = c_out // groups
    padded = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    offsets = list(itertools.product(*(range(k) for k in kernel)))

    def window(arr: np.ndarray, offset: Tuple[int, int, int]) -> Tuple[slice, ...]:
        return tuple(slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(offset, out_spatial))

    out = np.zeros((n, c_out, *out_spatial))
    for g in range(groups):
        x_g = padded[:, g * c_in_g:(g + 1) * c_in_g]
        w_g = w.data[g * c_out_g:(g + 1) * c_out_g]
        acc = out[:, g * c_out_g:(g + 1) * c_out_g]
        for off in offsets:
            patch = x_g[(slice(None), slice(None)) + window(x_g, off)]
            acc += np.moveaxis(np.tensordot(w_g[(slice(None), slice(None)) + off], patch, axes=([1], [1])), 0, 1)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g_out: np.ndarray) -> None:
        grad_pad = np.zeros_like(padded)
        grad_w = np.zeros_like(w.data)
        for g in range(groups):
            x_g = padded[:, g * c_in_g:(g + 1) * c_in_g]
            w_g = w.data[g * c_out_g:(g + 1) * c_out_g]
            go = g_out[:, g * c_out_g:(g + 1) * c_out_g]
            gx_g = grad_pad[:, g * c_in_g:(g + 1) * c_in_g]
            for off in offsets:
                win = (slice(None), slice(None)) + window(x_g, off)
                grad_w[(slice(g * c_out_g, (g + 1) * c_out_g), slice(None)) + off] += np.tensordot(
                    go, x_g[win], axes=([0, 2, 3, 4], [0, 2, 3, 4])
                )
                if x.requires_grad:
                    gx_g[win] += np.moveaxis(
                        np.tensordot(w_g[(slice(None), slice(None)) + off], go, axes=([0], [1])), 0, 1
                    )
        crop = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(pad, spatial))
        x._accumulate(grad_pad[crop])
        w._accumulate(grad_w)
        if bias is not None:
            bias._accumulate(g_out.sum(axis=(0, 2, 3, 4)))

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, backward)


def max_pool3d(x: Tensor) -> Tensor:
    """2^3 max pooling, stride 2; gradient goes to the first maximal element."""
    _check_feature_map(x, "max_pool3d")
    n, c, sx, sy, sz = x.shape
    if sx % 2 or sy % 2 or sz % 2:
        raise InvalidInputError(f"max_pool3d needs even spatial dims, got {(sx, sy, sz)}")
    blocks = x.data.reshape(n, c, sx // 2, 2, sy // 2, 2, sz // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    flat = blocks.reshape(n, c, sx // 2, sy // 2, sz // 2, 8)
    arg = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, arg, axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        routed = np.zeros_like(flat)
        np.put_along_axis(routed, arg, g[..., None], axis=-1)
        routed = routed.reshape(n, c, sx // 2, sy // 2, sz // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        x._accumulate(routed.reshape(n, c, sx, sy, sz))

    return _result(out, (x,), backward)


def conv_transpose3d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """2^3 transposed convolution with stride 2; w has shape (C_in, C_out, 2, 2, 2)."""
    _check_feature_map(x, "conv_transpose3d")
    n, c_in, sx, sy, sz = x.shape
    if w.ndim != 5 or w.shape[0] != c_in or w.shape[2:] != (2, 2, 2):
        raise InvalidInputError(f"transposed conv weight {w.shape} does not fit input {x.shape}")
    c_out = w.shape[1]
    offsets = list(itertools.product(range(2), repeat=3))
    out = np.zeros((n, c_out, 2 * sx, 2 * sy, 2 * sz))
    for i, j, k in offsets:
        out[:, :, i::2, j::2, k::2] = np.moveaxis(np.tensordot(x.data, w.data[:, :, i, j, k], axes=([1], [0])), -1, 1)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g: np.ndarray) -> None:
        grad_x = np.zeros_like(x.data)
        grad_w = np.zeros_like(w.data)
        for i, j, k in offsets:
            g_sub = g[:, :, i::2, j::2, k::2]
            grad_x += np.moveaxis(np.tensordot(g_sub, w.data[:, :, i, j, k], axes=([1], [1])), -1, 1)
            grad_w[:, :, i, j, k] = np.tensordot(x.data, g_sub, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        x._accumulate(grad_x)
        w._accumulate(grad_w)
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3, 4)))

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, backward)
