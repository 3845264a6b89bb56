"""Minimal dense-tensor reverse-mode autodiff on top of numpy.

Tensors wrap a numpy array plus an optional gradient and a backward
closure.  The graph is built eagerly by the arithmetic helpers below and
walked once, in reverse topological order, by :meth:`Tensor.backward`.
Only the operations the network actually needs are implemented; all of
them support float32 and float64 arrays.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Shape-tagged numeric array participating in reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph machinery -----------------------------------------------------

    def _accumulate(self, grad: np.ndarray, owned: bool = False) -> None:
        # `owned` marks freshly allocated arrays the node may keep without a
        # copy; unflagged grads may be views into a consumer's buffer
        if self.grad is None:
            if owned and grad.dtype == self.data.dtype and grad.flags.writeable:
                self.grad = grad
            else:
                self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    def backward(self, grad=None) -> None:
        """Run reverse-mode differentiation from this (usually scalar) node."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad).astype(self.data.dtype, copy=False)

        # Iterative post-order topological sort; recursion would overflow on
        # deep training graphs.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ops ------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other, self.dtype)
        out = _node(self.data + other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.data.shape))
            out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _node(-self.data, (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(-g, owned=True)
        return out

    def __sub__(self, other):
        other = _wrap(other, self.dtype)
        out = _node(self.data - other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(-g, other.data.shape), owned=True)
            out._backward = backward
        return out

    def __rsub__(self, other):
        return _wrap(other, self.dtype) - self

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        out = _node(self.data * other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.data.shape), owned=True)
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.data.shape), owned=True)
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self.dtype)
        out = _node(self.data / other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g / other.data, self.data.shape), owned=True)
                if other.requires_grad:
                    other._accumulate(
                        _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape), owned=True
                    )
            out._backward = backward
        return out

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = _node(self.data ** exponent, (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(
                g * exponent * self.data ** (exponent - 1)
            )
        return out

    def __matmul__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self.data, other.data
        if a.ndim not in (1, 2) or b.ndim not in (1, 2):
            raise ValueError(f"matmul supports 1-D/2-D operands, got {a.ndim}-D @ {b.ndim}-D")
        out = _node(a @ b, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    if a.ndim == 2 and b.ndim == 2:
                        self._accumulate(g @ b.T, owned=True)
                    elif a.ndim == 2 and b.ndim == 1:
                        self._accumulate(np.outer(g, b), owned=True)
                    else:  # 1-D @ 2-D
                        self._accumulate(g @ b.T, owned=True)
                if other.requires_grad:
                    if a.ndim == 2 and b.ndim == 2:
                        other._accumulate(a.T @ g, owned=True)
                    elif a.ndim == 2 and b.ndim == 1:
                        other._accumulate(a.T @ g, owned=True)
                    else:
                        other._accumulate(np.outer(a, g), owned=True)
            out._backward = backward
        return out

    # -- elementwise functions -------------------------------------------------

    def relu(self) -> "Tensor":
        out = _node(np.maximum(self.data, 0), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * (self.data > 0), owned=True)
        return out

    def exp(self) -> "Tensor":
        value = np.exp(self.data)
        out = _node(value, (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * value, owned=True)
        return out

    def log(self) -> "Tensor":
        out = _node(np.log(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g / self.data, owned=True)
        return out

    def sqrt(self) -> "Tensor":
        value = np.sqrt(self.data)
        out = _node(value, (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * 0.5 / value, owned=True)
        return out

    def clamp_min(self, floor: float) -> "Tensor":
        """max(x, floor); gradient passes only where x > floor."""
        out = _node(np.maximum(self.data, floor), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * (self.data > floor), owned=True)
        return out

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            shape = self.data.shape

            def backward(g):
                if axis is None:
                    self._accumulate(np.broadcast_to(g, shape).astype(self.data.dtype, copy=False))
                else:
                    if not keepdims:
                        g = np.expand_dims(g, axis)
                    self._accumulate(np.broadcast_to(g, shape).astype(self.data.dtype, copy=False))

            out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        """Max along `axis`; ties route the gradient to the lowest index."""
        if self.data.shape[axis] == 0:
            raise ValueError("max over an empty axis")
        idx = np.argmax(self.data, axis=axis)
        picked = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis)
        value = picked if keepdims else np.squeeze(picked, axis=axis)
        out = _node(value, (self,))
        if out.requires_grad:
            def backward(g):
                if not keepdims:
                    g = np.expand_dims(g, axis)
                grad = np.zeros_like(self.data)
                np.put_along_axis(grad, np.expand_dims(idx, axis), g, axis)
                self._accumulate(grad, owned=True)
            out._backward = backward
        return out

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = _node(self.data.reshape(shape), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.reshape(old))
        return out

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ValueError("T is defined for 2-D tensors")
        out = _node(self.data.T.copy(), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.T)
        return out

    def take_rows(self, index) -> "Tensor":
        """Gather rows: out[i...] = self[index[i...]] with scatter-add backward."""
        index = np.asarray(index)
        if index.dtype.kind not in "iu":
            raise ValueError("take_rows needs an integer index array")
        if index.size and (index.min() < 0 or index.max() >= self.data.shape[0]):
            raise IndexError("take_rows index out of range")
        out = _node(self.data[index], (self,))
        if out.requires_grad:
            flat_index = index.reshape(-1)
            rest = self.data.shape[1:]
            # scatter plan depends only on the index: build it once here;
            # argsort + reduceat beats np.add.at and keeps the summation
            # order deterministic
            order = np.argsort(flat_index, kind="stable")
            uniq, starts = np.unique(flat_index[order], return_index=True)

            def backward(g):
                rows = g.reshape(flat_index.size, -1)
                sums = np.add.reduceat(rows[order], starts, axis=0)
                grad = np.zeros((self.data.shape[0], rows.shape[1]), dtype=g.dtype)
                grad[uniq] = sums
                self._accumulate(grad.reshape((self.data.shape[0],) + rest), owned=True)

            out._backward = backward
        return out

    def narrow_rows(self, start: int, stop: int) -> "Tensor":
        """View rows [start, stop); gradient is zero-padded back."""
        if not 0 <= start < stop <= self.data.shape[0]:
            raise ValueError(f"bad row range [{start}, {stop}) for {self.data.shape[0]} rows")
        out = _node(self.data[start:stop], (self,))
        if out.requires_grad:
            def backward(g):
                grad = np.zeros_like(self.data)
                grad[start:stop] = g
                self._accumulate(grad, owned=True)
            out._backward = backward
        return out

    def repeat_rows(self, count: int) -> "Tensor":
        """Repeat each row `count` times consecutively: (N, F) -> (N*count, F)."""
        if self.data.ndim != 2:
            raise ValueError("repeat_rows is defined for 2-D tensors")
        n, f = self.data.shape
        out = _node(np.repeat(self.data, count, axis=0), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.reshape(n, count, f).sum(axis=1), owned=True)
        return out

    def tile_rows(self, count: int) -> "Tensor":
        """Repeat a vector (or single row) into `count` identical rows."""
        row = self.data.reshape(1, -1)
        out = _node(np.broadcast_to(row, (count, row.shape[1])).copy(), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.sum(axis=0).reshape(self.data.shape))
        return out


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(_as_array(value).astype(dtype, copy=False))


def _node(data: np.ndarray, parents: tuple) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along `axis`, splitting the gradient back out."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of zero tensors")
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum(sizes)[:-1]

        def backward(g):
            for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
                if t.requires_grad:
                    t._accumulate(piece)

        out._backward = backward
    return out


def solve(matrix: Tensor, rhs: Tensor) -> Tensor:
    """Differentiable dense linear solve x = A^{-1} b (A square, b 1-D or 2-D)."""
    a, b = matrix.data, rhs.data
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"solve needs a square matrix, got {a.shape}")
    x = np.linalg.solve(a, b)
    out = _node(x, (matrix, rhs))
    if out.requires_grad:
        def backward(g):
            gb = np.linalg.solve(a.T, g)
            if rhs.requires_grad:
                rhs._accumulate(gb)
            if matrix.requires_grad:
                if x.ndim == 1:
                    matrix._accumulate(-np.outer(gb, x))
                else:
                    matrix._accumulate(-(gb @ x.T))
        out._backward = backward
    return out


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    """Filter an iterable down to the tensors marked trainable."""
    return [t for t in tensors if t.requires_grad]
