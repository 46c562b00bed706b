"""
A minimal reverse-mode autodiff tensor over numpy float64 arrays.

Each operation records its parents and a backward closure; calling
`backward()` on a scalar output walks the recorded graph in reverse
topological order and accumulates `.grad` on every tensor that requires
it. The graph is released after one backward pass.

Graph-specific operations (constant sparse products, row gathers and
scatters, per-segment softmax) are what the message-passing layers need.
"""

from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from errors import NoRecordedForward


def _noop():
    return None


class Tensor:
    """A reverse-mode autodiff tensor.

    - Broadcasting elementwise ops, matmul, reductions
    - Keeps the graph via parents + backward closures
    """

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad: bool = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._backward: Callable[[], None] = _noop
        self._parents: Tuple['Tensor', ...] = tuple()
        self.name = name

    # --- convenience ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> 'Tensor':
        return self.transpose()

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{req}{nm})"

    def detach(self) -> 'Tensor':
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # --- graph utilities ---
    def _ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray):
        self._ensure_grad()
        self.grad += g

    def _result(self, data: np.ndarray, *parents: 'Tensor') -> 'Tensor':
        out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
        out._parents = tuple(parents)
        return out

    @staticmethod
    def _lift(value: Any) -> 'Tensor':
        return value if isinstance(value, Tensor) else Tensor(value)

    @staticmethod
    def _unbroadcast(g: np.ndarray, target_shape: Tuple[int, ...]) -> np.ndarray:
        if g.shape == target_shape:
            return g
        while g.ndim > len(target_shape):
            g = g.sum(axis=0)
        for i, (gs, ts) in enumerate(zip(g.shape, target_shape)):
            if ts == 1 and gs != 1:
                g = g.sum(axis=i, keepdims=True)
        return g

    def _topological_order(self) -> List['Tensor']:
        order: List[Tensor] = []
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
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    # --- autograd core ---
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self._parents:
            raise NoRecordedForward("backward() called on a tensor with no recorded forward pass")
        if grad is None:
            if self.data.size != 1:
                raise NoRecordedForward("grad must be provided for non-scalar outputs")
            seed = np.ones_like(self.data)
        else:
            seed = np.array(grad, dtype=np.float64)

        order = self._topological_order()
        self._accumulate(seed)
        for node in reversed(order):
            if node.grad is not None:
                node._backward()
        for node in order:
            node._backward = _noop
            node._parents = tuple()

    # ------------------------------
    # Elementwise ops
    # ------------------------------
    def __add__(self, other: Any) -> 'Tensor':
        other = self._lift(other)
        out = self._result(self.data + other.data, self, other)

        def _bw():
            if self.requires_grad:
                self._accumulate(self._unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other._accumulate(self._unbroadcast(out.grad, other.shape))
        out._backward = _bw
        return out

    def __radd__(self, other: Any) -> 'Tensor':
        return self.__add__(other)

    def __neg__(self) -> 'Tensor':
        return self * -1.0

    def __sub__(self, other: Any) -> 'Tensor':
        return self + (-self._lift(other))

    def __rsub__(self, other: Any) -> 'Tensor':
        return self._lift(other) + (-self)

    def __mul__(self, other: Any) -> 'Tensor':
        other = self._lift(other)
        out = self._result(self.data * other.data, self, other)

        def _bw():
            if self.requires_grad:
                self._accumulate(self._unbroadcast(out.grad * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(self._unbroadcast(out.grad * self.data, other.shape))
        out._backward = _bw
        return out

    def __rmul__(self, other: Any) -> 'Tensor':
        return self.__mul__(other)

    def __pow__(self, exponent: float) -> 'Tensor':
        out = self._result(self.data ** exponent, self)

        def _bw():
            if self.requires_grad:
                self._accumulate(out.grad * exponent * self.data ** (exponent - 1))
        out._backward = _bw
        return out

    def __matmul__(self, other: Any) -> 'Tensor':
        other = self._lift(other)
        out = self._result(self.data @ other.data, self, other)

        def _bw():
            if self.requires_grad:
                self._accumulate(out.grad @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ out.grad)
        out._backward = _bw
        return out

    def relu(self) -> 'Tensor':
        return self.leaky_relu(0.0)

    def leaky_relu(self, slope: float = 0.01) -> 'Tensor':
        factor = np.where(self.data > 0, 1.0, slope)
        out = self._result(self.data * factor, self)

        def _bw():
            if self.requires_grad:
                self._accumulate(out.grad * factor)
        out._backward = _bw
        return out

    # ------------------------------
    # Shape ops and reductions
    # ------------------------------
    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> 'Tensor':
        out = self._result(self.data.sum(axis=axis, keepdims=keepdims), self)

        def _bw():
            if self.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.shape).copy())
        out._backward = _bw
        return out

    def mean(self, axis: Optional[int] = None) -> 'Tensor':
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)

    def reshape(self, *shape: int) -> 'Tensor':
        out = self._result(self.data.reshape(*shape), self)

        def _bw():
            if self.requires_grad:
                self._accumulate(out.grad.reshape(self.shape))
        out._backward = _bw
        return out

    def transpose(self) -> 'Tensor':
        out = self._result(self.data.T, self)

        def _bw():
            if self.requires_grad:
                self._accumulate(out.grad.T)
        out._backward = _bw
        return out

    def take_rows(self, index: np.ndarray) -> 'Tensor':
        """Gather rows; repeated indices accumulate gradient"""
        index = np.asarray(index, dtype=np.int64)
        out = self._result(self.data[index], self)

        def _bw():
            if self.requires_grad:
                g = np.zeros_like(self.data)
                np.add.at(g, index, out.grad)
                self._accumulate(g)
        out._backward = _bw
        return out


# ------------------------------
# Graph operations
# ------------------------------

def sparse_matmul(matrix: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse (or dense) operator times a tensor"""
    out = x._result(np.asarray(matrix @ x.data), x)
    transposed = matrix.T

    def _bw():
        if x.requires_grad:
            x._accumulate(np.asarray(transposed @ out.grad))
    out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out = tensors[0]._result(np.concatenate([t.data for t in tensors], axis=axis), *tensors)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _bw():
        for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(np.take(out.grad, np.arange(start, stop), axis=axis))
    out._backward = _bw
    return out


def scatter_rows_sum(x: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """out[index[e]] += x[e]"""
    index = np.asarray(index, dtype=np.int64)
    data = np.zeros((n_rows,) + x.shape[1:])
    np.add.at(data, index, x.data)
    out = x._result(data, x)

    def _bw():
        if x.requires_grad:
            x._accumulate(out.grad[index])
    out._backward = _bw
    return out


def segment_softmax(scores: Tensor, segment_starts: np.ndarray) -> Tensor:
    """Softmax over consecutive row segments, column-wise; every segment must be nonempty"""
    starts = np.asarray(segment_starts, dtype=np.int64)
    lengths = np.diff(np.append(starts, scores.shape[0]))
    peak = np.repeat(np.maximum.reduceat(scores.data, starts, axis=0), lengths, axis=0)
    weights = np.exp(scores.data - peak)
    totals = np.repeat(np.add.reduceat(weights, starts, axis=0), lengths, axis=0)
    alpha = weights / totals
    out = scores._result(alpha, scores)

    def _bw():
        if scores.requires_grad:
            inner = np.repeat(np.add.reduceat(out.grad * alpha, starts, axis=0), lengths, axis=0)
            scores._accumulate(alpha * (out.grad - inner))
    out._backward = _bw
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0"""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return x * keep
