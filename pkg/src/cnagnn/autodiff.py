"""Dense 2-D float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a backward closure on
the output tensor; the graph is rebuilt from scratch on every forward pass.
``backward(loss)`` topologically sorts the recorded operations and runs their
backward rules once, accumulating gradients additively into every tensor with
``requires_grad`` that is reachable from the loss.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "absolute",
    "reduce_sum",
    "reduce_mean",
    "repeat_rows",
    "row_select",
    "row_scatter",
    "backward",
    "finite_difference_check",
    "record_op",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _as_matrix(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got array of ndim {arr.ndim}")
    return arr


class Tensor:
    """A (rows, cols) float64 matrix that can participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_matrix(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{tag})"

    # Operator sugar; scalars are accepted where a pointwise scale/shift is meant.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def relu(self) -> "Tensor":
        return relu(self)

    def abs(self) -> "Tensor":
        return absolute(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce_mean(self, axis)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A trainable leaf; ``group`` selects the learning rate in the optimizer."""

    __slots__ = ("group",)

    GROUPS = ("weights", "activation_coeffs")

    def __init__(self, data, group: str = "weights"):
        if group not in self.GROUPS:
            raise ContractError(f"unknown parameter group {group!r}")
        super().__init__(data, requires_grad=True)
        self.group = group


def record_op(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], None],
    op: str,
) -> Tensor:
    """Wrap an op result, verifying finiteness and attaching the backward rule.

    ``backward_fn`` receives the upstream gradient and must accumulate into
    the inputs via :func:`accumulate`. Recording is skipped when gradients are
    globally disabled or no input needs them.
    """
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by op {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out._inputs = tuple(inputs)
        out._backward = backward_fn
    else:
        out._inputs = ()
        out._backward = None
    out._op = op
    return out


def accumulate(t: Tensor, grad: np.ndarray) -> None:
    """Add ``grad`` into ``t.grad``, allocating the buffer on first use."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def _coerce(other) -> Tensor:
    if isinstance(other, Tensor):
        return other
    return Tensor(other)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a @ b."""
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(grad):
        accumulate(a, grad @ b.data.T)
        accumulate(b, a.data.T @ grad)

    return record_op(out_data, (a, b), backward_fn, "matmul")


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b)
    _check_same_shape(a, b, "add")

    def backward_fn(grad):
        accumulate(a, grad)
        accumulate(b, grad)

    return record_op(a.data + b.data, (a, b), backward_fn, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b)
    _check_same_shape(a, b, "sub")

    def backward_fn(grad):
        accumulate(a, grad)
        accumulate(b, -grad)

    return record_op(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    _check_same_shape(a, b, "mul")

    def backward_fn(grad):
        accumulate(a, grad * b.data)
        accumulate(b, grad * a.data)

    return record_op(a.data * b.data, (a, b), backward_fn, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply every entry by the constant ``s``."""
    s = float(s)

    def backward_fn(grad):
        accumulate(a, grad * s)

    return record_op(a.data * s, (a,), backward_fn, "scale")


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is 0."""
    mask = a.data > 0.0

    def backward_fn(grad):
        accumulate(a, grad * mask)

    return record_op(np.where(mask, a.data, 0.0), (a,), backward_fn, "relu")


def absolute(a: Tensor) -> Tensor:
    """|x|; the subgradient at 0 is 0 (sign convention)."""
    sign = np.sign(a.data)

    def backward_fn(grad):
        accumulate(a, grad * sign)

    return record_op(np.abs(a.data), (a,), backward_fn, "abs")


def _reduce(a: Tensor, axis: int | None, take_mean: bool, op: str) -> Tensor:
    if axis not in (None, 0, 1):
        raise ContractError(f"{op}: axis must be None, 0 or 1, got {axis!r}")
    if axis is None:
        extent = a.data.size
        out_data = np.array([[a.data.sum()]])
    else:
        extent = a.shape[axis]
        out_data = a.data.sum(axis=axis, keepdims=True)
    if take_mean:
        out_data = out_data / extent

    def backward_fn(grad):
        g = np.broadcast_to(grad, a.shape).copy()
        if take_mean:
            g /= extent
        accumulate(a, g)

    return record_op(out_data, (a,), backward_fn, op)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over all entries (axis=None), down columns (0) or across rows (1)."""
    return _reduce(a, axis, take_mean=False, op="sum")


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Mean over the reduced extent; backward divides the broadcast gradient."""
    return _reduce(a, axis, take_mean=True, op="mean")


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """Tile a (1, d) row vector to (n, d); backward sums gradients over rows."""
    if a.rows != 1:
        raise DimensionError(f"repeat_rows needs a single row, got shape {a.shape}")

    def backward_fn(grad):
        accumulate(a, grad.sum(axis=0, keepdims=True))

    return record_op(np.broadcast_to(a.data, (n, a.cols)).copy(), (a,), backward_fn, "repeat_rows")


def row_select(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather the given rows; backward scatter-adds into the source rows."""
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= a.rows):
        raise DimensionError(f"row_select: index out of range for {a.rows} rows")

    def backward_fn(grad):
        full = np.zeros_like(a.data)
        np.add.at(full, index, grad)
        accumulate(a, full)

    return record_op(a.data[index], (a,), backward_fn, "row_select")


def row_scatter(num_rows: int, parts: Sequence[Tensor], indices: Sequence[np.ndarray]) -> Tensor:
    """Assemble a (num_rows, d) tensor from row blocks placed at given indices.

    The index arrays must be disjoint and together cover every row exactly once.
    """
    if len(parts) != len(indices):
        raise ContractError("row_scatter: one index array per part required")
    cols = parts[0].cols
    out_data = np.empty((num_rows, cols))
    seen = np.zeros(num_rows, dtype=bool)
    idx_arrays = [np.asarray(ix, dtype=np.intp) for ix in indices]
    for part, ix in zip(parts, idx_arrays):
        if part.cols != cols:
            raise DimensionError("row_scatter: parts must share their column count")
        if ix.size != part.rows:
            raise DimensionError("row_scatter: index length must match part rows")
        if seen[ix].any():
            raise ContractError("row_scatter: overlapping row indices")
        seen[ix] = True
        out_data[ix] = part.data
    if not seen.all():
        raise ContractError("row_scatter: indices do not cover every row")

    def backward_fn(grad):
        for part, ix in zip(parts, idx_arrays):
            accumulate(part, grad[ix])

    return record_op(out_data, tuple(parts), backward_fn, "row_scatter")


def _topo_order(loss: Tensor) -> list[Tensor]:
    # Iterative DFS; depth-32 models create graphs deeper than the recursion limit allows.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._inputs:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively, so a tensor feeding several consumers
    receives the sum of their contributions. Call ``zero_grad`` on parameters
    between optimizer steps.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
    order = _topo_order(loss)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += 1.0
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # Non-leaf buffers are only needed within this pass; leaves keep their grads.
    for node in order:
        if node._backward is not None:
            node.grad = None


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-3,
) -> float:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    tensor built from the given parameter tensors. Returns the maximum
    relative error over every parameter entry, with the relative denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ContractError("finite_difference_check: step must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.shape != (1, 1):
        raise ContractError("finite_difference_check: f must return a scalar tensor")
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    def value() -> float:
        with no_grad():
            return f().item()

    worst = 0.0
    for p, grads in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            f_plus = value()
            flat[i] = original - step
            f_minus = value()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            ana = grads.reshape(-1)[i]
            denom = max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, abs(ana - numeric) / denom)
    return worst
