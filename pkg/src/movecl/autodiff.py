"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a Wengert list: while a ``Tape`` is active, every primitive
that touches a gradient-bearing tensor appends a backward closure to the
tape. ``backward(loss)`` seeds the loss gradient and replays the list in
reverse, visiting each entry exactly once. Execution order is topological
order, so no sorting is needed.

Scope is deliberately small: 0-d scalars, vectors and matrices, strict
shape rules (elementwise ops accept equal shapes or a scalar operand,
nothing in between), and exactly the primitives the layers and losses
need. Everything is float64; gradient checks and log-determinant
stability are worth more than speed at the scales this package targets.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """Operand values lie outside an operation's domain (e.g. log of <= 0)."""


class NumericError(ArithmeticError):
    """A numeric failure state: non-finite values or a failed factorization."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Entering the context clears the record, so a model can own a single
    tape and rebuild it each optimization step. Tapes are tracked
    per-thread; independent models on separate threads do not interact.
    """

    def __init__(self) -> None:
        self._entries: list[Callable[[], None]] = []

    def __enter__(self) -> "Tape":
        self._entries.clear()
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._entries.append(backward_fn)

    def __len__(self) -> int:
        return len(self._entries)


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def value(self) -> np.ndarray:
        """The raw array, detached from any gradient bookkeeping."""
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce_mean(self, axis)

    # operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable[[], None]) -> None:
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    out.requires_grad = True
    out._tape = tape
    tape.record(backward_fn)


def assert_finite(t: Tensor, context: str) -> Tensor:
    """Raise ``NumericError`` naming ``context`` if ``t`` holds NaN or Inf."""
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"{context}: non-finite values encountered")
    return t


# --------------------------------------------------------------------------
# elementwise primitives
# --------------------------------------------------------------------------


def _check_binary(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are neither equal nor scalar")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.ndim == 0 and g.ndim > 0:
        return np.sum(g)
    return g


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary(a, b, "add")
    out = Tensor(a.data + b.data)

    def bw():
        if out.grad is None:
            return
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad, b))

    _record(out, (a, b), bw)
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bw():
        if out.grad is None:
            return
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-out.grad, b))

    _record(out, (a, b), bw)
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bw():
        if out.grad is None:
            return
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad * b.data, a))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad * a.data, b))

    _record(out, (a, b), bw)
    return out


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary(a, b, "div")
    out = Tensor(a.data / b.data)

    def bw():
        if out.grad is None:
            return
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad / b.data, a))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b))

    _record(out, (a, b), bw)
    return out


def exp(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.exp(a.data))

    def bw():
        if out.grad is None:
            return
        _accumulate(a, out.grad * out.data)

    _record(out, (a,), bw)
    return out


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    out = Tensor(np.log(a.data))

    def bw():
        if out.grad is None:
            return
        _accumulate(a, out.grad / a.data)

    _record(out, (a,), bw)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably; derivative is the logistic sigmoid."""
    a = _coerce(a)
    out = Tensor(np.logaddexp(0.0, a.data))

    def bw():
        if out.grad is None:
            return
        _accumulate(a, out.grad * _sigmoid(a.data))

    _record(out, (a,), bw)
    return out


def leaky_relu(a, alpha: float = 0.01) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.where(a.data > 0.0, a.data, alpha * a.data))

    def bw():
        if out.grad is None:
            return
        _accumulate(a, out.grad * np.where(a.data > 0.0, 1.0, alpha))

    _record(out, (a,), bw)
    return out


def xlogx(a) -> Tensor:
    """x * log(x) with the continuous extension xlogx(0) = 0.

    Inputs must be non-negative (probabilities). The subgradient at 0 is
    taken as 0, which is safe for entropy terms fed by softmax outputs.
    """
    a = _coerce(a)
    if np.any(a.data < 0.0):
        raise DomainError("xlogx: input must be non-negative")
    positive = a.data > 0.0
    safe = np.where(positive, a.data, 1.0)
    out = Tensor(np.where(positive, a.data * np.log(safe), 0.0))

    def bw():
        if out.grad is None:
            return
        _accumulate(a, out.grad * np.where(positive, np.log(safe) + 1.0, 0.0))

    _record(out, (a,), bw)
    return out


# --------------------------------------------------------------------------
# linear algebra and structural primitives
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw():
        if out.grad is None:
            return
        if a.requires_grad:
            _accumulate(a, out.grad @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ out.grad)

    _record(out, (a, b), bw)
    return out


def add_bias(a, bias) -> Tensor:
    """Row-wise bias: (n, d) + (d,). The one sanctioned non-scalar broadcast."""
    a, bias = _coerce(a), _coerce(bias)
    if a.ndim != 2 or bias.ndim != 1 or a.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {a.shape} and {bias.shape}")
    out = Tensor(a.data + bias.data[np.newaxis, :])

    def bw():
        if out.grad is None:
            return
        if a.requires_grad:
            _accumulate(a, out.grad)
        if bias.requires_grad:
            _accumulate(bias, out.grad.sum(axis=0))

    _record(out, (a, bias), bw)
    return out


def scale_rows(a, s) -> Tensor:
    """Scale row i of ``a`` (n, d) by scalar ``s[i]`` (n,)."""
    a, s = _coerce(a), _coerce(s)
    if a.ndim != 2 or s.ndim != 1 or a.shape[0] != s.shape[0]:
        raise ShapeError(f"scale_rows: incompatible shapes {a.shape} and {s.shape}")
    out = Tensor(a.data * s.data[:, np.newaxis])

    def bw():
        if out.grad is None:
            return
        if a.requires_grad:
            _accumulate(a, out.grad * s.data[:, np.newaxis])
        if s.requires_grad:
            _accumulate(s, np.sum(out.grad * a.data, axis=1))

    _record(out, (a, s), bw)
    return out


def gather_rows(a, indices) -> Tensor:
    """Select rows ``a[indices]``; backward scatter-adds into the source rows."""
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows: need a matrix and 1-d indices, got {a.shape}")
    out = Tensor(a.data[idx])

    def bw():
        if out.grad is None:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, out.grad)

    _record(out, (a,), bw)
    return out


def scatter_rows(values, indices, n_rows: int) -> Tensor:
    """Place ``values`` rows at ``indices`` in an (n_rows, d) zero matrix.

    Duplicate indices accumulate.
    """
    values = _coerce(values)
    idx = np.asarray(indices, dtype=np.intp)
    if values.ndim != 2 or idx.ndim != 1 or idx.shape[0] != values.shape[0]:
        raise ShapeError("scatter_rows: values and indices disagree")
    data = np.zeros((n_rows, values.shape[1]), dtype=np.float64)
    np.add.at(data, idx, values.data)
    out = Tensor(data)

    def bw():
        if out.grad is None:
            return
        _accumulate(values, out.grad[idx])

    _record(out, (values,), bw)
    return out


def gather_elements(a, rows, cols) -> Tensor:
    """Pick ``a[rows[i], cols[i]]`` into a vector."""
    a = _coerce(a)
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    if a.ndim != 2 or r.shape != c.shape or r.ndim != 1:
        raise ShapeError("gather_elements: need a matrix and matching index vectors")
    out = Tensor(a.data[r, c])

    def bw():
        if out.grad is None:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (r, c), out.grad)

    _record(out, (a,), bw)
    return out


def stack_matrix(grid) -> Tensor:
    """Assemble a matrix from a grid of scalar tensors / floats.

    The same scalar tensor may appear in several cells (e.g. a symmetric
    kernel); its gradient accumulates over every placement.
    """
    rows = len(grid)
    cols = len(grid[0])
    cells: list[list[Tensor]] = [[_coerce(x) for x in row] for row in grid]
    for row in cells:
        if len(row) != cols:
            raise ShapeError("stack_matrix: ragged grid")
        for cell in row:
            if cell.ndim != 0:
                raise ShapeError("stack_matrix: every cell must be a scalar")
    data = np.array([[cell.data for cell in row] for row in cells], dtype=np.float64)
    out = Tensor(data)
    inputs = [cell for row in cells for cell in row]

    def bw():
        if out.grad is None:
            return
        for i in range(rows):
            for j in range(cols):
                cell = cells[i][j]
                if cell.requires_grad:
                    _accumulate(cell, out.grad[i, j])

    _record(out, inputs, bw)
    return out


# --------------------------------------------------------------------------
# reductions and normalizations
# --------------------------------------------------------------------------


def _check_axis(a: Tensor, axis: int | None, name: str) -> int | None:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{name}: axis {axis} invalid for shape {a.shape}")
    return axis % a.ndim


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = _coerce(a)
    axis = _check_axis(a, axis, "sum")
    out = Tensor(np.sum(a.data, axis=axis))

    def bw():
        if out.grad is None:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(out.grad, a.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(out.grad, axis), a.shape).copy())

    _record(out, (a,), bw)
    return out


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = _coerce(a)
    axis = _check_axis(a, axis, "mean")
    out = Tensor(np.mean(a.data, axis=axis))
    n = a.size if axis is None else a.shape[axis]

    def bw():
        if out.grad is None:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(out.grad / n, a.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(out.grad / n, axis), a.shape).copy())

    _record(out, (a,), bw)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax; rows along ``axis`` sum to one."""
    a = _coerce(a)
    axis = _check_axis(a, axis, "softmax")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / np.sum(e, axis=axis, keepdims=True))

    def bw():
        if out.grad is None:
            return
        inner = np.sum(out.grad * out.data, axis=axis, keepdims=True)
        _accumulate(a, out.data * (out.grad - inner))

    _record(out, (a,), bw)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _coerce(a)
    axis = _check_axis(a, axis, "log_softmax")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = Tensor(shifted - lse)

    def bw():
        if out.grad is None:
            return
        gsum = np.sum(out.grad, axis=axis, keepdims=True)
        _accumulate(a, out.grad - np.exp(out.data) * gsum)

    _record(out, (a,), bw)
    return out


def neg_logdet_psd(a, jitter: float = 1e-6, max_jitter: float = 1e-3) -> Tensor:
    """-log det(A + jitter*I) for a symmetric PSD matrix A.

    Factorizes via Cholesky, escalating the jitter tenfold (up to
    ``max_jitter``) if the factorization fails; the gradient with respect
    to A is -(A + jitter*I)^-1 at the jitter actually used.
    """
    a = _coerce(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"neg_logdet_psd: expected a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("neg_logdet_psd: non-finite matrix entries")
    if not np.allclose(a.data, a.data.T, rtol=0.0, atol=1e-10):
        raise ShapeError("neg_logdet_psd: matrix is not symmetric")
    j = jitter
    eye = np.eye(a.shape[0])
    while True:
        try:
            chol = np.linalg.cholesky(a.data + j * eye)
            break
        except np.linalg.LinAlgError:
            j *= 10.0
            if j > max_jitter * (1.0 + 1e-12):
                raise NumericError(
                    f"neg_logdet_psd: factorization failed up to jitter {max_jitter:g}"
                ) from None
    out = Tensor(-2.0 * np.sum(np.log(np.diag(chol))))
    shifted = a.data + j * eye

    def bw():
        if out.grad is None:
            return
        _accumulate(a, float(out.grad) * -np.linalg.inv(shifted))

    _record(out, (a,), bw)
    return out


# --------------------------------------------------------------------------
# backward pass and gradient checking
# --------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate gradients of everything reachable from a scalar ``loss``."""
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    tape = loss._tape
    if tape is None:
        return
    for entry in reversed(tape._entries):
        entry()


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a
    scalar tensor; it is invoked under a tape managed here, so it must not
    open its own. Returns the worst elementwise discrepancy
    ``|fd - grad| / max(1, |fd|, |grad|)`` over all parameters.
    """
    for p in params:
        p.grad = None
    with Tape():
        loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = float(f().data)
            flat[i] = saved - eps
            f_minus = float(f().data)
            flat[i] = saved
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(fd - gflat[i]) / max(1.0, abs(fd), abs(gflat[i]))
            worst = max(worst, err)
    return worst
