"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations only record onto a :class:`Tape` when one is active and at least
one input requires a gradient, so anything computed outside a tape (teacher
forwards, cached snapshots) is detached by construction.

There is no broadcasting. Every binary elementwise op demands identical
shapes; shape adaptation goes through :func:`reshape`, :func:`matmul` with a
ones column, or :func:`take`.
"""

from __future__ import annotations

import contextvars
import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class NonFiniteError(ValueError):
    """An operation produced NaN or Inf."""


class DomainError(ValueError):
    """An operation was applied outside its mathematical domain."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class ZeroRowWarning(RuntimeWarning):
    """Row normalization met an all-zero row and left it at zero."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "stsc_active_tape", default=None
)


class Tensor:
    """Immutable n-d array of float64 values.

    Args:
        data: anything ``np.asarray`` accepts.
        requires_grad: mark as a differentiable leaf (a parameter).
    """

    __slots__ = ("data", "requires_grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Skip the copy for freshly computed op outputs.
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return np.array(self.data)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of primitive operations for one forward pass.

    Use as a context manager; ops executed inside the ``with`` block append a
    node whose inputs were all created earlier, so list order is a valid
    topological order. A tape belongs to the thread that created it.
    """

    nodes: list[_Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(
        self, loss: Tensor, params: Sequence[Tensor] | None = None
    ) -> dict[Tensor, Tensor]:
        """Gradients of a scalar ``loss`` with respect to leaf tensors.

        With ``params`` given, the map has exactly those keys (zeros where the
        loss does not depend on a parameter). Otherwise it holds every leaf
        with ``requires_grad`` that the loss reaches. Leaves that never
        required a gradient are absent. The tape is not modified, so repeated
        calls return identical maps.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        if loss._tape is self:
            grads[id(loss)] = np.ones_like(loss.data)
        elif loss.requires_grad:
            leaves[id(loss)] = loss
            grads[id(loss)] = np.ones_like(loss.data)
        produced = {id(n.out) for n in self.nodes}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if key not in produced:
                    leaves[key] = inp
        if params is not None:
            return {
                p: Tensor._wrap(grads[id(p)] if id(p) in grads else np.zeros(p.shape))
                for p in params
            }
        return {t: Tensor._wrap(grads[k]) for k, t in leaves.items() if k in grads}


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Gradient map for ``loss`` using the tape that produced it.

    A loss that was not built on any tape (for example a constant) has zero
    gradient for every requested parameter.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if params is None:
            return {loss: Tensor._wrap(np.ones_like(loss.data))} if loss.requires_grad else {}
        return {p: Tensor._wrap(np.ones_like(p.data) if p is loss else np.zeros(p.shape)) for p in params}
    return loss._tape.backward(loss, params)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced NaN or Inf")
    return arr


def _emit(out_data: np.ndarray, op: str, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor._wrap(_finite(out_data, op))
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, vjp)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _require_2d(op: str, a: Tensor) -> None:
    if a.ndim != 2:
        raise ShapeError(f"{op}: expected a 2-D tensor, got shape {a.shape}")


# --- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a`` (m×k) and ``b`` (k×n)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _emit(A @ B, "matmul", (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a: Tensor) -> Tensor:
    _require_2d("transpose", a)
    return _emit(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _emit(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def take(a: Tensor, rows: Sequence[int], cols: Sequence[int] | None = None) -> Tensor:
    """Select rows (and optionally columns) of a 2-D tensor.

    ``take(r, s, s)`` is the sub-block ``r[s, s]``. Indices may repeat;
    the adjoint accumulates.
    """
    _require_2d("take", a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.arange(a.shape[1]) if cols is None else np.asarray(cols, dtype=np.intp)
    for name, idx, n in (("row", rows, a.shape[0]), ("column", cols, a.shape[1])):
        if idx.size and (idx.min() < -n or idx.max() >= n):
            raise IndexError(f"take: {name} index out of range for shape {a.shape}")
    ix = np.ix_(rows, cols)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, ix, g)
        return (out,)

    return _emit(a.data[ix], "take", (a,), vjp)


def gather_columns(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[:, index]`` for an integer index array of any shape, flattened per row."""
    _require_2d("gather_columns", a)
    index = np.asarray(index, dtype=np.intp)
    flat = index.reshape(-1)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, (slice(None), flat), g)
        return (out,)

    return _emit(a.data[:, flat], "gather_columns", (a,), vjp)


# --- elementwise ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit(A * B, "mul", (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated stably; derivative is sigmoid(x)."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(out, "softplus", (a,), lambda g: (g * s,))


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    _require_2d("softmax", a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit(p, "softmax", (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax, stable for large logit margins."""
    _require_2d("log_softmax", a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _emit(out, "log_softmax", (a,), vjp)


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log: input has non-positive entries")
    return _emit(np.log(x), "log", (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _emit(x * x, "square", (a,), lambda g: (2.0 * g * x,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _emit(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return _emit(
        np.asarray(a.data.sum() / n), "mean", (a,), lambda g: (np.full(shape, float(g) / n),)
    )


def row_l2_normalize(m: Tensor) -> Tensor:
    """Divide every row of a 2-D tensor by its Euclidean norm.

    All-zero rows stay zero (and pass zero gradient); a
    :class:`ZeroRowWarning` lists them.
    """
    _require_2d("row_l2_normalize", m)
    x = m.data
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    zero = norms[:, 0] == 0.0
    if zero.any():
        warnings.warn(
            f"row_l2_normalize: zero rows {np.flatnonzero(zero).tolist()} left at zero",
            ZeroRowWarning,
            stacklevel=2,
        )
    safe = np.where(norms == 0.0, 1.0, norms)
    y = np.where(norms == 0.0, 0.0, x / safe)

    def vjp(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / safe,)

    return _emit(y, "row_l2_normalize", (m,), vjp)


def zero_rows(m: Tensor | np.ndarray) -> frozenset[int]:
    """Indices of all-zero rows."""
    x = m.data if isinstance(m, Tensor) else np.asarray(m)
    return frozenset(int(i) for i in np.flatnonzero(~x.any(axis=1)))


# --- helpers built from primitives ---------------------------------------


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.ones(tuple(shape)))


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape)))


def add_row_vector(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` (length n) repeated over the rows of ``x`` (B×n).

    Spelled as an outer product with a ones column so no implicit
    broadcasting is involved.
    """
    _require_2d("add_row_vector", x)
    if b.shape != (x.shape[1],):
        raise ShapeError(f"add_row_vector: bias {b.shape} does not fit rows of {x.shape}")
    tiled = matmul(ones((x.shape[0], 1)), reshape(b, (1, b.shape[0])))
    return add(x, tiled)


# --- finite differences --------------------------------------------------


def finite_difference_grad(
    f: Callable[[Tensor], Tensor | float], x: Tensor | np.ndarray, eps: float = 1e-5
) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Runs entirely off-tape and shares nothing with :meth:`Tape.backward`,
    which makes it usable as an independent oracle.
    """
    if eps <= 0:
        raise ContractError("finite_difference_grad: eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.empty_like(flat)

    def value(arr: np.ndarray) -> float:
        token = _ACTIVE_TAPE.set(None)
        try:
            out = f(Tensor(arr.reshape(base.shape)))
        finally:
            _ACTIVE_TAPE.reset(token)
        return out.item() if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value(flat)
        flat[i] = orig - eps
        lo = value(flat)
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
    return Tensor._wrap(grad.reshape(base.shape))


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic.data if isinstance(analytic, Tensor) else analytic)
    n = np.asarray(numeric.data if isinstance(numeric, Tensor) else numeric)
    if a.shape != n.shape:
        raise ShapeError(f"max_relative_error: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


# --- serialization -------------------------------------------------------

_U64 = struct.Struct("<Q")


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    """Shape header (dim count, then dims, as little-endian uint64) + LE float64 payload."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    header = _U64.pack(arr.ndim) + b"".join(_U64.pack(d) for d in arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor starting at ``offset``; returns it and the next offset."""
    try:
        (ndim,) = _U64.unpack_from(buf, offset)
        offset += 8
        shape = tuple(_U64.unpack_from(buf, offset + 8 * i)[0] for i in range(ndim))
    except struct.error as exc:
        raise ValueError("truncated tensor header") from exc
    offset += 8 * ndim
    count = int(np.prod(shape)) if shape else 1
    end = offset + 8 * count
    if end > len(buf):
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape)
    return Tensor(arr.astype(np.float64)), end


def write_tensors(path, tensors: Iterable[Tensor | np.ndarray]) -> None:
    items = list(tensors)
    with open(path, "wb") as fh:
        fh.write(_U64.pack(len(items)))
        for t in items:
            fh.write(tensor_to_bytes(t))


def read_tensors(path) -> list[Tensor]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8:
        raise ValueError(f"{path}: not a tensor file")
    (n,) = _U64.unpack_from(buf, 0)
    offset, out = 8, []
    for _ in range(n):
        t, offset = tensor_from_bytes(buf, offset)
        out.append(t)
    if offset != len(buf):
        raise ValueError(f"{path}: trailing bytes after {n} tensors")
    return out
