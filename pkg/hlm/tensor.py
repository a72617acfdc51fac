"""Dense tensors with a reverse-mode tape.

Ops only record while a ``Tape`` is active::

    with Tape() as tape:
        loss = objective(forward(params, batch))
    tape.backward(loss)

Outside a tape every op runs in inference mode and builds no graph. Each op
returns a fresh array; recorded tensors are never written to afterwards, so
they may be read from several threads.

Broadcasting is limited to adding a bias vector over the last axis and to
scaling by a Python scalar. Anything else with mismatching shapes raises
``ShapeError``.
"""

from __future__ import annotations

import contextlib
import logging
from contextvars import ContextVar
from typing import Any, Callable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from hlm.constants import GELU_CUBIC, GELU_SQRT_2_OVER_PI
from hlm.errors import ContractError, NumericError, ShapeError, TokenIndexError

logger = logging.getLogger(__name__)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

BackwardFn = Callable[[np.ndarray], Sequence[Any]]


class RowGrad(NamedTuple):
    """Sparse gradient for a row gather: ``values[t]`` belongs to row ``rows[t]``."""

    rows: np.ndarray
    values: np.ndarray
    shape: tuple[int, ...]

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values.dtype)
        np.add.at(out, self.rows, self.values)
        return out


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Any = None,
        name: str | None = None,
    ) -> None:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: TapeOp | None = None
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype} requires_grad={self.requires_grad}>"

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def check_finite(self, what: str = "tensor") -> Tensor:
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what} {self.shape}")
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return add(self, neg(other))

    def __neg__(self) -> Tensor:
        return neg(self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes: int) -> Tensor:
        return permute(self, axes)

    def sum(self) -> Tensor:
        return sum_all(self)

    def mean(self) -> Tensor:
        return mean_all(self)


class TapeOp(NamedTuple):
    index: int
    tape: Tape
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


_active_tape: ContextVar[Tape | None] = ContextVar("hlm_active_tape", default=None)


class Tape:
    """Ordered record of differentiable ops; one backward pass per tape."""

    def __init__(self) -> None:
        self.ops: list[TapeOp] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> Tape:
        if _active_tape.get() is not None:
            raise ContractError("a tape is already recording in this context")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.ops)

    def append(
        self, inputs: tuple[Tensor, ...], output: Tensor, fn: BackwardFn
    ) -> TapeOp:
        op = TapeOp(len(self.ops), self, inputs, output, fn)
        self.ops.append(op)
        return op

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for op in self.ops:
            for t in op.inputs:
                if t.requires_grad and t.is_leaf:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, root: Tensor) -> None:
        if root.node is None or root.node.tape is not self:
            raise ContractError("root was not recorded on this tape")
        backward(root)


def is_recording() -> bool:
    return _active_tape.get() is not None


class AllocationTracker:
    """Counts op-allocated buffers: activations and intermediate gradients.

    Leaf parameter gradients are not counted; they are parameter-sized and
    exist regardless of which loss produced them.
    """

    def __init__(self) -> None:
        self.total_bytes = 0
        self.peak_bytes = 0
        self.shapes: list[tuple[int, ...]] = []

    def add(self, arr: np.ndarray) -> None:
        self.total_bytes += arr.nbytes
        self.peak_bytes = max(self.peak_bytes, arr.nbytes)
        self.shapes.append(arr.shape)

    def has_dim(self, size: int) -> bool:
        return any(size in shape for shape in self.shapes)


_trackers: ContextVar[tuple[AllocationTracker, ...]] = ContextVar(
    "hlm_trackers", default=()
)


@contextlib.contextmanager
def track_allocations() -> Iterator[AllocationTracker]:
    tracker = AllocationTracker()
    token = _trackers.set(_trackers.get() + (tracker,))
    try:
        yield tracker
    finally:
        _trackers.reset(token)


def _account(arr: np.ndarray) -> None:
    for tracker in _trackers.get():
        tracker.add(arr)


def record(value: np.ndarray, inputs: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    """Wrap an op result; ``fn`` maps the output gradient to one gradient per input.

    ``fn`` may return ``None`` for inputs that need no gradient and a
    ``RowGrad`` for sparse row updates.
    """
    _account(value)
    tape = _active_tape.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs_grad)
    if needs_grad:
        out.node = tape.append(tuple(inputs), out, fn)
    return out


def backward(root: Tensor) -> None:
    """Populate ``grad`` of every requires-grad leaf recorded on the root's tape.

    Leaf gradients are zeroed first, so leaves the root does not depend on end
    up with zeros. A tape can be walked once; run the forward pass again
    before the next backward.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if root.node is None:
        raise ContractError("root is not on a tape; run the forward pass inside Tape()")
    tape = root.node.tape
    if tape.consumed:
        raise ContractError("backward already ran on this tape; re-run the forward pass")
    tape.consumed = True

    for leaf in tape.leaves():
        leaf.grad = np.zeros_like(leaf.data)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for op in reversed(tape.ops[: root.node.index + 1]):
        g = pending.pop(id(op.output), None)
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                if isinstance(gi, RowGrad):
                    np.add.at(inp.grad, gi.rows, gi.values)
                else:
                    inp.grad += gi
                continue
            if isinstance(gi, RowGrad):
                gi = gi.dense()
            prev = pending.get(id(inp))
            if prev is None:
                _account(gi)
                pending[id(inp)] = gi
            else:
                pending[id(inp)] = prev + gi
    tape.ops.clear()


def _same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"dtype mismatch: {sorted(str(d) for d in dtypes)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last axis."""
    _same_dtype(a, b)
    if a.shape == b.shape:
        return record(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 3-d operands multiply pairwise over a shared leading axis."""
    _same_dtype(a, b)
    ok = a.ndim == b.ndim and a.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and a.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if not ok:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return record(a.data @ b.data, (a, b), fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        value = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    return record(value, (a,), lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    value = np.ascontiguousarray(a.data.transpose(axes))
    return record(value, (a,), lambda g: (g.transpose(inverse),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {a.shape}")
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows of a matrix; the backward pass scatter-adds, summing repeats."""
    rows = np.asarray(rows, dtype=np.int64)
    if a.ndim != 2 or rows.ndim != 1:
        raise ShapeError(f"take_rows needs a matrix and a 1-d index, got {a.shape}")
    return record(a.data[rows], (a,), lambda g: (RowGrad(rows, g, a.shape),))


def embedding_lookup(table: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    n_rows = table.shape[0]
    bad = ids[(ids < 0) | (ids >= n_rows)]
    if bad.size:
        raise TokenIndexError(f"token id {int(bad[0])} outside [0, {n_rows})")
    return take_rows(table, ids)


def pick(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Entries ``a[rows[t], cols[t]]`` as a vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if a.ndim != 2 or rows.shape != cols.shape:
        raise ShapeError(f"pick needs a matrix and matching indices, got {a.shape}")

    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return record(a.data[rows, cols], (a,), fn)


def sum_all(a: Tensor) -> Tensor:
    return record(a.data.sum(), (a,), lambda g: (np.full_like(a.data, g),))


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean of an empty tensor")
    n = a.size
    return record(a.data.mean(), (a,), lambda g: (np.full_like(a.data, g / n),))


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise ``x - logsumexp(x)`` over the last axis, max-shifted."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"log_softmax needs a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return record(out, (x,), fn)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcast over leading axes) keeps True entries.

    Masked entries are exactly zero, so they contribute nothing downstream.
    """
    data = x.data
    if mask is not None:
        data = np.where(mask, data, -np.inf)
    e = np.exp(data - data.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record(out, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    _same_dtype(x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {d}"
        )
    if eps <= 0:
        raise ShapeError("layer_norm eps must be positive")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    lead = tuple(range(x.ndim - 1))

    def fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(xhat * gamma.data + beta.data, (x, gamma, beta), fn)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3)))."""
    c = x.dtype.type(GELU_SQRT_2_OVER_PI)
    k = x.dtype.type(GELU_CUBIC)
    u = x.data
    t = np.tanh(c * (u + k * u**3))
    out = 0.5 * u * (1 + t)

    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        du = 0.5 * (1 + t) + 0.5 * u * (1 - t**2) * c * (1 + 3 * k * u**2)
        return (g * du,)

    return record(out, (x,), fn)


def grad_check(
    f: Callable[[Any], Tensor],
    theta: Any,
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error between tape gradients and central differences.

    The error at a coordinate is ``|a - n| / max(floor, |a| + |n|)``.
    ``max_coords`` samples that many coordinates per parameter instead of
    checking all of them.
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    params = [t for _, t in theta.items()] if hasattr(theta, "items") else list(theta)
    for p in params:
        if p.dtype != np.float64:
            raise ContractError("grad_check runs in float64")

    with Tape():
        root = f(theta)
    root.check_finite("objective")
    backward(root)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    def evaluate() -> float:
        value = f(theta).item()
        if not np.isfinite(value):
            raise NumericError("objective became non-finite under perturbation")
        return value

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        coords: Iterable[int] = range(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        flat = p.data.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = evaluate()
            flat[i] = orig - h
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            err = abs(a.flat[i] - numeric) / max(floor, abs(a.flat[i]) + abs(numeric))
            worst = max(worst, float(err))
    logger.debug("grad_check max relative error %.3e", worst)
    return worst
