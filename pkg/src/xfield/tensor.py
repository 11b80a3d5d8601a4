"""Dense-tensor algebra with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous numpy float array. Operations compute
eagerly with numpy; when a ``Tape`` is active and an input is tracked
(a trainable leaf or the output of a tracked op), the op records a
vector-Jacobian callback so ``Tape.backward`` can accumulate gradients
in reverse execution order.

Training runs in float32. Gradient-check code builds float64 tensors;
every op preserves the dtype of its inputs, so no global mode switch
is needed.

Every forward op checks its output for NaN/Inf and raises
``NumericalError`` immediately: silent divergence is the failure mode
this library refuses to have. The check is a single vectorized
reduction (a full elementwise scan only runs to confirm a suspect
result before raising).
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

_node_ids = itertools.count()
_active_tape: "Tape | None" = None
_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf checking; returns the previous setting."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


def _check_finite(data: np.ndarray, op_name: str) -> None:
    if not _finite_checks or data.size == 0:
        return
    # One pass: a finite sum proves all entries finite. A non-finite sum
    # can also be float32 overflow of finite entries, so confirm before
    # raising.
    if not np.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NumericalError(
            f"{op_name} produced non-finite values "
            f"(shape {tuple(data.shape)}, dtype {data.dtype})"
        )


class Tensor:
    """A dense float array plus an identity on the gradient tape."""

    __slots__ = ("data", "node_id", "trainable")

    def __init__(self, data, trainable: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = np.ascontiguousarray(arr)
        self.node_id = next(_node_ids)
        self.trainable = trainable

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

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", trainable" if self.trainable else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype}{flag})"

    # arithmetic sugar; constants become untracked tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap ``x`` as an untracked Tensor (no-op if already a Tensor)."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tape:
    """Define-by-run gradient tape.

    Records ops in execution order (hence already topologically
    sorted); freed after each optimizer step. ``backward`` may run
    once per tape; a second call is a contract error.
    """

    def __init__(self):
        self._records: list[tuple[int, list[tuple[int, object]]]] = []
        self._tracked: set[int] = set()
        self._grads: dict[int, np.ndarray] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a Tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def watch(self, t: Tensor) -> None:
        self._tracked.add(t.node_id)

    def _tracks(self, t: Tensor) -> bool:
        if t.node_id in self._tracked:
            return True
        if t.trainable:
            self._tracked.add(t.node_id)
            return True
        return False

    def _record(self, out: Tensor, pulls: list[tuple[int, object]]) -> None:
        self._tracked.add(out.node_id)
        self._records.append((out.node_id, pulls))

    def backward(self, loss: Tensor) -> None:
        """Populate gradients for every tracked tensor reachable from ``loss``."""
        if self._consumed:
            raise ContractError("backward() already ran on this tape")
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {tuple(loss.shape)}")
        if loss.node_id not in self._tracked:
            raise ContractError("loss is not connected to this tape")
        self._consumed = True
        grads = self._grads
        grads[loss.node_id] = np.ones_like(loss.data)
        for out_id, pulls in reversed(self._records):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for parent_id, pull in pulls:
                contribution = pull(g)
                existing = grads.get(parent_id)
                grads[parent_id] = (
                    contribution if existing is None else existing + contribution
                )
        # What survives the sweep are leaf gradients (parameters/inputs).
        # Finiteness of what reaches parameters is enforced where the
        # gradients are consumed (the optimizer), keeping the sweep to
        # one pass per contribution.

    def grad(self, t: Tensor) -> np.ndarray | None:
        """Gradient buffer for ``t`` (leaves only survive the sweep)."""
        return self._grads.get(t.node_id)


def _result(data: np.ndarray, op_name: str) -> Tensor:
    _check_finite(data, op_name)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.node_id = next(_node_ids)
    t.trainable = False
    return t


def _maybe_record(out: Tensor, parents: list[tuple[Tensor, object]]) -> None:
    tape = _active_tape
    if tape is None:
        return
    pulls = [(p.node_id, pull) for p, pull in parents if tape._tracks(p)]
    if pulls:
        tape._record(out, pulls)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``g`` back to ``shape`` after a numpy-style broadcast."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gdim, sdim) in enumerate(zip(g.shape, shape)) if sdim == 1 and gdim != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data + b.data, "add")
    _maybe_record(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ],
    )
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data - b.data, "sub")
    _maybe_record(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(-g, b.data.shape)),
        ],
    )
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data * b.data, "mul")
    _maybe_record(
        out,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ],
    )
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data / b.data, "div")
    _maybe_record(
        out,
        [
            (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        ],
    )
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = _result(-a.data, "neg")
    _maybe_record(out, [(a, lambda g: -g)])
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is caught by the finite check
        out = _result(np.exp(a.data), "exp")
    out_data = out.data
    _maybe_record(out, [(a, lambda g: g * out_data)])
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = _result(np.log(a.data), "log")
    _maybe_record(out, [(a, lambda g: g / a.data)])
    return out


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):  # NaN inputs propagate, caught downstream
        out = _result(np.logaddexp(np.zeros((), dtype=a.dtype), a.data), "softplus")

    def pull(g):
        # d softplus / dx = sigmoid(x), in stable form
        with np.errstate(invalid="ignore"):
            return g * np.exp(-np.logaddexp(np.zeros((), dtype=a.dtype), -a.data))

    _maybe_record(out, [(a, pull)])
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """Gaussian error linear unit (tanh form)."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    out = _result(0.5 * x * (1.0 + t), "gelu")

    def pull(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)

    _maybe_record(out, [(a, pull)])
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product. Supports 2-D x 2-D, batched ND x ND with equal
    batch dims, and ND x 2-D (shared right operand, e.g. linear layers)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    if a.ndim != b.ndim and b.ndim != 2:
        raise ShapeError("batched matmul requires equal batch dims or a 2-D rhs")
    out = _result(a.data @ b.data, "matmul")

    def pull_a(g):
        return g @ np.swapaxes(b.data, -1, -2)

    def pull_b(g):
        if b.ndim == 2 and a.ndim > 2:
            n = a.data.shape[-1]
            return a.data.reshape(-1, n).T @ g.reshape(-1, g.shape[-1])
        return np.swapaxes(a.data, -1, -2) @ g

    _maybe_record(out, [(a, pull_a), (b, pull_b)])
    return out


def linear(x, w, b) -> Tensor:
    """x @ w + b with bias broadcast over leading dims."""
    return add(matmul(x, w), b)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``; slices sum to 1."""
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ContractError(f"softmax axis {axis} invalid for ndim {a.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    out = _result(out_data, "softmax")

    def pull(g):
        return out_data * (g - (g * out_data).sum(axis=axis, keepdims=True))

    _maybe_record(out, [(a, pull)])
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last (channel) axis to zero mean, unit variance,
    then apply the affine ``gain``/``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    c = x.data.shape[-1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise ShapeError("layer_norm gain/bias must match the channel dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _result(xhat * gain.data + bias.data, "layer_norm")

    def pull_x(g):
        dxhat = g * gain.data
        return inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )

    def pull_gain(g):
        return (g * xhat).reshape(-1, c).sum(axis=0)

    def pull_bias(g):
        return g.reshape(-1, c).sum(axis=0)

    _maybe_record(out, [(x, pull_x), (gain, pull_gain), (bias, pull_bias)])
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = _result(a.data.reshape(shape), "reshape")
    _maybe_record(out, [(a, lambda g: g.reshape(a.data.shape))])
    return out


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    # a strided view is enough; matmul and elementwise consumers handle it
    out = _result(a.data.transpose(axes), "transpose")
    _maybe_record(out, [(a, lambda g: g.transpose(inverse))])
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), "concat")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def make_pull(i):
        lo, hi = offsets[i], offsets[i + 1]

        def pull(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return pull

    _maybe_record(out, [(t, make_pull(i)) for i, t in enumerate(tensors)])
    return out


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing with gradient scatter on backward."""
    a = as_tensor(a)
    out = _result(np.ascontiguousarray(a.data[index]), "slice")

    def pull(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        return buf

    _maybe_record(out, [(a, pull)])
    return out


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), "reduce_sum")

    def pull(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).copy()

    _maybe_record(out, [(a, pull)])
    return out


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.mean(axis=axis, keepdims=keepdims), "reduce_mean")
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )

    def pull(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / count).astype(a.dtype, copy=False)

    _maybe_record(out, [(a, pull)])
    return out


def weighted_row_sum(table, index, weights) -> Tensor:
    """sum_j weights[j] * table[index[j]] over the leading axis of
    ``index``/``weights`` (both (J, P)); result (P, row_width).

    Fused form of take_rows -> mul -> reduce_sum used by the hash
    encoder; the backward pass scatter-adds weighted gradients into the
    table via bincount.
    """
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError("weighted_row_sum expects a 2-D table")
    index = np.asarray(index)
    weights = np.asarray(weights)
    if index.shape != weights.shape or index.ndim != 2:
        raise ShapeError("index and weights must share a (J, P) shape")
    data = table.data
    acc = data[index[0]] * weights[0][:, None]
    for j in range(1, index.shape[0]):
        acc += data[index[j]] * weights[j][:, None]
    out = _result(acc, "weighted_row_sum")
    n_rows, width = data.shape

    def pull(g):
        buf = np.zeros_like(data)
        flat_index = index.reshape(-1)
        # scale the incoming gradient by each corner's weight, then
        # accumulate per table row
        scaled = (g[None, :, :] * weights[:, :, None]).reshape(-1, width)
        for c in range(width):
            buf[:, c] = np.bincount(
                flat_index, weights=scaled[:, c], minlength=n_rows
            )
        return buf

    _maybe_record(out, [(table, pull)])
    return out


def take_rows(table, index) -> Tensor:
    """Gather rows ``table[index]``; backward scatter-adds into the table.

    ``index`` is an integer array of any shape; the result has shape
    ``index.shape + (row_width,)``.
    """
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError("take_rows expects a 2-D table")
    index = np.asarray(index)
    out = _result(table.data[index], "take_rows")
    width = table.data.shape[1]

    def pull(g):
        flat_index = index.ravel()
        flat_g = g.reshape(-1, width)
        buf = np.empty_like(table.data)
        for c in range(width):
            buf[:, c] = np.bincount(
                flat_index, weights=flat_g[:, c], minlength=table.data.shape[0]
            )
        return buf

    _maybe_record(out, [(table, pull)])
    return out
