"""Dense tensors with reverse-mode automatic differentiation.

Execution is eager: each op computes its numpy result immediately and, when
gradients are needed, appends a record (inputs, output, backward rule) to the
thread-local active tape. Records are appended in forward order, so the tape
is already topologically sorted and backward() is a single reverse sweep.
One tape serves one forward build; backward() consumes it and the next op
starts a fresh tape.

Every op validates that its output is finite and names itself in the error
otherwise; silent NaNs are never allowed to propagate.

Tensors hold float32 (training default) or float64 (gradient checks) data.
Integer inputs such as token ids are passed around as plain numpy arrays,
never as Tensors.
"""

from __future__ import annotations

import sys
import threading

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError, TapeError

DEFAULT_DTYPE = np.float32

# Buffer pool: op outputs are pinned by the tape for a whole step, so every
# intermediate would otherwise be a fresh (page-faulting) allocation. When a
# non-leaf Tensor dies and its array is provably unshared (owns its memory,
# no views, no outside references), the buffer is recycled for the next step.
_POOL_MAX_PER_KEY = 16
_pool: dict[tuple, list[np.ndarray]] = {}


def _alloc(shape: tuple, dtype) -> np.ndarray:
    lst = _pool.get((shape, np.dtype(dtype).char))
    if lst:
        try:
            return lst.pop()
        except IndexError:
            pass
    return np.empty(shape, dtype=dtype)


def _recycle_if_sole(arr: np.ndarray):
    """Pool a dead gradient buffer; refcount proves nothing else holds it.

    3 == the caller's local, this function's parameter, and getrefcount's
    own argument. Views or stored aliases raise the count and are skipped.
    """
    if (
        arr.base is None
        and arr.flags.owndata
        and arr.flags.c_contiguous
        and sys.getrefcount(arr) == 3
    ):
        key = (arr.shape, arr.dtype.char)
        lst = _pool.setdefault(key, [])
        if len(lst) < _POOL_MAX_PER_KEY:
            lst.append(arr)


def clear_buffer_pool():
    _pool.clear()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_leaf", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._leaf = True
        self._tape = None

    def __del__(self):
        try:
            data = self.data
            if (
                not self._leaf
                and data is not None
                and data.base is None
                and data.flags.owndata
                and data.flags.c_contiguous
                # 3 == the attribute, the local binding, getrefcount's argument
                and sys.getrefcount(data) == 3
            ):
                key = (data.shape, data.dtype.char)
                lst = _pool.setdefault(key, [])
                if len(lst) < _POOL_MAX_PER_KEY:
                    lst.append(data)
        except (AttributeError, TypeError):  # partial init or interpreter teardown
            pass

    @classmethod
    def _from_op(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._leaf = False
        t._tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered op records for one forward build; single-threaded by contract."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False


_state = threading.local()


def _recording_enabled() -> bool:
    return not getattr(_state, "no_grad", False)


def _active_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _state.tape = tape
    return tape


class no_grad:
    """Context manager that disables tape recording (eval / decoding)."""

    def __enter__(self):
        self._prev = getattr(_state, "no_grad", False)
        _state.no_grad = True
        return self

    def __exit__(self, *exc):
        _state.no_grad = self._prev
        return False


def _check_finite(arr: np.ndarray, op: str):
    # a non-finite entry always makes the sum non-finite; one pass, no temp
    if not np.isfinite(arr.sum()):
        raise NumericError(f"non-finite values produced by op '{op}'")


def _make(out_data, inputs, backward, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor._from_op(out_data)
    if _recording_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _active_tape()
        out._tape = tape
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ------------------------------------------------------------------ ops


def _matmul_raw(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    return np.matmul(a, b, out=_alloc(shape, np.result_type(a, b)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} x {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions do not match: {a.shape} x {b.shape}")
    out = _matmul_raw(a.data, b.data)

    def bwd(g):
        ga = _unbroadcast(_matmul_raw(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(_matmul_raw(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _make(out, (a, b), bwd, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    shape = np.broadcast_shapes(a.data.shape, b.data.shape)
    out = np.add(a.data, b.data, out=_alloc(shape, np.result_type(a.data, b.data)))

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    shape = np.broadcast_shapes(a.data.shape, b.data.shape)
    out = np.multiply(a.data, b.data, out=_alloc(shape, np.result_type(a.data, b.data)))

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out, (a, b), bwd, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = np.multiply(x.data, c, out=_alloc(x.data.shape, x.dtype))
    return _make(out, (x,), lambda g: (g * c,), "scale")


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape),), "sum")


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim == 0 or x.data.shape[-1] == 0:
        raise ShapeError(f"softmax: need a non-empty last axis, got shape {x.shape}")
    y = kernels.softmax_fwd(x.data)

    def bwd(g):
        return (kernels.softmax_bwd(y, g),)

    return _make(y, (x,), bwd, "softmax")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return _make(out, (x,), bwd, "log")


def relu(x: Tensor) -> Tensor:
    y = kernels.relu_fwd(x.data)
    return _make(y, (x,), lambda g: (kernels.relu_bwd(x.data, g),), "relu")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation; the backward differentiates the approximation itself
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        dy = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * dy,)

    return _make(y, (x,), bwd, "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.shape[-1] != gain.data.shape[-1] or gain.data.shape != bias.data.shape:
        raise ShapeError(
            f"layer_norm: gain/bias shape {gain.shape}/{bias.shape} does not match last axis of {x.shape}"
        )
    y, mean, rstd = kernels.layernorm_fwd(x.data, gain.data, bias.data, eps)

    def bwd(g):
        dx, dgain, dbias = kernels.layernorm_bwd(x.data, gain.data, mean, rstd, g)
        return dx, dgain, dbias

    return _make(y, (x, gain, bias), bwd, "layer_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    out = np.take(table.data, ids, axis=0,
                  out=_alloc(ids.shape + table.data.shape[1:], table.dtype))

    def bwd(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        return (buf,)

    return _make(out, (table,), bwd, "embedding")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ShapeError(f"dropout: rate must be < 1, got {rate}")
    draw_dtype = np.float32 if x.dtype == np.float32 else np.float64
    keep = (rng.random(x.data.shape, dtype=draw_dtype) >= rate).astype(x.dtype)
    keep *= 1.0 / (1.0 - rate)  # inverted scaling: eval path is identity
    out = np.multiply(x.data, keep, out=_alloc(x.data.shape, x.dtype))
    return _make(out, (x,), lambda g: (g * keep,), "dropout")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for i in range(len(sizes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make(out, tuple(tensors), bwd, "concat")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.data.shape),), "reshape")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    if out.shape != x.data.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} must broadcast into {x.shape}")

    def bwd(g):
        return (np.where(mask, np.zeros((), dtype=g.dtype), g),)

    return _make(out, (x,), bwd, "masked_fill")


def cross_entropy_nll(logits: Tensor, targets: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood per non-ignored target position.

    logits: (T, V); targets: (T,) int ids. exp() of the result is the
    sequence perplexity under this model.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_nll: logits must be (T, V), got {logits.shape}")
    targets = np.asarray(targets)
    if targets.ndim != 1 or targets.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            f"cross_entropy_nll: targets shape {targets.shape} does not match logits {logits.shape}"
        )
    n, v = logits.data.shape
    keep = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise NumericError("cross_entropy_nll: every position ignored, mean is undefined")
    kept_targets = targets[keep]
    if kept_targets.min() < 0 or kept_targets.max() >= v:
        raise ShapeError(f"cross_entropy_nll: target id outside [0, {v})")

    x = logits.data
    m = np.max(x, axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(x - m), axis=-1))
    nll = lse[keep] - x[keep, kept_targets]
    out = np.asarray(nll.sum() / n_keep, dtype=x.dtype)

    def bwd(g):
        probs = np.exp(x - lse[:, None])
        grad = probs
        grad[np.arange(n), targets.clip(0, v - 1)] -= 1.0
        grad[~keep] = 0.0
        grad *= np.asarray(g, dtype=x.dtype) / n_keep
        return (grad,)

    return _make(out, (logits,), bwd, "cross_entropy_nll")


# ------------------------------------------------------------- backward


def backward(loss: Tensor):
    """Populate .grad on every reachable requires_grad leaf; consumes the tape."""
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("backward: loss was not recorded on an active tape")
    if tape.consumed:
        raise TapeError("backward: tape already consumed; rebuild the forward graph")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.out), None)
        if g_out is None:
            continue
        for t, g in zip(rec.inputs, rec.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            if t._leaf:
                t.grad += g
                _recycle_if_sole(g)
            else:
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = g
                else:
                    # out-of-place: acc may alias a gradient still pending
                    # under another key (ops can return one buffer twice)
                    grads[id(t)] = np.add(acc, g, out=_alloc(acc.shape, np.result_type(acc, g)))
                    _recycle_if_sole(acc)
                    _recycle_if_sole(g)
        _recycle_if_sole(g_out)
    # break the tensor<->tape cycle so intermediates die (and recycle) now
    tape.records.clear()


def finite_diff_check(f, params: list[Tensor], epsilon: float, sample: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    f is called as f() and must return a scalar Tensor deterministically from
    the current values of `params`. With sample=None every coordinate is
    checked; otherwise up to `sample` coordinates per parameter are drawn
    with `rng` (large models make the full sweep impractical).
    """
    if epsilon <= 0:
        raise ShapeError(f"finite_diff_check: epsilon must be positive, got {epsilon}")
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data):
        raise NumericError("finite_diff_check: non-finite objective value")
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    def eval_scalar() -> float:
        with no_grad():
            out = float(f().data)
        if not np.isfinite(out):
            raise NumericError("finite_diff_check: non-finite objective value")
        return out

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        n = flat.shape[0]
        if sample is not None and n > sample:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=sample, replace=False)
        else:
            idxs = range(n)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = eval_scalar()
            flat[i] = orig - epsilon
            down = eval_scalar()
            flat[i] = orig
            g_fd = (up - down) / (2.0 * epsilon)
            denom = max(1e-8, abs(gflat[i]) + abs(g_fd))
            worst = max(worst, abs(gflat[i] - g_fd) / denom)
    return worst
