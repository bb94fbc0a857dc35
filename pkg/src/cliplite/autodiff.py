"""Dense float64 tensors with a tape-based reverse-mode differentiator.

Usage::

    w = Tensor.param(np.zeros(3))
    with Tape() as tape:
        loss = reduce("sum", softplus(w))
    tape.backward(loss)
    w.grad  # -> sigmoid(0) everywhere

Outside an active tape every op computes eagerly without recording, which is
what evaluation code relies on. A tape records one forward pass and may be
replayed backward exactly once.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "BACKWARD_RULES",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "softplus",
    "exp",
    "log",
    "negate",
    "linear",
    "matmul",
    "transpose",
    "reshape",
    "gather_rows",
    "normalize_rows",
    "conv2d",
    "reduce",
    "backward",
    "check_gradients",
    "GradCheckReport",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Row-major float64 array plus the bookkeeping needed for backprop.

    ``requires_grad`` marks leaves whose gradient should be accumulated into
    ``grad``. Intermediate results carry the id of the tape node that
    produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape", "_retain")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None
        self._retain = False

    @classmethod
    def param(cls, data) -> "Tensor":
        return cls(data, requires_grad=True)

    @classmethod
    def _from_op(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t.node_id = None
        t._tape = None
        t._retain = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf result after backward."""
        self._retain = True
        if self._tape is not None:
            self._tape.watch(self)
        return self

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._from_op(np.asarray(x, dtype=np.float64))


# --------------------------------------------------------------------------
# computation record


@dataclass
class Entry:
    op: str
    inputs: tuple[int, ...]
    output: int
    saved: dict = field(default_factory=dict)


class Tape:
    """Ordered record of the ops executed while the tape is active."""

    def __init__(self) -> None:
        self.entries: list[Entry] = []
        self._leaves: dict[int, tuple[int, Tensor]] = {}
        self._retained: dict[int, Tensor] = {}
        self._shapes: list[tuple[int, ...]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _new_node(self, shape) -> int:
        self._shapes.append(tuple(shape))
        return len(self._shapes) - 1

    def _node_of(self, t: Tensor) -> int | None:
        if t._tape is self and t.node_id is not None:
            return t.node_id
        if t.requires_grad:
            hit = self._leaves.get(id(t))
            if hit is None:
                nid = self._new_node(t.shape)
                self._leaves[id(t)] = (nid, t)
                return nid
            return hit[0]
        return None

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, **saved) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that was already replayed")
        ids = tuple(-1 if (n := self._node_of(t)) is None else n for t in inputs)
        if all(i < 0 for i in ids):
            return
        nid = self._new_node(out.shape)
        out.node_id = nid
        out._tape = self
        saved["needs"] = tuple(i >= 0 for i in ids)
        self.entries.append(Entry(op, ids, nid, saved))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
        if self.consumed:
            raise TapeError("backward called twice on a consumed tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g_out = grads.pop(entry.output, None)
            kept = self._retained.get(entry.output)
            if kept is not None:
                kept.grad = np.zeros(self._shapes[entry.output]) if g_out is None else g_out.copy()
            if g_out is None:
                continue
            rule = BACKWARD_RULES[entry.op]
            g_in = rule(g_out, entry.saved)
            for nid, g in zip(entry.inputs, g_in):
                if nid < 0 or g is None:
                    continue
                if not np.isfinite(g).all():
                    raise NonFiniteError(f"non-finite gradient flowing out of {entry.op}")
                if nid in grads:
                    grads[nid] = grads[nid] + g
                else:
                    grads[nid] = g
        for nid, t in self._leaves.values():
            g = grads.get(nid)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.consumed = True
        self.entries.clear()

    def watch(self, t: Tensor) -> None:
        if t._tape is self and t.node_id is not None:
            self._retained[t.node_id] = t


def backward(loss: Tensor) -> None:
    if loss._tape is None:
        raise TapeError("loss has no computation record")
    loss._tape.backward(loss)


def _finish(op: str, out: np.ndarray, inputs: Sequence[Tensor], **saved) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced NaN or Inf")
    t = Tensor._from_op(out)
    tape = _active_tape()
    if tape is not None:
        tape.record(op, inputs, t, **saved)
    return t


# --------------------------------------------------------------------------
# elementwise

BACKWARD_RULES: dict[str, Callable[[np.ndarray, dict], tuple]] = {}


def _rule(name):
    def deco(fn):
        BACKWARD_RULES[name] = fn
        return fn

    return deco


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data + b.data
    return _finish("add", out, (a, b), sa=a.shape, sb=b.shape)


@_rule("add")
def _add_back(g, s):
    return _unbroadcast(g, s["sa"]), _unbroadcast(g, s["sb"])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data - b.data
    return _finish("sub", out, (a, b), sa=a.shape, sb=b.shape)


@_rule("sub")
def _sub_back(g, s):
    return _unbroadcast(g, s["sa"]), -_unbroadcast(g, s["sb"])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data * b.data
    return _finish("mul", out, (a, b), a=a.data, b=b.data)


@_rule("mul")
def _mul_back(g, s):
    a, b = s["a"], s["b"]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _finish("scale", a.data * float(c), (a,), c=float(c))


@_rule("scale")
def _scale_back(g, s):
    return (g * s["c"],)


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _finish("negate", -a.data, (a,))


@_rule("negate")
def _neg_back(g, s):
    return (-g,)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    watch = getattr(_local, "kink_log", None)
    if watch is not None:
        watch.append(mask)
    return _finish("relu", np.where(mask, a.data, 0.0), (a,), mask=mask)


@_rule("relu")
def _relu_back(g, s):
    return (g * s["mask"],)


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated as max(x, 0) + log1p(e^-|x|)."""
    a = as_tensor(a)
    return _finish("softplus", _softplus_np(a.data), (a,), x=a.data)


@_rule("softplus")
def _softplus_back(g, s):
    return (g * _sigmoid_np(s["x"]),)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _finish("exp", out, (a,), y=out)


@_rule("exp")
def _exp_back(g, s):
    return (g * s["y"],)


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise ValueError("log of non-positive value")
    return _finish("log", np.log(a.data), (a,), x=a.data)


@_rule("log")
def _log_back(g, s):
    return (g / s["x"],)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "negate": negate,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name; ``b`` is the second operand (a float for ``scale``)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul", "scale"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


# --------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return _finish("matmul", out, (a, b), a=a.data, b=b.data)


@_rule("matmul")
def _matmul_back(g, s):
    return g @ s["b"].T, s["a"].T @ g


def linear(x, W, b) -> Tensor:
    """``x @ W + b`` for x of shape (n, d_in)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
    out = x.data @ W.data + b.data
    return _finish("linear", out, (x, W, b), x=x.data, W=W.data)


@_rule("linear")
def _linear_back(g, s):
    return g @ s["W"].T, s["x"].T @ g, g.sum(axis=0)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _finish("transpose", np.ascontiguousarray(a.data.T), (a,))


@_rule("transpose")
def _transpose_back(g, s):
    return (g.T,)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _finish("reshape", out, (a,), shape=a.shape)


@_rule("reshape")
def _reshape_back(g, s):
    return (g.reshape(s["shape"]),)


def gather_rows(table, index) -> Tensor:
    """Rows ``table[index]``; used for embedding lookup and negative pairing."""
    table = as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a 1-D index")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("gather_rows index out of range")
    return _finish("gather_rows", table.data[idx], (table,), idx=idx, shape=table.shape)


@_rule("gather_rows")
def _gather_back(g, s):
    out = np.zeros(s["shape"])
    idx = s["idx"]
    if idx.size and np.bincount(idx).max() <= 1:
        out[idx] = g
    else:
        np.add.at(out, idx, g)
    return (out,)


def normalize_rows(a) -> Tensor:
    """Divide each row by its L2 norm."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("normalize_rows expects a matrix")
    norms = np.sqrt((a.data**2).sum(axis=1, keepdims=True))
    if (norms == 0).any():
        raise ValueError("cannot normalize a zero-norm row")
    y = a.data / norms
    return _finish("normalize_rows", y, (a,), y=y, norms=norms)


@_rule("normalize_rows")
def _normalize_back(g, s):
    y, norms = s["y"], s["norms"]
    return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return cols, oh, ow


def conv2d(x, K, stride: int = 1, pad: int = 0, bias=None) -> Tensor:
    """Cross-correlation of (n, c_in, h, w) input with (c_out, c_in, k, k) kernels.

    Zero padding only. Output extent is floor((h + 2 pad - k) / stride) + 1.
    """
    x, K = as_tensor(x), as_tensor(K)
    if x.data.ndim != 4 or K.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = K.shape
    if c_in != c or k != k2:
        raise ShapeError(f"conv2d: kernel {K.shape} does not fit input {x.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError("conv2d: kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, oh, ow = _im2col(xp, k, stride)
    kmat = K.data.reshape(c_out, -1)
    out = cols @ kmat.T
    inputs: tuple[Tensor, ...] = (x, K)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError("conv2d: bias must have one entry per output channel")
        out = out + bias.data
        inputs = (x, K, bias)
    out = out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    return _finish(
        "conv2d",
        np.ascontiguousarray(out),
        inputs,
        cols=cols,
        kmat=kmat,
        xshape=x.shape,
        kshape=K.shape,
        stride=stride,
        pad=pad,
        oh=oh,
        ow=ow,
        has_bias=bias is not None,
    )


@_rule("conv2d")
def _conv2d_back(g, s):
    n, c, h, w = s["xshape"]
    c_out, _, k, _ = s["kshape"]
    stride, pad, oh, ow = s["stride"], s["pad"], s["oh"], s["ow"]
    gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, c_out)
    dK = (gmat.T @ s["cols"]).reshape(s["kshape"])
    dx = None
    if s.get("needs", (True,))[0]:
        dcols = (gmat @ s["kmat"]).reshape(n, oh, ow, c, k, k).transpose(4, 5, 0, 3, 1, 2)
        dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[i, j]
        dx = np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + w]) if pad else dxp
    grads = [dx, dK]
    if s["has_bias"]:
        grads.append(gmat.sum(axis=0))
    return tuple(grads)


# --------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-D tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op: str, x, axes=None) -> Tensor:
    """Reduce over ``axes`` (all axes when None); reduced axes are dropped.

    ``global_avg_pool`` averages the last two (spatial) axes of a 4-D map.
    ``log_sum_exp`` subtracts the running max before exponentiating.
    """
    x = as_tensor(x)
    if op == "global_avg_pool":
        if x.data.ndim != 4:
            raise ShapeError("global_avg_pool expects (n, c, h, w)")
        op, axes = "mean", (2, 3)
    ax = _norm_axes(axes, x.data.ndim)
    if any(x.shape[a] == 0 for a in ax) or (x.data.size == 0):
        raise ValueError("empty reduction axis")
    if op == "sum":
        out = x.data.sum(axis=ax)
        return _finish("reduce_sum", out, (x,), ax=ax, shape=x.shape)
    if op == "mean":
        count = int(np.prod([x.shape[a] for a in ax]))
        out = x.data.sum(axis=ax) / count
        return _finish("reduce_mean", out, (x,), ax=ax, shape=x.shape, count=count)
    if op == "log_sum_exp":
        m = x.data.max(axis=ax, keepdims=True)
        e = np.exp(x.data - m)
        ssum = e.sum(axis=ax, keepdims=True)
        out = (np.log(ssum) + m).squeeze(axis=ax)
        return _finish("reduce_lse", out, (x,), ax=ax, soft=e / ssum)
    raise ValueError(f"unknown reduction {op!r}")


def _expand(g: np.ndarray, ax: tuple[int, ...]) -> np.ndarray:
    return np.expand_dims(g, ax) if ax else g


@_rule("reduce_sum")
def _rsum_back(g, s):
    return (np.broadcast_to(_expand(g, s["ax"]), s["shape"]).copy(),)


@_rule("reduce_mean")
def _rmean_back(g, s):
    return (np.broadcast_to(_expand(g, s["ax"]) / s["count"], s["shape"]).copy(),)


@_rule("reduce_lse")
def _rlse_back(g, s):
    return (_expand(g, s["ax"]) * s["soft"],)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Per-parameter max relative error of reverse mode vs central differences.

    The error of a parameter tensor is max_i |analytic_i - numeric_i| divided by
    the tensor's gradient scale max(max|analytic|, max|numeric|, 1e-8).
    ``skipped`` counts coordinates left out because a relu input changed sign
    inside [-eps, +eps]; the central difference straddles a kink there and
    does not estimate the derivative.
    """

    errors: dict[str, float]
    tol: float
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def _eval_with_kinks(forward) -> tuple[float, list[np.ndarray]]:
    _local.kink_log = []
    try:
        value = forward().item()
        return value, _local.kink_log
    finally:
        _local.kink_log = None


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(
    forward: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    skip_kinks: bool = True,
) -> GradCheckReport:
    """Compare tape gradients of ``forward()`` against central differences.

    ``forward`` must build a scalar loss from ``params`` and be deterministic;
    two consecutive evaluations that disagree raise RuntimeError.
    """
    first, base = _eval_with_kinks(forward)
    if forward().item() != first:
        raise RuntimeError("forward closure is not deterministic")
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = forward()
    tape.backward(loss)
    errors, skipped = {}, {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        valid = np.ones(p.data.shape, dtype=bool)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up, up_kinks = _eval_with_kinks(forward)
            flat[i] = orig - eps
            down, down_kinks = _eval_with_kinks(forward)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
            if skip_kinks and not (_same_pattern(up_kinks, base) and _same_pattern(down_kinks, base)):
                valid.reshape(-1)[i] = False
        a, n = analytic[valid], numeric[valid]
        denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
        errors[name] = float(np.abs(a - n).max(initial=0.0) / denom)
        skipped[name] = int((~valid).sum())
    return GradCheckReport(errors, tol, skipped)
