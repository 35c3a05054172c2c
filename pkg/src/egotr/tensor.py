"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its inputs and a backward rule. :func:`backward` orders those records into a
:class:`Tape` (inputs before outputs) and walks it in reverse, summing
gradients where a value fans out to several consumers. The graph is rebuilt
on every forward pass, so control flow in model code needs no special
handling.

Storage is a numpy array. Two precisions are used in practice: float64 for
gradient checking and float32 for training. Operations keep the dtype of
their inputs.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import DimensionError, NonFiniteError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "parameter",
    "no_grad",
    "count_macs",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "swapaxes",
    "concat",
    "take",
    "exp",
    "log",
    "sqrt",
    "softmax",
    "layer_norm",
    "gelu",
    "softplus",
    "conv2d",
    "l2_normalize",
    "finite_diff_grad",
]

_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward rules (inference, finite differences)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class _MacCounter:
    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates performed by matmul and conv2d inside the block.

    >>> with count_macs() as c:
    ...     _ = matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    >>> c.total
    24
    """
    counter = _MacCounter()
    stack = getattr(_local, "mac_counters", None)
    if stack is None:
        stack = _local.mac_counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _record_macs(op: str, n: int) -> None:
    for counter in getattr(_local, "mac_counters", ()):
        counter.add(op, n)


class _Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """An n-dimensional array that can take part in differentiation.

    Parameters
    ----------
    data : array_like
        Values. Integer and boolean input is promoted to float64; float32 and
        float64 arrays keep their dtype.
    requires_grad : bool
        Leaves with this flag receive ``.grad`` after :func:`backward`.
    name : str, optional
        Used in error messages and norm dumps.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dims must be positive, got shape {arr.shape}")
        _check_finite(arr, name or "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node: _Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _raise_not_scalar(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    """Return ``x`` unchanged if it is a Tensor, otherwise wrap it as a constant."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True, name=name)


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=ref.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const_like(b, a)
    if isinstance(b, Tensor):
        return _const_like(a, b), b
    return as_tensor(a), as_tensor(b)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor._wrap(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Tape:
    """Recorded operations reachable from one output, in topological order.

    ``entries`` lists every non-leaf tensor exactly once, each after all of
    its inputs.
    """

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # Iterative post-order DFS; recursion would overflow on deep graphs.
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in reversed(t._node.inputs):
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def run_backward(self, output: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(output): seed}
        for t in reversed(self.entries):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            in_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    if inp.grad is None:
                        # Copy: gi may be a broadcast view or shared with a sibling input.
                        inp.grad = np.array(gi, dtype=inp.dtype)
                    else:
                        inp.grad = inp.grad + gi
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Gradients accumulate across calls until leaves are reset with
    :meth:`Tensor.zero_grad`.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise UsageError(f"backward needs a scalar loss, got shape {shape}")
    _check_finite(loss.data, "loss")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    Tape.from_output(loss).run_backward(loss, seed)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _result(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _result(np.swapaxes(a.data, ax1, ax2), (a,),
                   lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, bw, "concat")


def take(a: Tensor, index) -> Tensor:
    """Numpy-style indexing; repeated fancy indices accumulate on backward."""
    shape = a.shape
    dtype = a.dtype
    out = a.data[index]
    if not isinstance(out, np.ndarray) or out.base is a.data:
        out = np.array(out, dtype=dtype)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), bw, "take")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading batch axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    m, k = a.shape[-2:]
    k2, n = b.shape[-2:]
    if k != k2:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from None
    _record_macs("matmul", math.prod(batch) * m * k * n)
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if bd.ndim == 2:
                ga = g @ bd.T
            else:
                ga = g @ np.swapaxes(bd, -1, -2)
            ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # Shared weight: fold batch axes into one GEMM.
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# Neural-network primitives
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction."""
    if not -x.ndim <= axis < x.ndim:
        raise UsageError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: last dim {d} does not match gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), bw, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(out, (x,), bw, "gelu")


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed as max(x, 0) + log1p(e^-|x|)."""
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))

    def bw(g):
        # sigmoid(x), written to avoid overflow for large |x|
        e = np.exp(-np.abs(xd))
        sig = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig.astype(xd.dtype, copy=False),)

    return _result(out, (x,), bw, "softplus")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(sum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over ``x`` of shape (B, C, H, W).

    ``weight`` has shape (C_out, C, kh, kw). Implemented as a single GEMM
    over unfolded patches.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    bsz, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2:]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {kh}x{kw}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    _record_macs("conv2d", bsz * ho * wo * cout * cin * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
            gxp = np.zeros((bsz, cin, hp, wp), dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, bw, "conv2d")


# ---------------------------------------------------------------------------
# Verification oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5,
                     indices: Iterable[int] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x.data`` is perturbed in place one coordinate at a time and restored
    afterwards, so ``f`` may close over ``x`` (e.g. a model parameter) instead
    of using its argument. ``x`` must be float64.

    Returns the full gradient when ``indices`` is None, otherwise only the
    entries at those flat indices.
    """
    if x.dtype != np.float64:
        raise UsageError("finite differences need a float64 tensor")
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else list(indices)
    out = np.empty(len(idx), dtype=np.float64)

    def evaluate():
        with no_grad():
            val = f(x)
        return float(val.item() if isinstance(val, Tensor) else val)

    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate()
        flat[i] = orig - h
        fm = evaluate()
        flat[i] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape) if indices is None else out
