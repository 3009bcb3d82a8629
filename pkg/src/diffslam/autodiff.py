"""Reverse-mode automatic differentiation over dense numpy arrays.

Operations record onto the :class:`Tape` that is active in the current
context. Outside a tape, operations only compute values, which keeps long
forward-only pipeline runs cheap. Gradients are obtained with
:func:`backward`, which replays the tape's records in reverse order.

    >>> x = Tensor([2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> backward(y, tape)
    >>> x.grad
    array([4.])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "checkpoint",
    "clamp_smooth",
    "concat",
    "cross",
    "elementwise",
    "gather_bilinear",
    "gather_trilinear",
    "get_default_dtype",
    "logsumexp",
    "matmul",
    "no_grad",
    "norm",
    "numerical_grad",
    "record",
    "reduce",
    "segment_sum",
    "set_default_dtype",
    "sigmoid",
    "softmax",
    "softplus",
    "solve",
    "stack",
    "where",
]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "diffslam_active_tape", default=None
)
_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An operation was called outside its contract."""


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 storage for new tensors."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


@dataclass
class _Record:
    output_id: int
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Append-only log of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    on tensors that require gradients are recorded. Records reference only
    earlier records, so append order is a topological order.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._tokens = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.records)

    def release(self) -> None:
        """Drop every record (and the arrays their closures keep alive)."""
        self.records.clear()

    @staticmethod
    def active() -> Optional["Tape"]:
        return _ACTIVE_TAPE.get()


class no_grad:
    """Suspend recording, even inside an active tape."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


class Tensor:
    """Dense float array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    # -- introspection -------------------------------------------------
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
    def T(self) -> "Tensor":
        return self.transpose()

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __pow__(self, other):
        return elementwise("pow", self, other)

    def __neg__(self):
        return elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def sin(self):
        return elementwise("sin", self)

    def cos(self):
        return elementwise("cos", self)

    def sqrt(self):
        return elementwise("sqrt", self)

    def abs(self):
        return elementwise("abs", self)

    def tanh(self):
        return elementwise("tanh", self)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``inputs``.

    ``backward_fn`` maps the upstream gradient (same shape as ``data``) to a
    sequence with one gradient (or ``None``) per input. Gradients may have
    broadcast shapes; they are summed down to each input's shape. This is
    also the hook for operations with hand-written backward rules.
    """
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=_DTYPE)
    out.grad = None
    out.node_id = None
    out._tape = None
    out.requires_grad = False
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        out.node_id = len(tape.records)
        tape.records.append(_Record(out.node_id, tuple(inputs), backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, size in enumerate(shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Gradients accumulate additively into existing ``.grad`` arrays.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    _backprop(loss, np.ones_like(loss.data), tape)


def _backprop(output: Tensor, upstream: np.ndarray, tape: Optional[Tape] = None) -> None:
    if not output.requires_grad:
        return
    if output.node_id is None:
        _accumulate_leaf(output, upstream)
        return
    tape = tape or output._tape
    if output._tape is not tape:
        raise ContractError("loss was not recorded on the given tape")
    grads = {output.node_id: upstream}
    for rec in reversed(tape.records[: output.node_id + 1]):
        g = grads.pop(rec.output_id, None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = _unbroadcast(np.asarray(gi), inp.shape)
            if inp.node_id is None:
                _accumulate_leaf(inp, gi)
            elif inp._tape is tape:
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    g = _unbroadcast(np.asarray(g, dtype=leaf.data.dtype), leaf.shape)
    if leaf.grad is None:
        leaf.grad = np.array(g, copy=True)
    else:
        leaf.grad = leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise


def sigmoid(x):
    return elementwise("sigmoid", x)


def softplus(x):
    return elementwise("softplus", x)


def clamp_smooth(x, lo: float, hi: float, sharpness: float = 50.0):
    """Soft clamp to ``[lo, hi]`` built from logistic ramps.

    The derivative is ``sigmoid(k (x - lo)) - sigmoid(k (x - hi))``, so it is
    strictly positive everywhere and ~1 well inside the interval.
    """
    return elementwise("clamp-smooth", x, lo=lo, hi=hi, sharpness=sharpness)


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _np_softplus(x):
    return np.logaddexp(0.0, x)


_UNARY = {"neg", "exp", "log", "sin", "cos", "sqrt", "abs", "tanh", "sigmoid", "softplus", "clamp-smooth"}
_BINARY = {"add", "sub", "mul", "div", "pow"}


def elementwise(kind: str, a, b=None, **kw) -> Tensor:
    """Apply an elementwise operation with numpy broadcasting."""
    a = as_tensor(a)
    if kind in _UNARY:
        return _unary(kind, a, **kw)
    if kind not in _BINARY:
        raise ContractError(f"unknown elementwise op {kind!r}")
    b = as_tensor(b)
    _broadcast_check(a, b)
    x, y = a.data, b.data
    if kind == "add":
        return record(x + y, (a, b), lambda g: (g, g))
    if kind == "sub":
        return record(x - y, (a, b), lambda g: (g, -g))
    if kind == "mul":
        return record(x * y, (a, b), lambda g: (g * y, g * x))
    if kind == "div":
        out = x / y
        return record(out, (a, b), lambda g: (g / y, -g * out / y))
    out = np.power(x, y)

    def pow_bw(g):
        ga = g * y * np.power(x, y - 1)
        gb = None
        if b.requires_grad:
            with np.errstate(divide="ignore", invalid="ignore"):
                gb = np.where(x > 0, g * out * np.log(np.where(x > 0, x, 1.0)), 0.0)
        return ga, gb

    return record(out, (a, b), pow_bw)


def _unary(kind: str, a: Tensor, **kw) -> Tensor:
    x = a.data
    if kind == "neg":
        return record(-x, (a,), lambda g: (-g,))
    if kind == "exp":
        out = np.exp(x)
        return record(out, (a,), lambda g: (g * out,))
    if kind == "log":
        return record(np.log(x), (a,), lambda g: (g / x,))
    if kind == "sin":
        return record(np.sin(x), (a,), lambda g: (g * np.cos(x),))
    if kind == "cos":
        return record(np.cos(x), (a,), lambda g: (-g * np.sin(x),))
    if kind == "sqrt":
        out = np.sqrt(x)
        return record(out, (a,), lambda g: (g * 0.5 / out,))
    if kind == "abs":
        return record(np.abs(x), (a,), lambda g: (g * np.sign(x),))
    if kind == "tanh":
        out = np.tanh(x)
        return record(out, (a,), lambda g: (g * (1.0 - out * out),))
    if kind == "sigmoid":
        out = _np_sigmoid(np.asarray(x, dtype=float))
        return record(out, (a,), lambda g: (g * out * (1.0 - out),))
    if kind == "softplus":
        return record(_np_softplus(x), (a,), lambda g: (g * _np_sigmoid(np.asarray(x, dtype=float)),))
    lo, hi, k = kw["lo"], kw["hi"], kw.get("sharpness", 50.0)
    if not hi > lo:
        raise ContractError("clamp-smooth needs hi > lo")
    out = lo + (_np_softplus(k * (x - lo)) - _np_softplus(k * (x - hi))) / k

    def clamp_bw(g):
        return (g * (_np_sigmoid(k * (x - lo)) - _np_sigmoid(k * (x - hi))),)

    return record(out, (a,), clamp_bw)


def where(cond, a, b) -> Tensor:
    """Select between ``a`` and ``b`` with a constant boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return record(out, (a, b), lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


# ---------------------------------------------------------------------------
# shape manipulation


def _reshape(a: Tensor, shape) -> Tensor:
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _transpose(a: Tensor, axes) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return record(out, (a,), lambda g: (np.transpose(g, inv),))


def _getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return record(np.array(out, copy=True) if np.ndim(out) else np.asarray(out), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record(out, tensors, lambda g: np.split(g, splits, axis=axis))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return record(out, tensors, bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``@`` semantics (batched, 1-D promotion)."""
    a, b = as_tensor(a), as_tensor(b)
    inner_b = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != inner_b:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def bw(g):
        A2 = A[None, :] if A.ndim == 1 else A
        B2 = B[:, None] if B.ndim == 1 else B
        G = g
        if A.ndim == 1:
            G = np.expand_dims(G, -2)
        if B.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = G @ np.swapaxes(B2, -1, -2)
        gb = np.swapaxes(A2, -1, -2) @ G
        if A.ndim == 1:
            ga = ga[..., 0, :]
        if B.ndim == 1:
            gb = gb[..., :, 0]
        return ga, gb

    return record(out, (a, b), bw)


def solve(A, b) -> Tensor:
    """Solve ``A x = b`` for square (batched) ``A``; ``b`` is a vector or matrix."""
    A, b = as_tensor(A), as_tensor(b)
    vec = b.ndim == A.ndim - 1
    bd = b.data[..., None] if vec else b.data
    x = np.linalg.solve(A.data, bd)

    def bw(g):
        gd = g[..., None] if vec else g
        gb = np.linalg.solve(np.swapaxes(A.data, -1, -2), gd)
        gA = -gb @ np.swapaxes(x, -1, -2)
        return gA, (gb[..., 0] if vec else gb)

    return record(x[..., 0] if vec else x, (A, b), bw)


def cross(a, b) -> Tensor:
    """Cross product along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    x, y = a.data, b.data
    return record(np.cross(x, y), (a, b), lambda g: (np.cross(y, g), np.cross(g, x)))


# ---------------------------------------------------------------------------
# reductions


def reduce(kind: str, a, axis=None, keepdims: bool = False, temperature: float = 1.0) -> Tensor:
    """Reduce over ``axis``.

    ``sum`` and ``mean`` are the usual reductions. ``softmax`` and ``softmin``
    return ``sum(w * a)`` with weights ``softmax(+-a / temperature)``: a
    smooth maximum / minimum.
    """
    a = as_tensor(a)
    x = a.data
    axes = _normalize_axes(axis, x.ndim)
    if kind == "sum":
        out = x.sum(axis=axes, keepdims=keepdims)
        return record(out, (a,), lambda g: (_expand_reduced(g, x.shape, axes, keepdims),))
    if kind == "mean":
        n = int(np.prod([x.shape[i] for i in axes])) if axes else 1
        out = x.mean(axis=axes, keepdims=keepdims)
        return record(out, (a,), lambda g: (_expand_reduced(g, x.shape, axes, keepdims) / n,))
    if kind in ("softmax", "softmin"):
        sign = 1.0 if kind == "softmax" else -1.0
        w = softmax(a * (sign / temperature), axis=axes)
        return reduce("sum", w * a, axis=axes, keepdims=keepdims)
    raise ContractError(f"unknown reduction {kind!r}")


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ContractError(f"axis {ax} invalid for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _expand_reduced(g, shape, axes, keepdims):
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shift = a.data.max(axis=axis, keepdims=True)
    e = (a - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shift = a.data.max(axis=axis, keepdims=True)
    return (a - shift).exp().sum(axis=axis, keepdims=True).log() + shift


def norm(a, axis=-1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    a = as_tensor(a)
    return ((a * a).sum(axis=axis, keepdims=keepdims) + eps).sqrt()


def segment_sum(values, segment_ids, num_segments: int) -> Tensor:
    """Scatter-add rows of ``values`` into ``num_segments`` output rows."""
    values = as_tensor(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    out = np.zeros((num_segments,) + values.shape[1:], dtype=values.data.dtype)
    np.add.at(out, ids, values.data)
    return record(out, (values,), lambda g: (g[ids],))


# ---------------------------------------------------------------------------
# interpolation kernels


def gather_bilinear(image, coords, valid: Optional[np.ndarray] = None):
    """Bilinearly sample ``image`` (H x W or H x W x C) at pixel ``coords``.

    ``coords`` is N x 2 holding (x, y) = (column, row). Returns ``(values,
    mask)``. A sample is valid when it lies inside the image and, if a
    ``valid`` image mask is given, every neighbour with nonzero weight is
    valid. Invalid rows are zero and carry no gradient. Gradients flow to the
    image values and to the coordinates.
    """
    image, coords = as_tensor(image), as_tensor(coords)
    img = image.data
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    H, W, C = img.shape
    c = coords.data
    x, y = c[:, 0], c[:, 1]
    mask = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (y >= 0) & (x <= W - 1) & (y <= H - 1)
    xs = np.where(mask, x, 0.0)
    ys = np.where(mask, y, 0.0)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, W - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = xs - x0
    fy = ys - y0
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        ok = (
            (valid[y0, x0] | ((1 - fx) * (1 - fy) == 0))
            & (valid[y0, x1] | (fx * (1 - fy) == 0))
            & (valid[y1, x0] | ((1 - fx) * fy == 0))
            & (valid[y1, x1] | (fx * fy == 0))
        )
        mask &= ok
    m = mask.astype(img.dtype)[:, None]
    w00 = ((1 - fx) * (1 - fy))[:, None]
    w01 = (fx * (1 - fy))[:, None]
    w10 = ((1 - fx) * fy)[:, None]
    w11 = (fx * fy)[:, None]
    i00, i01, i10, i11 = img[y0, x0], img[y0, x1], img[y1, x0], img[y1, x1]
    out = (w00 * i00 + w01 * i01 + w10 * i10 + w11 * i11) * m
    if squeeze:
        out = out[:, 0]

    def bw(g):
        g2 = (g[:, None] if squeeze else g) * m
        gimg = None
        if image.requires_grad:
            gimg = np.zeros_like(img)
            for wgt, yy, xx in ((w00, y0, x0), (w01, y0, x1), (w10, y1, x0), (w11, y1, x1)):
                np.add.at(gimg, (yy, xx), wgt * g2)
            if squeeze:
                gimg = gimg[..., 0]
        gc = None
        if coords.requires_grad:
            dx = (i01 - i00) * (1 - fy)[:, None] + (i11 - i10) * fy[:, None]
            dy = (i10 - i00) * (1 - fx)[:, None] + (i11 - i01) * fx[:, None]
            gc = np.stack([(dx * g2).sum(-1), (dy * g2).sum(-1)], axis=-1)
        return gimg, gc

    return record(out, (image, coords), bw), mask


def gather_trilinear(volume, coords, valid: Optional[np.ndarray] = None):
    """Trilinearly sample a D0 x D1 x D2 grid at fractional index ``coords`` (N x 3).

    Returns ``(values, mask)``; same validity rules as :func:`gather_bilinear`.
    """
    volume, coords = as_tensor(volume), as_tensor(coords)
    vol = volume.data
    dims = np.array(vol.shape)
    c = coords.data
    mask = np.all(np.isfinite(c), axis=1) & np.all(c >= 0, axis=1) & np.all(c <= dims - 1, axis=1)
    cs = np.where(mask[:, None], c, 0.0)
    lo = np.clip(np.floor(cs).astype(np.int64), 0, dims - 1)
    hi = np.minimum(lo + 1, dims - 1)
    f = cs - lo
    corners = []
    for bits in range(8):
        sel = [(bits >> k) & 1 for k in range(3)]
        idx = tuple(hi[:, k] if sel[k] else lo[:, k] for k in range(3))
        wts = np.ones(len(c))
        for k in range(3):
            wts = wts * (f[:, k] if sel[k] else 1 - f[:, k])
        corners.append((idx, wts, sel))
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        for idx, wts, _ in corners:
            mask &= valid[idx] | (wts == 0)
    m = mask.astype(vol.dtype)
    vals = [vol[idx] for idx, _, _ in corners]
    out = sum(w * v for (_, w, _), v in zip(corners, vals)) * m

    def bw(g):
        gm = g * m
        gvol = None
        if volume.requires_grad:
            gvol = np.zeros_like(vol)
            for idx, wts, _ in corners:
                np.add.at(gvol, idx, wts * gm)
        gc = None
        if coords.requires_grad:
            gc = np.zeros_like(c)
            for k in range(3):
                acc = np.zeros(len(c))
                for (idx, wts, sel), v in zip(corners, vals):
                    # d weight / d f_k: replace the k-th factor by +-1
                    other = np.ones(len(c))
                    for j in range(3):
                        if j != k:
                            other = other * (f[:, j] if sel[j] else 1 - f[:, j])
                    acc += (1.0 if sel[k] else -1.0) * other * v
                gc[:, k] = acc * gm
        return gvol, gc

    return record(out, (volume, coords), bw), mask


# ---------------------------------------------------------------------------
# memory control and checking


def checkpoint(fn: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
    """Evaluate ``fn(*inputs)`` storing only its output; recompute on backward.

    ``fn`` must be deterministic and return a single tensor.
    """
    inputs = tuple(as_tensor(t) for t in inputs)
    token = _ACTIVE_TAPE.set(None)
    try:
        value = fn(*[Tensor(t.data) for t in inputs]).data
    finally:
        _ACTIVE_TAPE.reset(token)

    def bw(g):
        leaves = [Tensor(t.data, requires_grad=t.requires_grad) for t in inputs]
        with Tape() as sub:
            out = fn(*leaves)
        _backprop(out, g, sub)
        sub.release()
        return [leaf.grad if leaf.grad is not None else None for leaf in leaves]

    return record(value, inputs, bw)


def numerical_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(x)
        flat[i] = orig - eps
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad
