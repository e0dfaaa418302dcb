"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive records ``(output, inputs, backward_fn)`` on the active
:class:`Tape`. Calling :meth:`Tape.backward` walks the records in reverse and
accumulates gradients additively into ``Tensor.grad``. Outside a tape nothing
is recorded, which makes inference cheap.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a kernel."""


class Tape:
    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self.records: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: "Tensor", grad: np.ndarray | None = None) -> None:
        if grad is None:
            grad = np.ones_like(loss.data)
        loss.grad = grad if loss.grad is None else loss.grad + grad
        for out, inputs, fn in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            in_grads = fn(g)
            for t, tg in zip(inputs, in_grads):
                if tg is None or not t.requires_grad:
                    continue
                t.grad = tg if t.grad is None else t.grad + tg
            # intermediates are never read again
            out.grad = None
        self.records.clear()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DTYPE))


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = Tape.active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append((out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(a, Tensor) else a
    b = _const_like(b, a)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const_like(a, b)
    b = _const_like(b, a)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(a, Tensor) else a
    b = _const_like(b, a)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(a, Tensor) else a
    b = _const_like(b, a)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    s = s.astype(a.data.dtype, copy=False)
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)))


def clip(x, lo: float, hi: float):
    """Clamp to ``[lo, hi]``; gradient passes only strictly inside the interval.

    Works on python floats, numpy arrays and tensors.
    """
    if lo > hi:
        raise ValueError(f"clip bounds reversed: {lo} > {hi}")
    if not isinstance(x, Tensor):
        if np.ndim(x) == 0:
            return min(max(x, lo), hi)
        return np.clip(x, lo, hi)
    inside = (x.data > lo) & (x.data < hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ----------------------------------------------------------------------------
# reductions and shape ops


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def take(a: Tensor, idx) -> Tensor:
    """``a[idx]`` for basic or advanced indexing; repeated indices accumulate."""
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), bw)


def index_select(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0."""
    idx = np.asarray(idx, dtype=np.int64)
    return take(a, idx)


def global_max_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=2)

    def bw(g):
        full = np.zeros_like(flat)
        np.put_along_axis(full, arg[..., None], g[..., None], axis=2)
        return (full.reshape(x.shape),)

    return _make(np.take_along_axis(flat, arg[..., None], axis=2)[..., 0], (x,), bw)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` of any rank >= 2 and ``b`` 2-D."""
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``w`` of shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.data if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, inputs, bw)


# ----------------------------------------------------------------------------
# softmax family


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (logits,), bw)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax (no gradient), row-max stabilized."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Mean (or per-row) negative log-likelihood of integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} for logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    logp = log_softmax(logits, axis=1)
    picked = take(logp, (np.arange(n), labels))
    nll = neg(picked)
    if reduction == "none":
        return nll
    return mean(nll)


# ----------------------------------------------------------------------------
# convolution and spatial kernels


def _im2col(xh: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Patches of an NHWC array as rows ordered (kh, kw, C)."""
    n, _, _, c = xh.shape
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return cols, ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W), w: (O, C, kh, kw), b: (O,).

    Patches are gathered channels-last, which keeps the im2col copy cheap;
    only the input and output cross the layout boundary.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError("kernel larger than padded input")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d bias shape {b.shape}, expected {(o,)}")
    inputs = (x, w) if b is None else (x, w, b)

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        wm = w.data.reshape(o, c)
        xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
        out = xm @ wm.T
        if b is not None:
            out = out + b.data
        out = out.reshape(n, h, wd, o).transpose(0, 3, 1, 2)

        def bw1(g):
            gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
            gx = (gm @ wm).reshape(n, h, wd, c).transpose(0, 3, 1, 2) if x.requires_grad else None
            gw = (gm.T @ xm).reshape(w.shape) if w.requires_grad else None
            return (gx, gw) if b is None else (gx, gw, gm.sum(axis=0))

        return _make(np.ascontiguousarray(out), inputs, bw1)

    xh = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    hp, wp = xh.shape[1:3]
    wm = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    cols, ho, wo = _im2col(xh, kh, kw, stride)
    out = cols @ wm.T
    del cols
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gm = gh.reshape(-1, o)
        gx = gw = None
        if w.requires_grad:
            cols_, _, _ = _im2col(xh, kh, kw, stride)
            gw = (gm.T @ cols_).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
            del cols_
        if x.requires_grad:
            if stride == 1:
                # full correlation of the gradient with the flipped kernel
                gp = np.pad(gh, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
                gcols, _, _ = _im2col(gp, kh, kw, 1)
                wf = w.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
                dxp = (gcols @ wf.T).reshape(n, hp, wp, c)
            else:
                dcols = (gm @ wm).reshape(n, ho, wo, kh, kw, c)
                dxp = np.zeros_like(xh)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i, j]
            dxp = dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp
            gx = np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))
        return (gx, gw) if b is None else (gx, gw, gm.sum(axis=0))

    return _make(out, inputs, bw)


def film(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine ``gamma[c] * x[c] + beta[c]`` over spatial dims.

    ``gamma``/``beta`` are either (C,) shared across the batch or (N, C)
    per-row; ``x`` is (C, H, W) or (N, C, H, W).
    """
    c = x.shape[-3]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise ShapeError(f"film: {c} channels vs gamma {gamma.shape}, beta {beta.shape}")
    g4 = gamma.data[..., :, None, None]
    b4 = beta.data[..., :, None, None]
    out = g4 * x.data + b4

    def bw(g):
        gx = g * g4 if x.requires_grad else None
        ggam = gbet = None
        if gamma.requires_grad:
            ggam = _unbroadcast((g * x.data).sum(axis=(-1, -2)), gamma.shape)
        if beta.requires_grad:
            gbet = _unbroadcast(g.sum(axis=(-1, -2)), beta.shape)
        return gx, ggam, gbet

    return _make(out, (x, gamma, beta), bw)


def cumsum_left(g: Tensor) -> Tensor:
    """Inclusive cumulative sum along the width axis, left to right."""
    if g.ndim < 2:
        raise ShapeError("cumsum_left needs spatial dims")
    return _make(np.cumsum(g.data, axis=-1), (g,),
                 lambda u: (np.flip(np.cumsum(np.flip(u, -1), axis=-1), -1),))


def cumsum_down(g: Tensor) -> Tensor:
    """Inclusive cumulative sum along the height axis, top to bottom."""
    if g.ndim < 2:
        raise ShapeError("cumsum_down needs spatial dims")
    return _make(np.cumsum(g.data, axis=-2), (g,),
                 lambda u: (np.flip(np.cumsum(np.flip(u, -2), axis=-2), -2),))


# ----------------------------------------------------------------------------
# recurrent cell


def lstm_step(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor,
              b_ih: Tensor, b_hh: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM cell step with gate order (input, forget, candidate, output)."""
    hid = h.shape[-1]
    if w_ih.shape != (4 * hid, x.shape[-1]) or w_hh.shape != (4 * hid, hid):
        raise ShapeError(f"lstm weights {w_ih.shape}, {w_hh.shape} for x {x.shape}, h {h.shape}")
    gates = add(linear(x, w_ih, b_ih), linear(h, w_hh, b_hh))
    i = sigmoid(gates[:, 0:hid])
    f = sigmoid(gates[:, hid:2 * hid])
    g = tanh(gates[:, 2 * hid:3 * hid])
    o = sigmoid(gates[:, 3 * hid:4 * hid])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new
