"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the handful of primitives needed by small convolutional cell networks
are provided. Activations are laid out NCHW. Every op records a closure that
accumulates gradients into its parents; :meth:`Tensor.backward` replays the
recorded graph in reverse topological order.

Precision is float32 by default. Gradient checks switch to float64 through
:func:`precision`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

_DTYPE = np.float32


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating-point type."""
    previous = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A node of the computation graph.

    Attributes:
        data: the value, a numpy array.
        grad: accumulated gradient of the same shape, or None.
        requires_grad: whether gradients flow into this node.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: Sequence["Tensor"] = (), _backward: Callable | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this node through the recorded graph."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if not np.all(np.isfinite(node.grad)):
                    raise NumericError(f"non-finite gradient at {node!r}")

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Wrap ``data`` as a leaf tensor in the default precision."""
    return Tensor(np.asarray(data, dtype=_DTYPE), requires_grad=requires_grad, name=name)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: Callable) -> Tensor:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None)


def _check_rank(x: Tensor, rank: int, layer: str) -> None:
    if x.data.ndim != rank:
        raise ShapeError(layer, f"rank {rank}", x.shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(g * (out > 0))

    return _make(out, (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along the channel axis."""
    if len(xs) == 1:
        return xs[0]
    sizes = [x.shape[axis] for x in xs]
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        other[axis] = ref[axis]
        if other != ref:
            raise ShapeError("concat", tuple(ref), x.shape)
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                x._accumulate(g[tuple(index)])

    return _make(out, xs, backward)


def identity(x: Tensor) -> Tensor:
    return x


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _out_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.full((n, c, h + 2 * pad, w + 2 * pad), value, dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _tap(xp: np.ndarray, i: int, j: int, ho: int, wo: int, stride: int, dilation: int):
    r, c = i * dilation, j * dilation
    return xp[:, :, r:r + stride * (ho - 1) + 1:stride, c:c + stride * (wo - 1) + 1:stride]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """Dense 2-D convolution (cross-correlation), weights shaped (O, C, k, k)."""
    _check_rank(x, 4, "conv2d")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError("conv2d", f"(N, {ci}, H, W)", x.shape)
    if kh == kw == 1 and stride == 1 and padding == 0:
        return _pointwise(x, w, b)
    ho = _out_size(h, kh, stride, padding, dilation)
    wo = _out_size(wd, kw, stride, padding, dilation)
    xp = _pad(x.data, padding)
    # columns laid out (N, C*kh*kw, Ho*Wo) with C slowest, matching w.reshape(O, -1)
    cols = np.empty((n, c, kh * kw, ho * wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = _tap(xp, i, j, ho, wo, stride, dilation).reshape(n, c, -1)
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        if w.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2]))
            w._accumulate(gw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(n, c, kh * kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    _tap(gxp, i, j, ho, wo, stride, dilation)[...] += gcols[:, :, i * kw + j]
            x._accumulate(gxp[:, :, padding:padding + h, padding:padding + wd])

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def _pointwise(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    n, c, h, wd = x.shape
    o = w.shape[0]
    wmat = w.data.reshape(o, c)
    xm = x.data.reshape(n, c, h * wd)
    out = np.matmul(wmat, xm)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, o, h, wd)

    def backward(g):
        g2 = g.reshape(n, o, h * wd)
        if w.requires_grad:
            w._accumulate(np.tensordot(g2, xm, axes=([0, 2], [0, 2])).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            x._accumulate(np.matmul(wmat.T, g2).reshape(x.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution; ``w`` is (O, C) or (O, C, 1, 1)."""
    _check_rank(x, 4, "conv1x1")
    if w.data.shape[1] != x.shape[1]:
        raise ShapeError("conv1x1", f"(N, {w.data.shape[1]}, H, W)", x.shape)
    return _pointwise(x, w, b)


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
                     dilation: int = 1) -> Tensor:
    """Per-channel 2-D convolution, weights shaped (C, k, k)."""
    _check_rank(x, 4, "depthwise_conv2d")
    n, c, h, wd = x.shape
    cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError("depthwise_conv2d", f"(N, {cw}, H, W)", x.shape)
    if stride == 1:
        return _depthwise_banded(x, w, padding, dilation)
    return _depthwise_taps(x, w, stride, padding, dilation)


def _band_index(k: int, wo: int, dilation: int):
    cols = np.arange(wo)
    rows = cols[None, :] + dilation * np.arange(k)[:, None]
    return rows, np.broadcast_to(cols, rows.shape)


def _banded(xd: np.ndarray, wd: np.ndarray, padding: int, dilation: int):
    # Each kernel row becomes a banded (Wp, Wo) matrix, so the whole
    # convolution is one batched matmul per channel over (row-window, Wp).
    n, c, h, width = xd.shape
    _, kh, kw = wd.shape
    ho = _out_size(h, kh, 1, padding, dilation)
    wo = _out_size(width, kw, 1, padding, dilation)
    wp = width + 2 * padding
    xp = _pad(xd, padding)
    rows, cols = _band_index(kw, wo, dilation)
    band = np.zeros((c, kh, wp, wo), dtype=xd.dtype)
    band[:, :, rows, cols] = wd[:, :, :, None]
    windows = sliding_window_view(xp.transpose(1, 0, 2, 3), dilation * (kh - 1) + 1, axis=2)
    windows = windows[..., ::dilation]  # (C, N, Ho, Wp, kh)
    a = windows.transpose(0, 1, 2, 4, 3).reshape(c, n * ho, kh * wp)
    out = np.matmul(a, band.reshape(c, kh * wp, wo)).reshape(c, n, ho, wo)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), a, (rows, cols)


def _depthwise_banded(x: Tensor, w: Tensor, padding: int, dilation: int) -> Tensor:
    n, c, h, wd = x.shape
    _, kh, kw = w.shape
    out, a, (rows, cols) = _banded(x.data, w.data, padding, dilation)
    ho, wo = out.shape[2:]
    wp = wd + 2 * padding
    # input gradient: correlation of g with the flipped kernel
    back_pad = dilation * (kh - 1) - padding

    def backward(g):
        if w.requires_grad:
            gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c, n * ho, wo)
            gband = np.matmul(a.transpose(0, 2, 1), gm).reshape(c, kh, wp, wo)
            w._accumulate(gband[:, :, rows, cols].sum(axis=-1))
        if x.requires_grad:
            if kh == kw and back_pad >= 0:
                x._accumulate(_banded(g, w.data[:, ::-1, ::-1], back_pad, dilation)[0])
            else:
                x._accumulate(_depthwise_input_grad_taps(g, w.data, x.shape, padding, dilation))

    return _make(out, (x, w), backward)


def _depthwise_input_grad_taps(g, wd, shape, padding, dilation):
    n, c, h, width = shape
    _, kh, kw = wd.shape
    ho, wo = g.shape[2:]
    gxp = np.zeros((n, c, h + 2 * padding, width + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            _tap(gxp, i, j, ho, wo, 1, dilation)[...] += g * wd[:, i, j][:, None, None]
    return gxp[:, :, padding:padding + h, padding:padding + width]


def _depthwise_taps(x: Tensor, w: Tensor, stride: int, padding: int, dilation: int) -> Tensor:
    n, c, h, wd = x.shape
    _, kh, kw = w.shape
    ho = _out_size(h, kh, stride, padding, dilation)
    wo = _out_size(wd, kw, stride, padding, dilation)
    xp = _pad(x.data, padding)
    wk = w.data[:, :, :, None, None]
    out = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out += _tap(xp, i, j, ho, wo, stride, dilation) * wk[:, i, j]

    def backward(g):
        if w.requires_grad:
            gw = np.empty(w.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    tap = _tap(xp, i, j, ho, wo, stride, dilation)
                    gw[:, i, j] = np.einsum("nchw,nchw->c", g, tap)
            w._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    _tap(gxp, i, j, ho, wo, stride, dilation)[...] += g * wk[:, i, j]
            x._accumulate(gxp[:, :, padding:padding + h, padding:padding + wd])

    return _make(out, (x, w), backward)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def max_pool2d(x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Max pooling; gradient goes to the first maximal tap in row-major order."""
    _check_rank(x, 4, "max_pool2d")
    n, c, h, wd = x.shape
    ho = _out_size(h, k, stride, padding, 1)
    wo = _out_size(wd, k, stride, padding, 1)
    xp = _pad(x.data, padding, -np.inf)
    taps = np.stack([_tap(xp, i, j, ho, wo, stride, 1) for i in range(k) for j in range(k)])
    best = taps.argmax(axis=0)
    out = np.take_along_axis(taps, best[None], axis=0)[0]

    def backward(g):
        hp, wp = xp.shape[2:]
        # flat index of the winning tap inside the padded input
        row = (np.arange(ho) * stride)[:, None] + best // k
        col = (np.arange(wo) * stride)[None, :] + best % k
        plane = (np.arange(n * c) * (hp * wp)).reshape(n, c, 1, 1)
        flat = (plane + row * wp + col).ravel()
        gxp = np.bincount(flat, weights=g.ravel(), minlength=n * c * hp * wp)
        gxp = gxp.reshape(n, c, hp, wp).astype(g.dtype, copy=False)
        x._accumulate(gxp[:, :, padding:padding + h, padding:padding + wd])

    return _make(out, (x,), backward)


def avg_pool2d(x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling over valid (non-padded) taps only."""
    _check_rank(x, 4, "avg_pool2d")
    n, c, h, wd = x.shape
    ho = _out_size(h, k, stride, padding, 1)
    wo = _out_size(wd, k, stride, padding, 1)
    xp = _pad(x.data, padding)
    ones = _pad(np.ones((1, 1, h, wd), dtype=x.data.dtype), padding)
    count = np.zeros((1, 1, ho, wo), dtype=x.data.dtype)
    out = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            out += _tap(xp, i, j, ho, wo, stride, 1)
            count += _tap(ones, i, j, ho, wo, stride, 1)
    out /= count

    def backward(g):
        gs = g / count
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                _tap(gxp, i, j, ho, wo, stride, 1)[...] += gs
        x._accumulate(gxp[:, :, padding:padding + h, padding:padding + wd])

    return _make(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    _check_rank(x, 4, "global_avg_pool")
    n, c, h, wd = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * wd), x.shape))

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully connected layer, ``w`` shaped (out_features, in_features)."""
    _check_rank(x, 2, "linear")
    if x.shape[1] != w.shape[1]:
        raise ShapeError("linear", f"(N, {w.shape[1]})", x.shape)
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ w.data)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    _check_rank(logits, 2, "softmax_cross_entropy")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError("softmax_cross_entropy", (n,), labels.shape)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()
    if not np.isfinite(loss):
        raise NumericError("non-finite cross-entropy loss")

    def backward(g):
        probs = np.exp(logp)
        probs[np.arange(n), labels] -= 1.0
        logits._accumulate(probs * (g / n))

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)
