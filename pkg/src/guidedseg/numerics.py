"""Dense float64 tensors with reverse-mode differentiation.

Arrays are laid out height x width x channels with no batch axis; every
operator the segmentation pipeline needs lives here.  A graph is recorded
only while gradients are enabled (see :func:`no_grad`) and only for results
that depend on a tensor with ``requires_grad=True``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyMaskError, ShapeError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording (inference, finite differences)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


# Branch decisions (relu, clamp, argmax masks) can be recorded during one
# forward pass and replayed in later ones.  Replaying evaluates the smooth
# piece of a piecewise-smooth function that contains the recorded point,
# which is what a finite-difference gradient check needs near kinks.
_gate_trace = None
_gate_replay = False
_gate_pos = 0


@contextlib.contextmanager
def gate_trace(replay: list | None = None):
    """Record branch decisions into the yielded list, or replay ``replay``."""
    global _gate_trace, _gate_replay, _gate_pos
    saved = (_gate_trace, _gate_replay, _gate_pos)
    _gate_trace = [] if replay is None else replay
    _gate_replay = replay is not None
    _gate_pos = 0
    try:
        yield _gate_trace
        if _gate_replay and _gate_pos != len(_gate_trace):
            raise RuntimeError("replayed forward pass took fewer branch decisions than recorded")
    finally:
        _gate_trace, _gate_replay, _gate_pos = saved


def gate(decision: np.ndarray) -> np.ndarray:
    """Pass a boolean branch decision through the active trace, if any."""
    global _gate_pos
    if _gate_trace is None:
        return decision
    if not _gate_replay:
        _gate_trace.append(decision)
        return decision
    if _gate_pos >= len(_gate_trace) or _gate_trace[_gate_pos].shape != decision.shape:
        raise RuntimeError("replayed forward pass diverged from the recorded one")
    decision = _gate_trace[_gate_pos]
    _gate_pos += 1
    return decision


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad.

        Existing ``grad`` arrays are added to, never cleared.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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


def _wrap(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = _wrap(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else _wrap(np.asarray(x, dtype=DTYPE))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting; ``b`` may be a constant."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    return sum(x) / x.data.size


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); values below the floor receive no gradient.  NaN stays NaN."""
    xd = x.data
    keep = gate(xd >= floor)
    out = np.where(keep | np.isnan(xd), xd, floor)
    return _result(out, (x,), lambda g: (g * keep,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    if _gate_trace is None:
        pos = xd > 0
        return _result(np.maximum(xd, 0.0), (x,), lambda g: (g * pos,))
    pos = gate(xd > 0)
    return _result(np.where(pos, xd, 0.0), (x,), lambda g: (g * pos,))


# --------------------------------------------------------------------------
# convolution


def _zero_pad(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    h, w, c = x.shape
    out = np.zeros((h + 2 * padding, w + 2 * padding, c), dtype=DTYPE)
    out[padding:padding + h, padding:padding + w] = x
    return out


def _conv_core(xd: np.ndarray, wd: np.ndarray, stride: int, padding: int):
    """Forward convolution; returns the output and a ``backward(g, need_x, need_w)`` closure."""
    if xd.ndim != 3 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects HxWxC input and kxkxCinxCout kernel, "
                         f"got {xd.shape} and {wd.shape}")
    k, k2, c_in, c_out = wd.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if c_in != xd.shape[2]:
        raise ShapeError(f"kernel expects {c_in} input channels, input has {xd.shape[2]}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    h, w = xd.shape[:2]
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"input {h}x{w} too small for a {k}x{k} kernel")

    if k == 1 and stride == 1 and padding == 0:
        cols = xd.reshape(h * w, c_in)
        padded_shape = None
    else:
        xp = _zero_pad(xd, padding)
        padded_shape = xp.shape
        windows = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
        # (out_h, out_w, c_in, k, k) -> rows ordered like the kernel's (k, k, c_in)
        cols = windows[:out_h, :out_w].transpose(0, 1, 3, 4, 2).reshape(out_h * out_w, k * k * c_in)
    w2 = wd.reshape(k * k * c_in, c_out)
    out = (cols @ w2).reshape(out_h, out_w, c_out)

    def backward(g, need_x, need_w):
        g2 = g.reshape(out_h * out_w, c_out)
        gw = (cols.T @ g2).reshape(wd.shape) if need_w else None
        gx = None
        if need_x:
            if padded_shape is None:
                gx = (g2 @ w2.T).reshape(h, w, c_in)
            else:
                # one product per tap, so each tap's block is contiguous for the scatter-add
                per_tap = wd.reshape(k * k, c_in, c_out).transpose(0, 2, 1)
                gcols = np.matmul(g2, per_tap).reshape(k, k, out_h, out_w, c_in)
                gxp = np.zeros(padded_shape, dtype=DTYPE)
                for di in range(k):
                    for dj in range(k):
                        gxp[di:di + stride * out_h:stride,
                            dj:dj + stride * out_w:stride] += gcols[di, dj]
                gx = gxp[padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw

    return out, backward


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate an h x w x c_in map with a k x k x c_in x c_out kernel.

    The input is zero padded by ``padding`` on each spatial side.
    """
    out, core_backward = _conv_core(x.data, kernel.data, stride, padding)
    return _result(out, (x, kernel),
                   lambda g: core_backward(g, x.requires_grad, kernel.requires_grad))


def _tap_validity(n_in: int, n_out: int, k: int, stride: int, padding: int) -> np.ndarray:
    """valid[o, t] is True when tap t of output o reads an in-bounds input sample."""
    src = np.arange(n_out)[:, None] * stride + np.arange(k)[None, :] - padding
    return (src >= 0) & (src < n_in)


def conv2d_expand_concat(features: Tensor, vectors: Sequence[Tensor], kernel: Tensor,
                         stride: int = 1, padding: int = 0) -> Tensor:
    """Equal to ``conv2d(concat_channels([features] + [expand_spatial(v) ...]), kernel)``.

    The broadcast vectors are spatially constant, so their contribution at each
    output position is the sum of their per-tap responses over the taps that
    land inside the map; no h x w copy of a vector is ever built.
    """
    vectors = list(vectors)
    if not vectors:
        return conv2d(features, kernel, stride, padding)
    fd, wd = features.data, kernel.data
    c_f = fd.shape[2] if fd.ndim == 3 else -1
    widths = [v.shape[0] if v.ndim == 1 else -1 for v in vectors]
    if wd.ndim != 4 or min(widths) < 1 or wd.shape[2] != c_f + int(np.sum(widths)):
        raise ShapeError(f"kernel {wd.shape} does not fit {c_f} feature channels "
                         f"plus vectors of widths {widths}")
    k = wd.shape[0]
    base, core_backward = _conv_core(fd, wd[:, :, :c_f], stride, padding)
    out_h, out_w, c_out = base.shape
    h, w = fd.shape[:2]
    valid = (_tap_validity(h, out_h, k, stride, padding)[:, None, :, None]
             & _tap_validity(w, out_w, k, stride, padding)[None, :, None, :])
    taps = valid.reshape(out_h * out_w, k * k).astype(DTYPE)
    vec = np.concatenate([v.data for v in vectors])
    w_vec = wd[:, :, c_f:]
    response = np.einsum("ijco,c->ijo", w_vec, vec).reshape(k * k, c_out)
    out = base + (taps @ response).reshape(out_h, out_w, c_out)
    bounds = np.cumsum([0] + widths)

    def backward(g):
        gx, gw_feat = core_backward(g, features.requires_grad, kernel.requires_grad)
        g_resp = (taps.T @ g.reshape(out_h * out_w, c_out)).reshape(k, k, c_out)
        gk = None
        if kernel.requires_grad:
            gk = np.empty_like(wd)
            gk[:, :, :c_f] = gw_feat
            gk[:, :, c_f:] = vec[None, None, :, None] * g_resp[:, :, None, :]
        gvec = np.einsum("ijco,ijo->c", w_vec, g_resp)
        gvs = tuple(gvec[bounds[i]:bounds[i + 1]] for i in range(len(vectors)))
        return (gx, gk) + gvs

    return _result(out, (features, kernel) + tuple(vectors), backward)


# --------------------------------------------------------------------------
# channel manipulation


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    spatial = parts[0].shape[:2]
    for p in parts:
        if p.ndim != 3 or p.shape[:2] != spatial:
            raise ShapeError(f"spatial mismatch: {p.shape} vs {spatial}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[2] for p in parts])

    def backward(g):
        return tuple(g[:, :, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=2), tuple(parts), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[:, :, start:stop] = g
        return (full,)

    return _result(x.data[:, :, start:stop].copy(), (x,), backward)


def expand_spatial(v: Tensor, h: int, w: int) -> Tensor:
    """Duplicate a length-d vector at every position of an h x w grid."""
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    d = v.shape[0]
    return _result(np.broadcast_to(v.data, (h, w, d)).copy(), (v,),
                   lambda g: (g.sum(axis=(0, 1)),))


# --------------------------------------------------------------------------
# resizing


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the interpolation weights for output sample i (half-pixel centres)."""
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an h x w (x c) array; no graph is recorded."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    squeeze = x.ndim == 2
    xd = np.asarray(x, dtype=DTYPE)
    if squeeze:
        xd = xd[:, :, None]
    h, w = xd.shape[:2]
    if (h, w) == (out_h, out_w):
        out = xd.copy()
    else:
        ry, rx = bilinear_matrix(h, out_h), bilinear_matrix(w, out_w)
        out = np.einsum("bj,ajc->abc", rx, np.tensordot(ry, xd, axes=(1, 0)))
    return out[:, :, 0] if squeeze else out


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    h, w = x.shape[:2]
    if (h, w) == (out_h, out_w):
        return _result(x.data.copy(), (x,), lambda g: (g,))
    ry, rx = bilinear_matrix(h, out_h), bilinear_matrix(w, out_w)
    out = np.einsum("bj,ajc->abc", rx, np.tensordot(ry, x.data, axes=(1, 0)))

    def backward(g):
        tmp = np.einsum("bj,abc->ajc", rx, g)
        return (np.tensordot(ry.T, tmp, axes=(1, 0)),)

    return _result(out, (x,), backward)


# --------------------------------------------------------------------------
# probability and pooling


def softmax_array(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def channel_softmax(x: Tensor) -> Tensor:
    if x.ndim != 3 or x.shape[2] < 2:
        raise ShapeError(f"channel_softmax needs HxWxC with C >= 2, got {x.shape}")
    p = softmax_array(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), backward)


def masked_mean(features: Tensor, mask) -> Tensor:
    """Average the feature rows selected by a binary h x w mask.

    The mask is a constant: no gradient flows into it.
    """
    m = np.asarray(mask).astype(bool)
    if features.ndim != 3 or m.shape != features.shape[:2]:
        raise ShapeError(f"mask {m.shape} does not match features {features.shape}")
    n = int(m.sum())
    if n == 0:
        raise EmptyMaskError("masked_mean over an empty mask")
    rows = features.data[m]
    # rounding can push a mean one ulp outside its inputs; the true mean cannot
    out = np.clip(rows.sum(axis=0) / n, rows.min(axis=0), rows.max(axis=0))
    shape = features.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[m] = g / n
        return (full,)

    return _result(out, (features,), backward)
