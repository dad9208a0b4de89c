"""Minimal dense tensor engine with reverse-mode differentiation.

Values live in contiguous numpy float32 buffers (float64 for gradient
checking); image-like tensors are laid out [batch, height, width, channels].
Every differentiable op records an entry on the active Tape; ``backward``
replays the reachable part of the tape in reverse to populate ``grad``
buffers on the leaves.

There is no broadcasting beyond tensor-scalar (plus the explicit
``add_bias`` op); mismatched shapes fail loudly with both shapes named.
"""

from __future__ import annotations

import csv
import math
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class ConfigError(ValueError):
    """Invalid structural configuration (e.g. odd embedding channels)."""


class ContractError(RuntimeError):
    """An op was called outside its stated preconditions."""


_FLOAT_DTYPES = (np.float32, np.float64)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class _TapeEntry:
    __slots__ = ("index", "inputs", "output", "backward_fn")

    def __init__(self, index, inputs, output, backward_fn):
        self.index = index
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops; replaying it backward fills gradients.

    A tape is single-threaded. Use as a context manager to scope recording
    (the trainer opens a fresh tape per step so entries are freed); outside
    any explicit tape the thread's ambient tape is used.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def record(self, inputs, output, backward_fn) -> _TapeEntry:
        entry = _TapeEntry(len(self.entries), inputs, output, backward_fn)
        self.entries.append(entry)
        return entry

    def clear(self):
        self.entries.clear()

    def __enter__(self):
        _state().tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state().tape_stack.pop()
        return False


_LOCAL = threading.local()


def _state():
    if not hasattr(_LOCAL, "tape_stack"):
        _LOCAL.tape_stack = [Tape()]
        _LOCAL.grad_enabled = True
    return _LOCAL


def _active_tape() -> Tape:
    return _state().tape_stack[-1]


def reset_ambient_tape():
    """Replace the thread's bottom-of-stack tape (used by tests)."""
    _state().tape_stack[0] = Tape()


class no_grad:
    """Context manager disabling tape recording (inference / matching)."""

    def __enter__(self):
        st = _state()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _state().grad_enabled = self._prev
        return False


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """Dense n-dimensional float array with optional gradient buffer.

    Immutable after construction except for ``grad``; ops return new tensors.
    """

    __slots__ = ("data", "requires_grad", "grad", "_entry")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._entry: _TapeEntry | None = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all shape checks live in the op functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)


def _as_tensor_like(value, ref: Tensor) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=ref.dtype))


def _result_dtype(*arrays):
    return np.float64 if any(a.dtype == np.float64 for a in arrays) else np.float32


def _make_result(data, inputs, backward_fn) -> Tensor:
    """Wrap an op result, recording on the active tape when grads are needed."""
    out = Tensor(data)
    st = _state()
    if st.grad_enabled and any(t.requires_grad for t in inputs if isinstance(t, Tensor)):
        out.requires_grad = True
        tensor_inputs = tuple(t for t in inputs if isinstance(t, Tensor))
        out._entry = _active_tape().record(tensor_inputs, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be a scalar recorded on a tape. Leaves that appear on the
    replayed tape but do not contribute to the loss receive zero grad.
    """
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._entry is None:
        if loss.requires_grad:
            # a bare leaf: d loss / d loss = 1
            _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        raise ContractError("loss is not connected to a tape")

    # collect the subgraph feeding the loss, then replay in tape order
    entries: dict[int, _TapeEntry] = {}
    frontier = [loss._entry]
    while frontier:
        entry = frontier.pop()
        if entry.index in entries:
            continue
        entries[entry.index] = entry
        for t in entry.inputs:
            if t._entry is not None:
                frontier.append(t._entry)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for entry in sorted(entries.values(), key=lambda e: e.index, reverse=True):
        for t in entry.inputs:
            if t.requires_grad and t._entry is None:
                leaves[id(t)] = t
        out_grad = grads.pop(id(entry.output), None)
        if out_grad is None:
            continue
        input_grads = entry.backward_fn(out_grad)
        for t, g in zip(entry.inputs, input_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if t._entry is None:
                _accumulate_leaf(t, g)
            elif key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    # leaves on the replayed subgraph that the loss never reached get zeros
    for t in leaves.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def _accumulate_leaf(t: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} does not match shape {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make_result(a.data + np.asarray(s, dtype=a.dtype), (a,), lambda g: (g,))
    _check_same_shape("add", a, b)
    dt = _result_dtype(a.data, b.data)
    return _make_result(a.data.astype(dt) + b.data.astype(dt), (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make_result(a.data - np.asarray(s, dtype=a.dtype), (a,), lambda g: (g,))
    _check_same_shape("sub", a, b)
    dt = _result_dtype(a.data, b.data)
    return _make_result(a.data.astype(dt) - b.data.astype(dt), (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make_result(a.data * np.asarray(s, dtype=a.dtype), (a,), lambda g: (g * s,))
    _check_same_shape("mul", a, b)
    dt = _result_dtype(a.data, b.data)
    ad, bd = a.data, b.data
    return _make_result(
        ad.astype(dt) * bd.astype(dt), (a, b), lambda g: (g * bd, g * ad)
    )


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make_result(a.data / np.asarray(s, dtype=a.dtype), (a,), lambda g: (g / s,))
    if b.size == 1 and a.shape != b.shape:
        bd = b.data.reshape(())
        ad = a.data
        return _make_result(
            a.data / bd,
            (a, b),
            lambda g: (g / bd, np.asarray(-(g * ad).sum() / (bd * bd)).reshape(b.shape)),
        )
    _check_same_shape("div", a, b)
    ad, bd = a.data, b.data
    return _make_result(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., c] + b[c]: the one sanctioned non-scalar broadcast."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape {x.shape} does not match bias shape {b.shape}")
    axes = tuple(range(x.ndim - 1))
    return _make_result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.clip(xd, -88, None))),
                   np.exp(np.clip(xd, None, 88)) / (1.0 + np.exp(np.clip(xd, None, 88))))
    out = out.astype(xd.dtype)
    return _make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make_result(np.log(xd), (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make_result(out, (x,), lambda g: (g * out,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _make_result(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def pow_scalar(x: Tensor, exponent: float) -> Tensor:
    c = float(exponent)
    xd = x.data
    out = xd ** c

    def bwd(g):
        if c == 0.0:
            return (np.zeros_like(xd),)
        return (g * c * xd ** (c - 1.0),)

    return _make_result(out, (x,), bwd)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only strictly inside (lo, hi)."""
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = (xd > lo) & (xd < hi)
    return _make_result(out, (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {shape}")
    old = x.shape
    return _make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make_result(
        np.ascontiguousarray(x.data.transpose(axes)), (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def take(x: Tensor, idx) -> Tensor:
    """Integer indexing on leading axes; gradient scatters back into zeros."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    if not all(isinstance(i, (int, np.integer)) for i in idx):
        raise ContractError("take supports integer indices on leading axes only")
    idx = tuple(int(i) for i in idx)
    xd = x.data

    def bwd(g):
        full = np.zeros_like(xd)
        full[idx] = g
        return (full,)

    return _make_result(xd[idx].copy(), (x,), bwd)


def broadcast_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat x along a new leading batch axis; gradient sums it away."""
    out = np.broadcast_to(x.data, (int(batch),) + x.shape).copy()
    return _make_result(out, (x,), lambda g: (g.sum(axis=0),))


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum with float64 accumulation (keeps masked reductions padding-exact)."""
    xd = x.data
    out = xd.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(xd.dtype)
    shape = xd.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(xd.dtype).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make_result(np.asarray(out), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in ax]))
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; outputs sum to 1 along ``axis``."""
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make_result(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make_result(out, (x,), bwd)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supported forms: [m,k]x[k,n]; stacked [...,m,k]x[...,k,n] with identical
    leading dims; and [...,m,k]x[k,n] (shared right operand).
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} do not match")
    if bd.ndim == 2:
        out = ad @ bd

        def bwd(g):
            ga = g @ bd.swapaxes(-1, -2)
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim - 1))))
            return (ga, gb)

        return _make_result(out, (a, b), bwd)
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: leading dims of {a.shape} and {b.shape} do not match")
    out = ad @ bd

    def bwd_stacked(g):
        return (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g)

    return _make_result(out, (a, b), bwd_stacked)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., in] @ w[in, out] (+ bias)."""
    out = matmul(x, w)
    return add_bias(out, b) if b is not None else out


# ---------------------------------------------------------------------------
# Layer normalization
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learnable scale/shift.

    Statistics are always computed in float64; reduced-precision normalization
    is a known convergence hazard.
    """
    c = x.shape[-1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(
            f"layer_norm: scale {scale.shape} / shift {shift.shape} do not match channels ({c},)"
        )
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = (xhat * scale.data + shift.data).astype(x.dtype)
    gdat = scale.data

    def bwd(g):
        g64 = g.astype(np.float64)
        axes = tuple(range(g.ndim - 1))
        d_scale = (g64 * xhat).sum(axis=axes)
        d_shift = g64.sum(axis=axes)
        dxhat = g64 * gdat
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (
            dx.astype(x.dtype),
            d_scale.astype(scale.dtype),
            d_shift.astype(shift.dtype),
        )

    return _make_result(out, (x, scale, shift), bwd)


# ---------------------------------------------------------------------------
# Convolution / resampling (NHWC)
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    # xp: padded [B, H, W, C] -> col [B*Ho*Wo, kh*kw*C]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))       # [B,Ho',Wo',C,kh,kw]
    win = win[:, ::stride, ::stride]
    b, ho, wo = win.shape[:3]
    col = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))  # [B,Ho,Wo,kh,kw,C]
    return col.reshape(b * ho * wo, kh * kw * xp.shape[3]), ho, wo


def _conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    kh, kw, cin, cout = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    col, ho, wo = _im2col(xp, kh, kw, stride)
    out = col @ w.reshape(kh * kw * cin, cout)
    return out.reshape(x.shape[0], ho, wo, cout)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NHWC input, weights [kh, kw, cin, cout]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/weights, got {x.shape} and {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weights {w.shape}")
    stride = int(stride)
    padding = int(padding)
    xd, wd = x.data, w.data
    kh, kw, cin, cout = wd.shape
    out = _conv2d_raw(xd, wd, stride, padding)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match out channels ({cout},)")
        out = out + b.data
    bsz, hin, win_ = xd.shape[0], xd.shape[1], xd.shape[2]
    ho, wo = out.shape[1], out.shape[2]
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g = np.ascontiguousarray(g)
        # weight grad: col^T @ g, with the column matrix recomputed
        xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
        col, _, _ = _im2col(xp, kh, kw, stride)
        gw = (col.T @ g.reshape(-1, cout)).reshape(kh, kw, cin, cout)
        # input grad: full correlation of the (dilated) grad with the flipped kernel
        if stride > 1:
            gd = np.zeros((bsz, (ho - 1) * stride + 1, (wo - 1) * stride + 1, cout), dtype=g.dtype)
            gd[:, ::stride, ::stride] = g
        else:
            gd = g
        slack_h = hin + 2 * padding - (gd.shape[1] + kh - 1)
        slack_w = win_ + 2 * padding - (gd.shape[2] + kw - 1)
        gdp = np.pad(gd, ((0, 0), (kh - 1, kh - 1 + slack_h), (kw - 1, kw - 1 + slack_w), (0, 0)))
        wf = np.ascontiguousarray(wd[::-1, ::-1].transpose(0, 1, 3, 2))  # [kh,kw,cout,cin]
        gx_p = _conv2d_raw(gdp, wf, 1, 0)
        gx = gx_p[:, padding:padding + hin, padding:padding + win_, :]
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 1, 2)))

    return _make_result(out, inputs, bwd)


def nearest_upsample2x(x: Tensor) -> Tensor:
    """Double height and width by pixel repetition (NHWC)."""
    if x.ndim != 4:
        raise ShapeError(f"nearest_upsample2x: expected 4-D NHWC input, got {x.shape}")
    xd = x.data
    out = xd.repeat(2, axis=1).repeat(2, axis=2)
    b, h, w, c = xd.shape

    def bwd(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _make_result(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Scaled dot-product attention over [B, N, C] streams, softmax on keys.

    Composed from primitive ops so gradients flow through the tape.
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError(f"attention expects [B,N,C] inputs, got {q.shape}, {k.shape}, {v.shape}")
    bsz, nq, c = q.shape
    nk = k.shape[1]
    if k.shape != (bsz, nk, c) or v.shape != (bsz, nk, c):
        raise ShapeError(f"attention: mismatched key/value shapes {k.shape}, {v.shape}")
    if c % num_heads != 0:
        raise ConfigError(f"hidden size {c} not divisible by {num_heads} heads")
    dh = c // num_heads

    def split(t, n):
        return transpose(reshape(t, (bsz, n, num_heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q, nq), split(k, nk), split(v, nk)
    att = matmul(qh, transpose(kh, (0, 1, 3, 2)))          # [B, h, Nq, Nk]
    att = softmax(mul(att, 1.0 / math.sqrt(dh)), axis=-1)
    out = matmul(att, vh)                                   # [B, h, Nq, dh]
    return reshape(transpose(out, (0, 2, 1, 3)), (bsz, nq, c))


# ---------------------------------------------------------------------------
# Position embedding
# ---------------------------------------------------------------------------

def sine_position_embedding(h: int, w: int, channels: int,
                            temperature: float = 10000.0,
                            eps: float = 1e-6,
                            dtype=np.float32) -> Tensor:
    """Deterministic sine/cosine grid embedding, shape [1, h, w, channels].

    channels/2 frequencies per spatial axis; coordinates run 1..extent and are
    normalized to (0, 2*pi].
    """
    if channels % 2 != 0:
        raise ConfigError(f"position embedding needs an even channel count, got {channels}")
    half = channels // 2
    ys = np.arange(1, h + 1, dtype=np.float64)[:, None] * np.ones((1, w))
    xs = np.arange(1, w + 1, dtype=np.float64)[None, :] * np.ones((h, 1))
    ys = ys / (h + eps) * (2.0 * np.pi)
    xs = xs / (w + eps) * (2.0 * np.pi)
    idx = np.arange(half, dtype=np.float64)
    dim_t = temperature ** (2.0 * (idx // 2) / half)

    def interleave(p):
        out = np.empty_like(p)
        out[..., 0::2] = np.sin(p[..., 0::2])
        out[..., 1::2] = np.cos(p[..., 1::2])
        return out

    emb = np.concatenate(
        [interleave(ys[..., None] / dim_t), interleave(xs[..., None] / dim_t)], axis=-1
    )[None]
    return Tensor(emb.astype(dtype))


# ---------------------------------------------------------------------------
# Debug / inspection
# ---------------------------------------------------------------------------

def dump_csv(t: Tensor, path) -> None:
    """Write a tensor as a flat CSV: header row with the shape, one value per line."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["shape"] + [str(s) for s in t.shape])
        for v in t.data.reshape(-1):
            writer.writerow([repr(float(v))])
