"""Small define-by-run reverse-mode autodiff over numpy arrays.

Each operation returns a new :class:`Tensor` whose ``node`` records the
operation name, its parents and a closure mapping the output gradient to
parent gradients.  ``Tensor.backward`` walks the graph once in reverse
topological order and accumulates gradients additively into leaves.

Values are float32 unless a :func:`precision` block says otherwise; the
gradient checker runs in float64 so that finite differences are meaningful.
"""

import contextlib
import functools
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = {"dtype": np.float32, "freezer": None}


class ShapeError(ValueError):
    pass


class DetachError(RuntimeError):
    """A tensor that had to be gradient-detached still carries lineage."""


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


def default_dtype():
    return _state["dtype"]


class Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward

    def __repr__(self):
        return f"Node({self.op})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _state["dtype"])
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return detach(self)

    def backward(self, grad=None):
        backward(self, grad)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

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

    def __pow__(self, exponent):
        return power(self, exponent)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward_fn)
    return out


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in reversed(t.node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root, grad=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not root.requires_grad:
        return
    if grad is None:
        if root.size != 1:
            raise ShapeError(f"backward() without a seed gradient needs a scalar, got {root.shape}")
        grad = np.ones_like(root.data)
    grads = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    for t in reversed(_topo_order(root)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t.node.backward(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"{t.node.op}: gradient shape {pg.shape} != input shape {p.shape}")
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_shapes(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    # size-1 axes of a kept-dims reduction may broadcast; nothing else may
    if len(sa) == len(sb) and all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb)):
        return
    raise ShapeError(f"{op}: shape mismatch {sa} vs {sb}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_shapes("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_shapes("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_shapes("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_shapes("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), "div", bw)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    if p == 0.0:
        return _make(np.ones_like(a.data), (a,), "pow", lambda g: (np.zeros_like(g),))

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), "pow", bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), "log", lambda g: (g / a.data,))


def sigmoid(a):
    """Logistic function in the overflow-free form exp(-|x|)."""
    a = as_tensor(a)
    e = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.data.dtype)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape and reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} is out of range for a rank-{ndim} tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), "sum", bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = math.prod(a.shape[ax] for ax in axes)
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = _norm_axes(axis, ref.ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref.shape)) if i != ax):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {ax}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) if t.requires_grad else None
            for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:])
        )

    return _make(out, tuple(tensors), "concat", bw)


# ---------------------------------------------------------------------------
# stop-gradient


class DetachFreezer:
    """Record the values produced by ``detach`` and replay them later.

    Finite differences perturb the input of a function and cannot know that
    some intermediate value was meant to be a constant.  Replaying the
    recorded detached values turns the function into the one whose true
    gradient the autodiff engine computes.
    """

    def __init__(self):
        self.values = []
        self.replaying = False
        self.pos = 0

    def replay(self):
        self.replaying = True
        self.pos = 0

    def take(self, data):
        if not self.replaying:
            self.values.append(data.copy())
            return data
        if self.pos >= len(self.values):
            raise RuntimeError("replayed function called detach more often than when recorded")
        v = self.values[self.pos]
        self.pos += 1
        return v


@contextlib.contextmanager
def frozen_detach():
    prev = _state["freezer"]
    freezer = DetachFreezer()
    _state["freezer"] = freezer
    try:
        yield freezer
    finally:
        _state["freezer"] = prev


def detach(a):
    """Value-identical tensor with no lineage."""
    a = as_tensor(a)
    data = a.data
    freezer = _state["freezer"]
    if freezer is not None:
        data = freezer.take(data)
    return Tensor(data, dtype=data.dtype)


def is_detached(t):
    return t.node is None and not t.requires_grad


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D cross-correlation of [C,H,W] or [N,C,H,W] input with [O,C,k,k] weights."""
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected input [N,C,H,W] and weight [O,C,k,k], got {x.shape} and {w.shape}")
    n, c, h, wd = xd.shape
    o, cw, k, k2 = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cw} ({x.shape} vs {w.shape})")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {k} with pad {pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gr = g4.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gr.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gr.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gr @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
            gx = gx[0] if squeeze else gx
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, "conv2d", bw)


# ---------------------------------------------------------------------------
# bilinear upsampling (align_corners=False)


@functools.lru_cache(maxsize=64)
def interp_matrix(n_out, n_in):
    """Row i holds the 1-D linear interpolation weights for output sample i."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


def upsample_bilinear(x, size):
    """Resize the last two axes of ``x`` up to ``size`` = (H, W)."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"upsample_bilinear: need at least 2 dims, got {x.shape}")
    h, w = x.shape[-2:]
    H, W = size
    if H < h or W < w:
        raise ShapeError(f"upsample_bilinear: cannot downscale {(h, w)} to {(H, W)}")
    dt = x.data.dtype
    ah = interp_matrix(H, h).astype(dt)
    aw = interp_matrix(W, w).astype(dt)
    out = ah @ x.data @ aw.T

    def bw(g):
        return (ah.T @ g @ aw,)

    return _make(out, (x,), "upsample", bw)


# ---------------------------------------------------------------------------
# fused softmax cross-entropy


def cross_entropy_map(logits, labels, ignore_index=255):
    """Per-pixel -log softmax(logits)[label] for [N,K,H,W] logits.

    Returns a [N,1,H,W] tensor with zeros at ignored pixels.  Uses the
    log-sum-exp form, so saturated logits neither overflow nor hit log(0).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"cross_entropy_map: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"label values {sorted(set(labels[bad].tolist()))} outside [0, {k}) and != {ignore_index}")
    safe = np.where(valid, labels, 0).astype(np.int64)
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    lse = m + np.log(s)
    picked = np.take_along_axis(x, safe[:, None], axis=1)
    vmask = valid[:, None].astype(x.dtype)
    out = (lse - picked) * vmask

    def bw(g):
        p = e / s
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1.0, axis=1)
        return (p * (g * vmask),)

    return _make(out, (logits,), "cross_entropy", bw)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, x, eps=1e-3, dtype=np.float64):
    """Largest relative disagreement between backward() and central differences.

    ``f`` maps a Tensor to a scalar Tensor.  The check runs in ``dtype``
    (float64 by default) and replays detached values from the unperturbed
    evaluation, so stop-gradients are honoured by the numeric side too.
    """
    x = as_tensor(x)
    with precision(dtype), frozen_detach() as freezer:
        x0 = Tensor(x.data, requires_grad=True)
        y = f(x0)
        if y.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got shape {y.shape}")
        if not np.all(np.isfinite(y.data)):
            raise FloatingPointError("grad_check: f returned a non-finite value")
        y.backward()
        analytic = np.zeros_like(x0.data) if x0.grad is None else x0.grad
        if not np.all(np.isfinite(analytic)):
            raise FloatingPointError("grad_check: analytic gradient is not finite")
        freezer.replay()
        numeric = np.zeros_like(x0.data)
        base = x0.data
        for i in range(base.size):
            vals = []
            for sign in (1.0, -1.0):
                xp = base.copy()
                xp.flat[i] += sign * eps
                freezer.replay()
                v = f(Tensor(xp)).data
                if not np.all(np.isfinite(v)):
                    raise FloatingPointError(f"grad_check: f is not finite at element {i}")
                vals.append(float(v.reshape(-1)[0]))
            numeric.flat[i] = (vals[0] - vals[1]) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))
