"""Dense tensors with tape-based reverse-mode autodiff, backed by numpy.

Storage defaults to float32; dot products and reductions accumulate in
float64 and are cast back to the operand dtype. Broadcasting follows the
trailing-dimension rule.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_state = {"grad": True, "dtype": np.float32}


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used when wrapping raw data."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


def get_default_dtype():
    return _state["dtype"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _state["dtype"])
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.reshape(shape)


def _result_dtype(*arrays):
    return np.result_type(*arrays)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw)


def neg(a):
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    a = _wrap(a)
    p = float(p)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = _wrap(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    a = _wrap(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), bw)


def absolute(a):
    a = _wrap(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a, lo, hi):
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * mask,))


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "gelu": gelu,
}


def elementwise(op, a, b=None):
    fn = ELEMENTWISE.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    if op in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}") from None
    dt = _result_dtype(a.data, b.data)
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    out = np.matmul(a64, b64).astype(dt)

    def bw(g):
        g64 = g.astype(np.float64, copy=False)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g64, np.swapaxes(b64, -1, -2)), a.shape).astype(a.dtype)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a64.reshape(-1, k).T @ np.broadcast_to(g64, out.shape).reshape(-1, out.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a64, -1, -2), g64), b.shape)
            gb = gb.astype(b.dtype)
        return ga, gb

    return _make(out, (a, b), bw)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape):
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = _wrap(a)
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j):
    perm = list(range(a.ndim))
    perm[i], perm[j] = perm[j], perm[i]
    return transpose(a, tuple(perm))


def broadcast_to(a, shape):
    a = _wrap(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def _is_basic_index(idx):
    if not isinstance(idx, tuple):
        idx = (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in idx)


def getitem(a, idx):
    a = _wrap(a)
    out = a.data[idx]
    if out.size == 0:
        raise ShapeError(f"index {idx!r} selects nothing from {a.shape}")
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), bw)


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tensors, bw)


def split(a, sizes, axis=-1):
    """Split into consecutive pieces with the given extents along ``axis``."""
    a = _wrap(a)
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split sizes {sizes} do not cover extent {a.shape[ax]}")
    pieces, start = [], 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(start, start + s)
        pieces.append(getitem(a, tuple(sl)))
        start += s
    return pieces


def repeat(a, k, axis):
    """np.repeat along one axis (nearest-neighbour upsampling)."""
    a = _wrap(a)
    ax = axis % a.ndim
    out = np.repeat(a.data, k, axis=ax)

    def bw(g):
        shp = list(a.shape)
        shp.insert(ax + 1, k)
        return (g.reshape(shp).sum(axis=ax + 1, dtype=np.float64).astype(g.dtype),)

    return _make(out, (a,), bw)


def take_rows(table, ids):
    """Gather rows of a 2-d table with an integer index array."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bw(g):
        full = np.zeros(table.shape, dtype=np.float64)
        np.add.at(full, ids, g)
        return (full.astype(table.dtype),)

    return _make(out, (table,), bw)


# ---------------------------------------------------------------- normalisation


def softmax(a, axis=-1):
    a = _wrap(a)
    x = a.data.astype(np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s64 = e / e.sum(axis=axis, keepdims=True)
    out = s64.astype(a.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        dot = (g64 * s64).sum(axis=axis, keepdims=True)
        return ((s64 * (g64 - dot)).astype(a.dtype),)

    return _make(out, (a,), bw)


LN_EPS = 1e-5


def layernorm(a, gamma=None, beta=None, axis=-1, eps=LN_EPS):
    a = _wrap(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and _wrap(p).shape != (n,):
            raise ShapeError(f"layernorm {name} shape {_wrap(p).shape} != ({n},)")
    if ax != a.ndim - 1:
        moved = transpose(a, tuple(i for i in range(a.ndim) if i != ax) + (ax,))
        out = layernorm(moved, gamma, beta, -1, eps)
        inv = list(range(a.ndim - 1))
        inv.insert(ax, a.ndim - 1)
        return transpose(out, tuple(inv))

    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat64 = xc * rstd
    xhat = _make(xhat64.astype(a.dtype), (a,), None)

    def bw(g):
        g64 = g.astype(np.float64)
        gm = g64.mean(axis=-1, keepdims=True)
        gxm = (g64 * xhat64).mean(axis=-1, keepdims=True)
        return ((rstd * (g64 - gm - xhat64 * gxm)).astype(a.dtype),)

    if xhat.requires_grad:
        xhat._backward = bw
    out = xhat
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


# ---------------------------------------------------------------- convolutions


def patch_project(x, patch, weight, bias=None):
    """Non-overlapping strided linear projection over (T, H, W) patches.

    ``x`` has shape (..., T, H, W, Cin); ``weight`` is (pt*ph*pw*Cin, D) with
    the patch flattened in (pt, ph, pw, Cin) order. Equivalent to a 3-d
    convolution whose stride equals its kernel.
    """
    x = _wrap(x)
    if x.ndim < 4:
        raise ShapeError(f"patch_project needs (..., T, H, W, C), got {x.shape}")
    pt, ph, pw = patch
    *lead, T, H, W, C = x.shape
    if T % pt or H % ph or W % pw:
        raise ShapeError(f"extent (T={T}, H={H}, W={W}) not divisible by patch {tuple(patch)}")
    k = pt * ph * pw * C
    if _wrap(weight).shape[0] != k:
        raise ShapeError(f"patch weight has {_wrap(weight).shape[0]} rows, patch holds {k}")
    n = len(lead)
    y = reshape(x, (*lead, T // pt, pt, H // ph, ph, W // pw, pw, C))
    perm = tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3, n + 5, n + 6)
    y = reshape(transpose(y, perm), (*lead, T // pt, H // ph, W // pw, k))
    out = matmul(y, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def patch_unproject(tokens, patch, weight, bias, channels):
    """Inverse-shape companion of patch_project: (..., T', H', W', D) -> (..., T'pt, H'ph, W'pw, C)."""
    tokens = _wrap(tokens)
    pt, ph, pw = patch
    *lead, T, H, W, _ = tokens.shape
    y = matmul(tokens, weight)
    if bias is not None:
        y = add(y, bias)
    n = len(lead)
    y = reshape(y, (*lead, T, H, W, pt, ph, pw, channels))
    perm = tuple(range(n)) + (n, n + 3, n + 1, n + 4, n + 2, n + 5, n + 6)
    return reshape(transpose(y, perm), (*lead, T * pt, H * ph, W * pw, channels))


def conv2d(x, weight, bias=None, kernel=(3, 3)):
    """Zero-padded 'same' convolution over the (H, W) axes of (..., H, W, Cin).

    ``weight`` is (kh*kw*Cin, Cout), rows ordered (kh, kw, Cin).
    """
    x = _wrap(x)
    weight = _wrap(weight)
    kh, kw = kernel
    *lead, H, W, C = x.shape
    if weight.shape[0] != kh * kw * C:
        raise ShapeError(f"conv weight rows {weight.shape[0]} != {kh}*{kw}*{C}")
    ph, pw = kh // 2, kw // 2
    pad = [(0, 0)] * len(lead) + [(ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)]
    xp = np.pad(x.data, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(-3, -2))
    # win: (..., H, W, C, kh, kw) -> (..., H, W, kh, kw, C)
    cols = np.moveaxis(win, -3, -1).reshape(*lead, H, W, kh * kw * C)
    cols_t = Tensor.__new__(Tensor)
    cols_t.data = cols
    cols_t.grad = None
    cols_t.requires_grad = x.requires_grad and _state["grad"]
    cols_t._parents = (x,) if cols_t.requires_grad else ()

    def bw(g):
        gc = g.reshape(*lead, H, W, kh, kw, C)
        full = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                full[..., i : i + H, j : j + W, :] += gc[..., i, j, :]
        return (full[..., ph : ph + H, pw : pw + W, :],)

    cols_t._backward = bw if cols_t.requires_grad else None
    out = matmul(cols_t, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------- autodiff driver


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Propagate d(loss)/d(node) through the tape.

    Leaf tensors accumulate into ``.grad``; the returned dict maps each leaf
    to its gradient array.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.astype(node.dtype) if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        node.grad = g
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
    return leaves


def grad_check(f, params, eps=1e-3, max_entries=None, seed=0):
    """Max relative error between autodiff and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params``. Everything runs in float64. With ``max_entries`` only that many
    seeded-random entries per parameter are probed.
    """
    params = list(params)
    saved = [p.data for p in params]
    rng = np.random.default_rng(seed)
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
            p.requires_grad = True
        with default_dtype(np.float64):
            loss = f()
            if loss.data.size != 1:
                raise ShapeError(f"grad_check needs a scalar loss, got shape {loss.shape}")
            backward(loss)
            worst = 0.0
            for p in params:
                analytic = np.zeros_like(p.data) if p.grad is None else p.grad.reshape(p.shape)
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
                with no_grad():
                    for i in idx:
                        orig = flat[i]
                        flat[i] = orig + eps
                        fp = float(f().data)
                        flat[i] = orig - eps
                        fm = float(f().data)
                        flat[i] = orig
                        num = (fp - fm) / (2 * eps)
                        ana = float(analytic.reshape(-1)[i])
                        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                        worst = max(worst, rel)
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.grad = None
    return worst
