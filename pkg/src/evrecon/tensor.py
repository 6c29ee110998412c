"""A small dense tensor with reverse-mode automatic differentiation.

Every op computes its forward value with numpy and, when gradients are
being tracked, records a closure that maps the output gradient to the
gradients of its inputs. :func:`backward` walks the recorded graph once in
reverse topological order and accumulates into the ``grad`` of leaves.

Image tensors use the ``(N, C, H, W)`` layout throughout.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import ContractError

_grad_enabled = True
_current_tag = None
_default_dtype = np.float32
_ids = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def tag(value):
    """Label every graph node created inside the block with ``value``.

    Used to count how many recurrent steps a loss can reach (see
    :func:`graph_tags`).
    """
    global _current_tag
    prev, _current_tag = _current_tag, value
    try:
        yield
    finally:
        _current_tag = prev


def set_default_dtype(dtype):
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_tag", "_id")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._tag = None
        self._id = next(_ids)

    # -- basic properties ---------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return detach(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar -----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        # scalars adopt the partner operand's dtype at the call site
        return Tensor(np.asarray(x, dtype=_default_dtype))
    return Tensor(x, dtype=dtype)


def _scalar_like(x, ref):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def make(data, parents, backward):
    """Wrap an op result; record the graph edge when any parent needs grad.

    ``backward(g)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._tag = _current_tag
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a = _scalar_like(a, b) if not isinstance(a, Tensor) else a
    b = _scalar_like(b, a)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a = _scalar_like(a, b) if not isinstance(a, Tensor) else a
    b = _scalar_like(b, a)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a = _scalar_like(a, b) if not isinstance(a, Tensor) else a
    b = _scalar_like(b, a)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return make(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b):
    a = _scalar_like(a, b) if not isinstance(a, Tensor) else a
    b = _scalar_like(b, a)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        ),
    )


def relu(x):
    mask = x.data > 0
    return make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def tanh(x):
    y = np.tanh(x.data)
    return make(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x):
    # split on sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype, copy=False)
    return make(y, (x,), lambda g: (g * y * (1 - y),))


def exp(x):
    y = np.exp(x.data)
    return make(y, (x,), lambda g: (g * y,))


def abs(x):  # noqa: A001 - mirrors numpy naming
    s = np.sign(x.data)
    return make(np.abs(x.data), (x,), lambda g: (g * s,))


def square(x):
    d = x.data
    return make(d * d, (x,), lambda g: (2 * g * d,))


def clamp(x, lo, hi):
    """Clip to ``[lo, hi]``; the gradient is passed only where unclipped."""
    mask = (x.data >= lo) & (x.data <= hi)
    return make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def reduce_sum(x, axis=None, keepdims=False):
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.asarray(out), (x,), back)


def reduce_mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot view {old} as {shape}") from None
    return make(out, (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis=1):
    tensors = list(tensors)
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis % ref.ndim
        ):
            raise ContractError(f"concat(axis={axis}): incompatible shapes {[u.shape for u in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def getitem(x, idx):
    """Basic (slice/int) indexing only; fancy indexing is rejected."""
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if not (isinstance(it, (slice, int, np.integer)) or it is Ellipsis or it is None):
            raise ContractError(f"slice: only basic indexing is supported, got {type(it).__name__}")
    shape, dtype = x.shape, x.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] += g
        return (out,)

    return make(x.data[idx], (x,), back)


def pad_zero(x, pads):
    """Zero-pad the last two axes by ``(top, bottom, left, right)``."""
    top, bottom, left, right = pads
    if min(pads) < 0:
        raise ContractError(f"pad_zero: negative padding {pads}")
    width = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    h, w = x.shape[-2:]
    out = np.pad(x.data, width)
    return make(out, (x,), lambda g: (g[..., top : top + h, left : left + w],))


def detach(x):
    """Same values, cut out of the graph."""
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# convolution-family ops


def same_padding(size, k, stride):
    """Output size ``ceil(size/stride)``; total padding split floor/ceil."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x, w, b=None, stride=1):
    """2D cross-correlation with same padding, ``x: (N,C,H,W)``, ``w: (O,C,k,k)``."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ContractError(f"conv2d: expected x (N,C,H,W) and square w (O,C,k,k), got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, ci, k, _ = w.shape
    if ci != c:
        raise ContractError(f"conv2d: input has {c} channels but weight expects {ci} ({x.shape} vs {w.shape})")
    if b is not None and b.shape != (o,):
        raise ContractError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
    ho, pt, pb = same_padding(h, k, stride)
    wo, pl, pr = same_padding(wd, k, stride)
    xpad = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    hp, wp = xpad.shape[2:]
    be = kernels.active
    cols = be.im2col(xpad, k, stride, ho, wo)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, o, ho, wo)

    def back(g):
        g = g.reshape(n, o, ho * wo)
        gw = gx = gb = None
        if w.requires_grad:
            gw = np.zeros_like(wmat)
            for i in range(n):
                gw += g[i] @ cols[i].T
            gw = gw.reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g)
            gpad = kernels.active.col2im(gcols, c, hp, wp, k, stride, ho, wo)
            gx = gpad[:, :, pt : pt + h, pl : pl + wd]
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make(out, parents, back)


@lru_cache(maxsize=64)
def _upsample_matrix(size, dtype_str):
    """Row-stochastic ``(2*size, size)`` matrix for ×2 linear interpolation.

    Sample position for output ``i`` is ``(i + 0.5) / 2 - 0.5``, clamped at
    the borders (align_corners=False).
    """
    m = np.zeros((2 * size, size))
    for i in range(2 * size):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(math.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        f = src - i0
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    m = m.astype(dtype_str)
    m.setflags(write=False)
    return m


def upsample2x(x):
    """Bilinear ×2 upsampling of the last two axes."""
    h, w = x.shape[-2:]
    mh = _upsample_matrix(h, x.dtype.str)
    mw = _upsample_matrix(w, x.dtype.str)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    return make(out, (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),))


def avg_pool2(x):
    """2×2 average pooling, stride 2; spatial dims must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"avg_pool2: spatial size must be even, got {x.shape}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        g = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (g.astype(x.dtype, copy=False),)

    return make(out, (x,), back)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over ``(N, H, W)``.

    In training mode batch statistics are used and the running buffers
    (plain numpy arrays) are updated in place; in eval mode the op is the
    affine map given by the running statistics.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractError(f"batchnorm2d: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    shape = (1, c, 1, 1)
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = x.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shape).astype(x.dtype)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                mg = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mgx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - mg - xhat * mgx) * inv.reshape(shape)
            else:
                gx = gxhat * inv.reshape(shape)
        return gx, gg, gbeta

    return make(out.astype(x.dtype, copy=False), (x, gamma, beta), back)


def bilinear_sample(x, sx, sy):
    """Sample ``x`` at per-pixel coordinates ``(sx, sy)`` of shape ``(N,H,W)``.

    Coordinates are clamped to the image border. Differentiable with respect
    to ``x`` only.
    """
    sx = np.asarray(sx, dtype=np.float64)
    sy = np.asarray(sy, dtype=np.float64)
    if sx.shape != (x.shape[0],) + x.shape[2:] or sy.shape != sx.shape:
        raise ContractError(f"bilinear_sample: coordinate maps {sx.shape} do not match image {x.shape}")
    out = kernels.active.bilinear_sample(x.data, sx, sy).astype(x.dtype, copy=False)
    return make(out, (x,), lambda g: (kernels.active.bilinear_sample_grad(g, sx, sy).astype(x.dtype, copy=False),))


# ---------------------------------------------------------------------------
# graph traversal


def _topo(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                stack.append((p, False))
    return order


def graph_tags(root):
    """Distinct :func:`tag` labels of every node reachable from ``root``."""
    return {n._tag for n in _topo(root) if n._tag is not None}


def backward(loss, retain_graph=False):
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf needing it."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar tensor, got shape {getattr(loss, 'shape', None)}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is detached from any tensor requiring grad")
    order = _topo(loss)
    grads = {loss._id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ContractError(f"backward: gradient shape {pg.shape} != tensor shape {p.shape}")
            prev = grads.get(p._id)
            grads[p._id] = pg if prev is None else prev + pg
        if not retain_graph:
            node._parents = ()
            node._backward = None
            node.requires_grad = False
