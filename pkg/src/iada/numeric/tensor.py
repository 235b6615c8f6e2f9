"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a NumPy array. Differentiable operations return a new
Tensor holding references to its inputs and a closure that maps the output
gradient to input gradients. :meth:`Tensor.backward` walks that graph once in
reverse topological order.

Only the operations the rest of the package needs are provided. Broadcasting
is supported for the elementwise binary ops (bias adds, masks); everything
else expects exact shapes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

_DTYPES = {32: np.float32, 64: np.float64}
_state = {"dtype": np.float64, "check_finite": True}


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinity."""


class GraphError(RuntimeError):
    """Invalid use of the differentiation graph."""


def set_precision(bits: int) -> None:
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _state["dtype"] = _DTYPES[bits]


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(bits: int):
    old = _state["dtype"]
    set_precision(bits)
    try:
        yield
    finally:
        _state["dtype"] = old


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if _state["check_finite"] and not np.isfinite(out.sum()):
        if not np.isfinite(out).all():
            raise NonFiniteError(f"non-finite values produced by {op}")
    return out


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"
        self._consumed = False
        _check(arr, "construction")

    @classmethod
    def _make(cls, data, parents, backward, op):
        t = cls.__new__(cls)
        t.data = _check(data, op)
        t.grad = None
        t._consumed = False
        t.op = op
        if any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward = None
        return t

    # -- basic properties -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    # -- operators ----------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    # -- differentiation ------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward already called on this graph; rebuild it first")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self._consumed = True


def _topo_order(root: Tensor) -> list:
    order: list = []
    state: dict = {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            ps = state.get(id(p))
            if ps == 1:
                raise GraphError("cycle detected in computation graph")
            if ps is None and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _coerce(a, like: Tensor | None = None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else None
    return Tensor(a, dtype=dtype)


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product. A plain number or array operand is a constant."""
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)

        def bw_const(g):
            return (_unbroadcast(g * c, a.shape),)

        return Tensor._make(a.data * c, (a,), bw_const, "mul")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return Tensor._make(ad * bd, (a, b), bw, "mul")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        return (g * out * (1.0 - out),)

    return Tensor._make(out, (x,), bw, "sigmoid")


def gelu(x: Tensor) -> Tensor:
    xd = x.data

    def bw(g):
        return (kernels.gelu_backward(xd, g),)

    return Tensor._make(kernels.gelu_forward(xd), (x,), bw, "gelu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return Tensor._make(out, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data

    def bw(g):
        return (g / xd,)

    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(xd)  # non-positive input is reported by the finite check
    return Tensor._make(out, (x,), bw, "log")


# -- shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return Tensor._make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return Tensor._make(x.data.transpose(axes), (x,), bw, "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(np.array(x.data[idx]), (x,), bw, "getitem")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in xs], axis=axis), xs, bw, "stack")


# -- reductions ----------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def meanpool(x: Tensor, axis: int = 0) -> Tensor:
    """Arithmetic mean over ``axis`` (rows by default)."""
    if x.shape[axis] == 0:
        raise ValueError("meanpool over an empty axis")
    return tmean(x, axis=axis)


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with NumPy batch semantics; both operands at least 2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           lora_a: Tensor | None = None, lora_b: Tensor | None = None,
           lora_scale: float = 1.0) -> Tensor:
    """``x @ weight + bias`` plus an optional low-rank term.

    ``weight`` is (d_in, d_out). The adapter uses ``lora_a`` (r, d_in) and
    ``lora_b`` (d_out, r) and adds ``lora_scale * (x @ lora_a.T) @ lora_b.T``.
    """
    xd = x.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    w = weight.data
    out = x2 @ w
    if bias is not None:
        out += bias.data
    use_lora = lora_a is not None
    if use_lora:
        if lora_a.shape[0] == 0:
            raise ValueError("adapter rank must be positive")
        ad, bd = lora_a.data, lora_b.data
        xa = x2 @ ad.T
        out += (xa @ bd.T) * lora_scale
    parents = [x, weight]
    if bias is not None:
        parents.append(bias)
    if use_lora:
        parents += [lora_a, lora_b]

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g2 @ w.T if x.requires_grad else None
        grads = [None, x2.T @ g2 if weight.requires_grad else None]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        if use_lora:
            gs = g2 * lora_scale
            gxa = gs @ bd
            grads.append(gxa.T @ x2 if lora_a.requires_grad else None)
            grads.append(gs.T @ xa if lora_b.requires_grad else None)
            if gx is not None:
                gx = gx + gxa @ ad
        grads[0] = gx.reshape(xd.shape) if gx is not None else None
        return tuple(grads)

    return Tensor._make(out.reshape(lead + (w.shape[1],)), parents, bw, "linear")


# -- normalisation and attention --------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max subtraction. Masked-out entries get exactly zero weight;
    a row with no unmasked entry is all zeros."""
    xd = np.moveaxis(x.data, axis, -1)
    mshape = xd.shape
    x2 = np.ascontiguousarray(xd).reshape(-1, mshape[-1])
    m2 = None
    if mask is not None:
        m2 = np.ascontiguousarray(
            np.moveaxis(np.broadcast_to(mask, x.shape), axis, -1)).reshape(x2.shape)
    p2 = kernels.softmax_forward(x2, m2)
    out = np.moveaxis(p2.reshape(mshape), -1, axis)

    def bw(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, axis, -1)).reshape(p2.shape)
        dx = kernels.softmax_backward(p2, g2)
        return (np.moveaxis(dx.reshape(mshape), -1, axis),)

    return Tensor._make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=-1, keepdims=True))
    out = xd - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(out, (x,), bw, "log_softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax.

    ``logits`` is (N, V); ``targets`` an int array of length N.
    """
    targets = np.asarray(targets)
    xd = logits.data
    n = xd.shape[0]
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    logp = (xd - m) - np.log(s)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def bw(g):
        p = e / s
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return Tensor._make(np.asarray(loss, dtype=xd.dtype), (logits,), bw, "cross_entropy")


def affine_norm(x: Tensor, scale: Tensor | None = None, bias: Tensor | None = None,
                eps: float = 1e-5) -> Tensor:
    """Standardise over the last axis (zero mean, unit variance), then scale and shift."""
    xd = x.data
    d = xd.shape[-1]
    x2 = np.ascontiguousarray(xd).reshape(-1, d)
    xhat, rstd = kernels.layernorm_forward(x2, eps)
    out = xhat
    if scale is not None:
        out = out * scale.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + [t for t in (scale, bias) if t is not None]

    def bw(g):
        g2 = g.reshape(-1, d)
        grads = []
        dxhat = g2 * scale.data if scale is not None else g2
        grads.append(kernels.layernorm_backward(dxhat, xhat, rstd).reshape(xd.shape)
                     if x.requires_grad else None)
        if scale is not None:
            grads.append((g2 * xhat).sum(axis=0))
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._make(out.reshape(xd.shape), parents, bw, "affine_norm")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return Tensor._make(table.data[ids], (table,), bw, "embedding")


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                        mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` contiguous feature chunks.

    q is (..., n_q, d); k and v are (..., n_k, d). ``mask`` is boolean and
    broadcastable to (..., n_heads, n_q, n_k); False entries get zero weight.
    Queries with nothing to attend to return zeros.
    """
    qd, kd, vd = q.data, k.data, v.data
    d = qd.shape[-1]
    if d % n_heads:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    if kd.shape[-2] == 0:
        raise ValueError("attention over an empty memory")
    dh = d // n_heads
    scale = 1.0 / float(np.sqrt(dh))

    def split(a):
        s = a.shape
        return np.swapaxes(a.reshape(s[:-1] + (n_heads, dh)), -2, -3)

    qh, kh, vh = split(qd), split(kd), split(vd)
    scores = (qh @ np.swapaxes(kh, -1, -2)) * scale
    sshape = scores.shape
    s2 = np.ascontiguousarray(scores).reshape(-1, sshape[-1])
    m2 = None
    if mask is not None:
        m2 = np.ascontiguousarray(np.broadcast_to(mask, sshape)).reshape(s2.shape)
    p2 = kernels.softmax_forward(s2, m2)
    p = p2.reshape(sshape)
    oh = p @ vh
    out = np.swapaxes(oh, -2, -3)
    out = out.reshape(out.shape[:-2] + (d,))

    def merge_grad(gh, like):
        g = np.swapaxes(gh, -2, -3)
        return _unbroadcast(g.reshape(g.shape[:-2] + (d,)), like.shape)

    def bw(g):
        gh = split(g)
        gv = np.swapaxes(p, -1, -2) @ gh
        gp = gh @ np.swapaxes(vh, -1, -2)
        gs = kernels.softmax_backward(p2, np.ascontiguousarray(gp).reshape(p2.shape))
        gs = gs.reshape(sshape) * scale
        gq = gs @ kh
        gk = np.swapaxes(gs, -1, -2) @ qh
        return merge_grad(gq, q), merge_grad(gk, k), merge_grad(gv, v)

    return Tensor._make(np.ascontiguousarray(out), (q, k, v), bw, "attention")


def where_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant 0/1 mask (broadcast)."""
    return mul(x, np.asarray(mask, dtype=x.dtype))
