"""Reverse-mode autodiff over numpy arrays.

Float32 is the working precision; reductions that feed losses accumulate in
float64 before rounding back. Float64 tensors are supported so finite-difference
checks can run at full precision.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operands have incompatible shapes; message names the offending shapes."""


class GraphError(ValueError):
    """Backward called on an invalid node (e.g. non-scalar loss)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE, copy=False)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(astensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(astensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def astensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


def _node(data, parents, vjp):
    """Build a graph node; collapses to a constant when the tape is off."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = astensor(a), astensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = astensor(a), astensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = astensor(a), astensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _node(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = astensor(a), astensor(b)
    data = a.data / b.data
    return _node(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a):
    a = astensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = astensor(a)
    data = np.exp(a.data)
    return _node(data, (a,), lambda g: (g * data,))


def log(a):
    a = astensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = astensor(a)
    data = np.sqrt(a.data)
    return _node(data, (a,), lambda g: (g / (2.0 * data),))


def tanh(a):
    a = astensor(a)
    data = np.tanh(a.data)
    return _node(data, (a,), lambda g: (g * (1.0 - data * data),))


def sigmoid(a):
    a = astensor(a)
    # numerically stable two-branch form
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype, copy=False)
    return _node(data, (a,), lambda g: (g * data * (1.0 - data),))


def clip(a, lo, hi):
    """Clamp values; gradient passes through inside [lo, hi], zero outside."""
    a = astensor(a)
    data = np.clip(a.data, lo, hi)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(a.dtype)
    return _node(data, (a,), lambda g: (g * inside,))


def stopgrad(a):
    a = astensor(a)
    return Tensor(a.data.copy(), dtype=a.dtype)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = astensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = astensor(a)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a, idx):
    a = astensor(a)
    data = a.data[idx]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _node(data, (a,), vjp)


def concat(tensors, axis=-1):
    tensors = [astensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    nd = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != nd:
            raise ShapeError(
                f"concat: rank mismatch {tensors[0].shape} vs {t.shape}"
            )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis if axis >= 0 else nd + axis
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(data, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# reductions (accumulate in float64, round back to the input dtype)
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = astensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False),)

    return _node(data, (a,), vjp)


def mean_(a, axis=None, keepdims=False):
    a = astensor(a)
    n = a.size if axis is None else a.shape[axis]
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, np.asarray(1.0 / n, dtype=a.dtype))


def max_reduce(a, axis=-1, keepdims=False):
    """Max along an axis; gradient split equally among tied maxima."""
    a = astensor(a)
    data = np.max(a.data, axis=axis, keepdims=keepdims)
    full = data if keepdims else np.expand_dims(data, axis)
    mask = (a.data == full).astype(a.dtype)
    counts = mask.sum(axis=axis, keepdims=True)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (mask / counts * gg,)

    return _node(data, (a,), vjp)


def mean_pool(H):
    """Mean over the sequence axis (-2): (..., L, d) -> (..., d)."""
    H = astensor(H)
    if H.ndim < 2:
        raise ShapeError(f"mean_pool: expected at least 2-d input, got {H.shape}")
    if H.shape[-2] < 1:
        raise ShapeError(f"mean_pool: empty sequence in shape {H.shape}")
    return mean_(H, axis=-2)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = _unbroadcast(g @ bt, a.shape)
        gb = _unbroadcast(at @ g, b.shape)
        return ga, gb

    return _node(data, (a, b), vjp)


def linear(x, w, b=None):
    """x @ w + b with shape checking."""
    x, w = astensor(x), astensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def l2_norm(a, axis=-1):
    """Euclidean norm along an axis; gradient guarded at zero."""
    a = astensor(a)
    sq = np.sum(a.data * a.data, axis=axis)
    data = np.sqrt(sq)

    def vjp(g):
        denom = np.expand_dims(np.maximum(data, 1e-12), axis)
        return (np.expand_dims(g, axis) * a.data / denom,)

    return _node(data, (a,), vjp)


def softmax(a, axis=-1):
    a = astensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * data, axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _node(data, (a,), vjp)


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize the last axis, then apply elementwise affine."""
    x, gain, bias = astensor(x), astensor(gain), astensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layernorm: affine shapes {gain.shape}/{bias.shape} do not match feature dim of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gain.data * xhat + bias.data

    def vjp(g):
        gxhat = g * gain.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        axes = tuple(range(x.ndim - 1))
        ggain = (g * xhat).sum(axis=axes)
        gbias = g.sum(axis=axes)
        return gx.astype(x.dtype, copy=False), ggain, gbias

    return _node(data, (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# stochastic / loss ops
# ---------------------------------------------------------------------------

def dropout(a, p, seed, train):
    """Train-only inverted dropout with an explicit per-call seed."""
    a = astensor(a)
    if not train or p <= 0.0:
        return a
    rng = np.random.Generator(np.random.PCG64(seed))
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / np.asarray(1.0 - p, dtype=a.dtype)
    return mul(a, Tensor(mask, dtype=a.dtype))


_EPS_PROB = 1e-7


def cross_entropy(p_fake, y):
    """Mean binary cross-entropy from fake-probabilities; 64-bit accumulation."""
    p = astensor(p_fake)
    yv = np.asarray(y, dtype=np.float64)
    pc = clip(p, _EPS_PROB, 1.0 - _EPS_PROB)
    yt = Tensor(yv, dtype=p.dtype)
    one = Tensor(np.asarray(1.0, dtype=p.dtype))
    ll = add(mul(yt, log(pc)), mul(sub(one, yt), log(sub(one, pc))))
    return neg(mean_(ll))


def kl_div(p, q, axis=-1):
    """Mean KL(p || q) over distribution rows; both sides clamped away from 0."""
    p, q = astensor(p), astensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_div: shapes differ: {p.shape} vs {q.shape}")
    pc = clip(p, _EPS_PROB, 1.0)
    qc = clip(q, _EPS_PROB, 1.0)
    terms = mul(pc, sub(log(pc), log(qc)))
    return mean_(sum_(terms, axis=axis))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _split_heads(x, n_heads):
    # (..., L, D) -> (..., h, L, dh)
    *lead, L, D = x.shape
    dh = D // n_heads
    x = reshape(x, (*lead, L, n_heads, dh))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return transpose(x, axes)


def _merge_heads(x):
    # (..., h, L, dh) -> (..., L, h*dh)
    *lead, h, L, dh = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    x = transpose(x, axes)
    return reshape(x, (*lead, L, h * dh))


def multi_head_attention(q_in, kv_in, wq, wk, wv, wo, n_heads):
    """Scaled dot-product attention.

    Returns (output, attn) where attn is the head-averaged, row-stochastic
    attention matrix (..., Lq, Lk) kept on the tape so downstream consumers
    of the attention pattern receive gradients.
    """
    q_in, kv_in = astensor(q_in), astensor(kv_in)
    D = q_in.shape[-1]
    if D % n_heads != 0:
        raise ShapeError(f"attention: model dim {D} not divisible by {n_heads} heads")
    if kv_in.shape[-1] != D:
        raise ShapeError(f"attention: query dim {q_in.shape} vs key/value dim {kv_in.shape}")
    dh = D // n_heads
    q = _split_heads(linear(q_in, wq), n_heads)
    k = _split_heads(linear(kv_in, wk), n_heads)
    v = _split_heads(linear(kv_in, wv), n_heads)
    kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = mul(matmul(q, kt), np.asarray(1.0 / math.sqrt(dh), dtype=q.dtype))
    attn_heads = softmax(scores, axis=-1)
    ctx = matmul(attn_heads, v)
    out = linear(_merge_heads(ctx), wo)
    attn = mean_(attn_heads, axis=-3)
    return out, attn


# ---------------------------------------------------------------------------
# op dispatch surface
# ---------------------------------------------------------------------------

_FORWARD_OPS = {
    "matmul": matmul,
    "add": add,
    "concat": concat,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "tanh": tanh,
    "layernorm": layernorm,
    "mean_pool": mean_pool,
    "max_reduce": max_reduce,
    "l2_norm": l2_norm,
    "kl_div": kl_div,
    "cross_entropy": cross_entropy,
    "dropout": dropout,
    "linear": linear,
    "multi_head_attention": multi_head_attention,
}


def forward(op_kind, inputs, **kwargs):
    """Dispatch a forward op by name (the registry also backs the self-check suite)."""
    try:
        fn = _FORWARD_OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op_kind {op_kind!r}; expected one of {sorted(_FORWARD_OPS)}")
    if op_kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss):
    """Reverse-mode sweep from a scalar loss; accumulates into .grad fields."""
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.dtype)
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None else g
            else:
                parent.grad = parent.grad + g
        if node is not loss:
            node.grad = None
            node._parents = ()
            node._vjp = None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adamw_step(param, grad, m, v, step, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    Mutates and returns (param, m, v). `step` is 1-based.
    """
    if lr <= 0:
        raise ValueError(f"adamw_step: lr must be positive, got {lr}")
    b1, b2 = betas
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1**step)
    vhat = v / (1.0 - b2**step)
    if weight_decay:
        param -= lr * weight_decay * param
    param -= lr * mhat / (np.sqrt(vhat) + eps)
    return param, m, v


class AdamW:
    """AdamW over a list of parameter Tensors; missing grads count as zero."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr <= 0:
            raise ValueError(f"AdamW: lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        if lr <= 0:
            raise ValueError(f"AdamW.step: lr must be positive, got {lr}")
        self.step_count += 1
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adamw_step(
                p.data, g, m, v, self.step_count, lr,
                betas=self.betas, eps=self.eps, weight_decay=self.weight_decay,
            )


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_grad(fn, tensors, wrt, eps=1e-3):
    """Central-difference gradient of scalar fn w.r.t. tensors[wrt]."""
    t = tensors[wrt]
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn(*tensors).data)
        flat[i] = orig - eps
        lo = float(fn(*tensors).data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def gradcheck(fn, tensors, eps=1e-3, atol=1e-5, rtol=1e-3):
    """Compare analytic gradients of scalar fn against central differences.

    Returns the worst entrywise |analytic - numeric| / (atol/rtol + |numeric|);
    values <= rtol pass. Intended to run on float64 tensors so the oracle
    itself is trustworthy.
    """
    for t in tensors:
        t.grad = None
    loss = fn(*tensors)
    backward(loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        num = finite_difference_grad(fn, tensors, i, eps=eps)
        rel = np.abs(ana - num) / (atol / rtol + np.abs(num))
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst
