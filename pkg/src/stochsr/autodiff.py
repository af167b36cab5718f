"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is stored as 64-bit floats. Each differentiable operation
appends a node to an implicit tape (the DAG hanging off its output
tensor); ``backward`` walks that DAG once in reverse topological order
and accumulates gradients into every reachable tensor that requires
them. Repeated backward calls accumulate until ``zero_grad``.

The subgradient of ``abs`` and ``prelu`` at 0 is defined as 0.
"""

from __future__ import annotations

import itertools

import numpy as np

_node_ids = itertools.count(1)


class TapeNode:
    """Record of one differentiable operation.

    ``backward_fn`` maps the output gradient to a tuple of gradients
    aligned with ``parents`` (entries may be None for constant inputs).
    """

    __slots__ = ("id", "op_kind", "parents", "backward_fn")

    def __init__(self, op_kind, parents, backward_fn):
        self.id = next(_node_ids)
        self.op_kind = op_kind
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional float64 array, optionally tracked on the tape."""

    __slots__ = ("values", "requires_grad", "grad", "node")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def tape_id(self):
        """Identifier of the producing tape node, or None for leaves."""
        return self.node.id if self.node is not None else None

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Value-equal tensor that is off the tape and receives no gradient."""
        return Tensor(self.values.copy(), requires_grad=False)

    def backward(self):
        backward(self)

    def sum(self):
        return reduce(self, "sum")

    def mean(self):
        return reduce(self, "mean")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return elementwise(self, other, "add")

    def __radd__(self, other):
        return elementwise(as_tensor(other), self, "add")

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __rsub__(self, other):
        return elementwise(as_tensor(other), self, "sub")

    def __mul__(self, other):
        return elementwise(self, other, "mul")

    def __rmul__(self, other):
        return elementwise(as_tensor(other), self, "mul")

    def __neg__(self):
        return elementwise(as_tensor(-1.0), self, "mul")


def as_tensor(x):
    """Coerce scalars and arrays to constant (off-tape) tensors."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _attach(out, op_kind, parents, backward_fn):
    """Put `out` on the tape iff any parent is tracked."""
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(op_kind, parents, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def elementwise(a, b, kind):
    """Elementwise add/sub/mul; `b` may broadcast along leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"elementwise {kind}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None
    if kind == "add":
        out = Tensor(a.values + b.values)

        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    elif kind == "sub":
        out = Tensor(a.values - b.values)

        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    elif kind == "mul":
        out = Tensor(a.values * b.values)

        def bwd(g):
            return (
                _unbroadcast(g * b.values, a.shape),
                _unbroadcast(g * a.values, b.shape),
            )

    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _attach(out, kind, (a, b), bwd)


def add(a, b):
    return elementwise(a, b, "add")


def sub(a, b):
    return elementwise(a, b, "sub")


def mul(a, b):
    return elementwise(a, b, "mul")


def abs_(a):
    """Elementwise absolute value; backward passes sgn(a), 0 at a == 0."""
    a = as_tensor(a)
    out = Tensor(np.abs(a.values))
    sign = np.sign(a.values)

    def bwd(g):
        return (g * sign,)

    return _attach(out, "abs", (a,), bwd)


def prelu(a, slope):
    """a where a > 0, slope * a elsewhere; slope is scalar or per-channel.

    Per-channel slope has shape (C,) against NCHW (or CHW) input. The
    derivative w.r.t. `a` at exactly 0 is taken as 0.
    """
    a, slope = as_tensor(a), as_tensor(slope)
    if slope.values.ndim == 0:
        s = slope.values
        s_shape = ()
    elif slope.values.ndim == 1:
        # channel axis is -3 for CHW/NCHW inputs
        if a.values.ndim < 3 or a.shape[-3] != slope.shape[0]:
            raise ValueError(
                f"per-channel slope {slope.shape} does not match input {a.shape}"
            )
        s = slope.values.reshape(-1, 1, 1)
        s_shape = slope.shape
    else:
        raise ValueError("prelu slope must be scalar or 1-D per-channel")
    pos = a.values > 0
    neg = a.values < 0
    out = Tensor(np.where(pos, a.values, s * a.values))

    def bwd(g):
        ga = g * (pos + s * neg)
        gs = g * a.values * neg
        if s_shape == ():
            gs = gs.sum()
        else:
            reduce_axes = tuple(i for i in range(g.ndim) if i != g.ndim - 3)
            gs = gs.sum(axis=reduce_axes)
        return ga, np.asarray(gs, dtype=np.float64)

    return _attach(out, "prelu", (a, slope), bwd)


def relu(a):
    """max(a, 0); derivative at 0 is 0."""
    a = as_tensor(a)
    pos = a.values > 0
    out = Tensor(np.where(pos, a.values, 0.0))

    def bwd(g):
        return (g * pos,)

    return _attach(out, "relu", (a,), bwd)


def sigmoid(a):
    """1 / (1 + exp(-a)); backward is y * (1 - y)."""
    a = as_tensor(a)
    v = a.values
    y = np.empty_like(v)
    m = v >= 0
    y[m] = 1.0 / (1.0 + np.exp(-v[m]))
    e = np.exp(v[~m])
    y[~m] = e / (1.0 + e)
    out = Tensor(y)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _attach(out, "sigmoid", (a,), bwd)


def _pad_spatial(x, p):
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=np.float64)
    out[:, :, p : p + h, p : p + w] = x
    return out


def _im2col(xp_t, kh, kw, h_out, w_out):
    """GEMM-ready (kh*kw*C, N*Ho*Wo) matrix from a (C, N, Hp, Wp) input."""
    c, n = xp_t.shape[:2]
    cols = np.empty((kh * kw, c, n, h_out, w_out), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            cols[ky * kw + kx] = xp_t[:, :, ky : ky + h_out, kx : kx + w_out]
    return cols.reshape(kh * kw * c, n * h_out * w_out)


def conv2d(x, weight, bias, padding=None):
    """Stride-1 2-D cross-correlation on NCHW input.

    `weight` has shape (O, I, k, k) with odd k; `padding` defaults to
    (k - 1) // 2 which preserves spatial size.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.values.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {x.shape}")
    o, i, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if x.shape[1] != i:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, weight {i}")
    if bias.shape != (o,):
        raise ValueError(f"conv2d bias must have shape ({o},), got {bias.shape}")
    if padding is None:
        padding = (kh - 1) // 2
    n, _, h, w = x.shape
    h_out, w_out = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    xp_t = _pad_spatial(x.values, padding).transpose(1, 0, 2, 3)  # (C, N, Hp, Wp) copy
    xp_t = np.ascontiguousarray(xp_t)
    cols = _im2col(xp_t, kh, kw, h_out, w_out)
    # one GEMM contracting (ky, kx, i): (O, kh*kw*I) x (kh*kw*I, N*Ho*Wo)
    w_mat = np.ascontiguousarray(weight.values.transpose(2, 3, 1, 0)).reshape(kh * kw * i, o)
    out_v = (w_mat.T @ cols).reshape(o, n, h_out, w_out).transpose(1, 0, 2, 3)
    out = Tensor(out_v + bias.values[None, :, None, None])

    def bwd(g):
        gb = g.sum(axis=(0, 2, 3))
        g_mat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw_kxio = (g_mat @ cols.T).reshape(o, kh, kw, i)
        gw = np.ascontiguousarray(gw_kxio.transpose(0, 3, 1, 2))
        gcols = (w_mat @ g_mat).reshape(kh * kw, i, n, h_out, w_out)
        gxp_t = np.zeros_like(xp_t)
        for ky in range(kh):
            for kx in range(kw):
                gxp_t[:, :, ky : ky + h_out, kx : kx + w_out] += gcols[ky * kw + kx]
        if padding:
            gxp_t = gxp_t[:, :, padding:-padding, padding:-padding]
        return np.ascontiguousarray(gxp_t.transpose(1, 0, 2, 3)), gw, gb

    return _attach(out, "conv2d", (x, weight, bias), bwd)


def pixel_shuffle(x, r):
    """Rearrange (N, C*r*r, H, W) into (N, C, H*r, W*r).

    out[n, c, y*r+dy, x*r+dx] = in[n, c*r*r + dy*r + dx, y, x]
    """
    x = as_tensor(x)
    if x.values.ndim != 4:
        raise ValueError(f"pixel_shuffle expects NCHW input, got shape {x.shape}")
    n, c2, h, w = x.shape
    if c2 % (r * r) != 0:
        raise ValueError(f"channels {c2} not divisible by r^2 = {r * r}")
    c = c2 // (r * r)
    v = x.values.reshape(n, c, r, r, h, w)
    out = Tensor(np.ascontiguousarray(v.transpose(0, 1, 4, 2, 5, 3)).reshape(n, c, h * r, w * r))

    def bwd(g):
        gv = g.reshape(n, c, h, r, w, r)
        return (np.ascontiguousarray(gv.transpose(0, 1, 3, 5, 2, 4)).reshape(n, c2, h, w),)

    return _attach(out, "pixel_shuffle", (x,), bwd)


def reduce(a, kind):
    """Reduce to a scalar tensor by sum or mean."""
    a = as_tensor(a)
    if kind == "sum":
        out = Tensor(a.values.sum())

        def bwd(g):
            return (np.full(a.shape, g, dtype=np.float64),)

    elif kind == "mean":
        out = Tensor(a.values.mean())
        inv_n = 1.0 / a.size

        def bwd(g):
            return (np.full(a.shape, g * inv_n, dtype=np.float64),)

    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _attach(out, kind, (a,), bwd)


def detach(a):
    return as_tensor(a).detach()


def backward(loss):
    """Accumulate d(loss)/d(t) into `t.grad` for every reachable tensor.

    `loss` must be scalar. Nodes are visited exactly once in reverse
    topological order; gradients sum over shared subexpressions.
    """
    if loss.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    # iterative post-order over tape nodes
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, processed = stack.pop()
        if t.node is None:
            continue
        if processed:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            if p.requires_grad and p.node is not None and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.asarray(1.0)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.grad is None:
            t.grad = np.zeros(t.shape, dtype=np.float64)
        t.grad += g
        pgrads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:
                # leaf: accumulate directly
                if p.grad is None:
                    p.grad = np.zeros(p.shape, dtype=np.float64)
                p.grad += pg
            else:
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
    if loss.node is None and loss.requires_grad:
        if loss.grad is None:
            loss.grad = np.zeros((), dtype=np.float64)
        loss.grad = loss.grad + 1.0
