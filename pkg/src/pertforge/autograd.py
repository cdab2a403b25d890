"""Dense float32 tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous row-major numpy buffers (NCHW for images). Every
forward op appends a node to an implicit tape; backward() replays the tape
in exact reverse creation order and then releases it, so a second backward
without a fresh forward raises GraphError.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

from .errors import ContractError, GraphError, NumericsError, ShapeError

_seq = itertools.count()
_active_dtype = np.float32


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the compute dtype. Production code always runs in
    float32; the finite-difference oracle evaluates under float64 so its
    differences are not drowned by single-precision rounding."""
    global _active_dtype
    prev = _active_dtype
    _active_dtype = dtype
    try:
        yield
    finally:
        _active_dtype = prev


class Node:
    """One recorded op: parent tensors plus the closure that maps the
    output gradient to per-parent gradients."""

    __slots__ = ("seq", "parents", "backward_fn", "released")

    def __init__(self, parents, backward_fn):
        self.seq = next(_seq)
        self.parents = parents
        self.backward_fn = backward_fn
        self.released = False


class Tensor:
    """n-dimensional float32 array, optionally part of an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=_active_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"


def _tracked(*tensors):
    return any(t.requires_grad or t.node is not None for t in tensors)


def _result(data, opname, parents, backward_fn):
    """Wrap op output, checking finiteness and recording the tape node."""
    data = np.asarray(data, dtype=_active_dtype)
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"{opname}: non-finite value in output")
    out = Tensor(data)
    if _tracked(*parents):
        out.requires_grad = True
        out.node = Node(list(parents), backward_fn)
    return out


def _same_shape(opname, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    _same_shape("add", a, b)
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def mul_scalar(a, s):
    s = float(s)
    return _result(a.data * s, "mul-scalar", (a,), lambda g: (g * s,))


def div(a, b):
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    return _result(ad / bd, "div", (a, b),
                   lambda g: (g / bd, -g * ad / (bd * bd)))


def exp(a):
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def absolute(a):
    sgn = np.sign(a.data)  # 0 at exactly 0: subgradient tie broken to zero
    return _result(np.abs(a.data), "abs", (a,), lambda g: (g * sgn,))


def leaky_relu(a, slope=0.2):
    x = a.data
    pos = x > 0
    factor = np.where(pos, np.float32(1.0),
                      np.where(x < 0, np.float32(slope), np.float32(0.0)))
    return _result(np.where(pos, x, x * np.float32(slope)),
                   "leaky-relu", (a,), lambda g: (g * factor,))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def clamp_min(a, floor):
    floor = np.float32(floor)
    keep = a.data > floor
    return _result(np.maximum(a.data, floor), "clamp-min", (a,),
                   lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum_all(a):
    shape = a.data.shape
    return _result(a.data.sum(), "sum", (a,),
                   lambda g: (np.broadcast_to(g, shape).astype(np.float32),))


def mean_all(a):
    shape, n = a.data.shape, a.data.size
    return _result(a.data.mean(), "mean", (a,),
                   lambda g: ((np.broadcast_to(g, shape) / n).astype(np.float32),))


def l1_norm_mean(a):
    """Mean absolute value; subgradient 0 at exactly 0."""
    sgn = np.sign(a.data)
    n = a.data.size
    shape = a.data.shape
    return _result(np.abs(a.data).mean(), "l1-norm-mean", (a,),
                   lambda g: ((np.broadcast_to(g, shape) * sgn / n).astype(np.float32),))


def mean_abs_rows(a):
    """(N, M) -> (N,) per-row mean absolute value."""
    if a.data.ndim != 2:
        raise ShapeError(f"mean-abs-rows: expected 2-d input, got {a.data.shape}")
    sgn = np.sign(a.data)
    m = a.data.shape[1]
    return _result(np.abs(a.data).mean(axis=1), "mean-abs-rows", (a,),
                   lambda g: (g[:, None] * sgn / m,))


def reshape(a, shape):
    old = a.data.shape
    return _result(a.data.reshape(shape), "reshape", (a,),
                   lambda g: (g.reshape(old),))


def slice_cols(a, lo, hi):
    """Column slice of a 2-d tensor; gradient scatters back into place."""
    if a.data.ndim != 2:
        raise ShapeError(f"slice-cols: expected 2-d input, got {a.data.shape}")
    shape = a.data.shape

    def back(g):
        full = np.zeros(shape, dtype=np.float32)
        full[:, lo:hi] = g
        return (full,)

    return _result(a.data[:, lo:hi], "slice-cols", (a,), back)


# ---------------------------------------------------------------------------
# neural-net ops

def linear(x, w, b=None):
    """x (N, in) @ w (out, in).T + b (out)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear: x {x.data.shape} incompatible with w {w.data.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    xd, wd = x.data, w.data

    if b is None:
        return _result(out, "linear", (x, w), lambda g: (g @ wd, g.T @ xd))
    return _result(out, "linear", (x, w, b),
                   lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def _conv_cols(xp, kh, kw, stride, oh, ow):
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride))
    return np.ascontiguousarray(view).reshape(n, c * kh * kw, oh * ow)


def conv2d(x, w, b=None, stride=1, pad=0):
    """NCHW convolution via im2col. w has shape (F, C, KH, KW)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d x and w, got {x.data.shape}, {w.data.shape}")
    n, c, h, wd_ = x.data.shape
    f, cw, kh, kw = w.data.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {cw}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd_ + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: empty output for input {x.data.shape}, kernel {w.data.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _conv_cols(xp, kh, kw, stride, oh, ow)           # (N, C*KH*KW, OH*OW)
    w2 = w.data.reshape(f, -1)
    out = np.matmul(w2[None], cols).reshape(n, f, oh, ow)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def back(g):
        g2 = g.reshape(n, f, oh * ow)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        dcols = np.matmul(w2.T[None], g2).reshape(n, c, kh, kw, oh, ow)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
        gx = dxp[:, :, pad:pad + h, pad:pad + wd_] if pad else dxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, "conv2d", parents, back)


def upsample2(x):
    """Nearest-neighbour x2 upsampling of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2: need 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, "upsample2", (x,), back)


def sigmoid_xent(logits, target):
    """Mean binary cross-entropy on pre-sigmoid logits against a {0,1}-ish
    target array. Stable log-sum-exp form."""
    t = np.asarray(target, dtype=np.float32)
    if t.shape != logits.data.shape:
        raise ShapeError(f"sigmoid-cross-entropy: target shape {t.shape} "
                         f"!= logits {logits.data.shape}")
    z = logits.data
    loss = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()
    p = np.empty_like(z)
    pos = z >= 0
    p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    p[~pos] = ez / (1.0 + ez)
    n = z.size

    return _result(loss, "sigmoid-cross-entropy", (logits,),
                   lambda g: (g * (p - t) / n,))


def softmax_xent_pixels(logits, target):
    """Per-pixel 2-class softmax cross-entropy, averaged over all pixels.

    logits: (N, 2, H, W) tensor; target: (N, H, W) array of {0, 1}.
    """
    if logits.data.ndim != 4 or logits.data.shape[1] != 2:
        raise ShapeError(f"pixelwise-softmax-cross-entropy: logits must be (N,2,H,W), "
                         f"got {logits.data.shape}")
    t = np.asarray(target)
    if t.shape != (logits.data.shape[0],) + logits.data.shape[2:]:
        raise ShapeError(f"pixelwise-softmax-cross-entropy: target shape {t.shape} "
                         f"does not match logits {logits.data.shape}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    p = ez / ez.sum(axis=1, keepdims=True)
    idx = t.astype(np.intp)
    n, _, h, w = z.shape
    picked = np.take_along_axis(p, idx[:, None], axis=1)[:, 0]
    loss = -np.log(np.maximum(picked, 1e-12)).mean()
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, idx[:, None], 1.0, axis=1)
    npix = n * h * w

    def back(g):
        return (g * (p - onehot) / npix,)

    return _result(loss, "pixelwise-softmax-cross-entropy", (logits,), back)


# ---------------------------------------------------------------------------
# generic dispatcher (op-kind registry)

OP_KINDS = {
    "conv2d": conv2d,
    "upsample2": upsample2,
    "linear": linear,
    "leaky-relu": leaky_relu,
    "sigmoid": sigmoid,
    "add": add,
    "sub": sub,
    "mul": mul,
    "mul-scalar": mul_scalar,
    "div": div,
    "exp": exp,
    "abs": absolute,
    "l1-norm-mean": l1_norm_mean,
    "sigmoid-cross-entropy": sigmoid_xent,
    "pixelwise-softmax-cross-entropy": softmax_xent_pixels,
}


def forward_op(kind, inputs, params=None):
    """Dispatch a forward op by kind name. `inputs` is a sequence of Tensors,
    `params` a dict of op keyword arguments."""
    if kind not in OP_KINDS:
        raise ContractError(f"unknown op kind: {kind!r}")
    return OP_KINDS[kind](*inputs, **(params or {}))


# ---------------------------------------------------------------------------
# backward pass

def backward(out):
    """Reverse-mode sweep from a scalar output.

    Accumulates dL/dt into t.grad for every requires_grad tensor reachable
    from `out`, releases the graph, and returns {tensor: gradient array}.
    """
    if out.data.size != 1:
        raise ContractError(f"backward: output must be scalar, got shape {out.data.shape}")
    if out.node is None:
        raise GraphError("backward: output is detached (no recorded graph)")
    if out.node.released:
        raise GraphError("backward: graph already consumed; run a new forward pass")

    # collect reachable nodes; creation order is a valid topological order
    nodes = []
    seen = set()
    stack = [out.node]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        if node.released:
            raise GraphError("backward: graph already consumed; run a new forward pass")
        seen.add(id(node))
        nodes.append(node)
        for p in node.parents:
            if p.node is not None:
                stack.append(p.node)
    nodes.sort(key=lambda nd: nd.seq, reverse=True)

    grads = {id(out): np.ones_like(out.data)}
    holder = {id(out): out}
    by_node = {id(t.node): t for nd in nodes for t in nd.parents if t.node is not None}
    by_node[id(out.node)] = out

    for node in nodes:
        t = by_node[id(node)]
        g = grads.pop(id(t), None)
        if g is None:
            continue
        holder.pop(id(t), None)
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if id(parent) in grads:
                grads[id(parent)] += pg
            else:
                grads[id(parent)] = pg
                holder[id(parent)] = parent
        node.released = True
        node.backward_fn = None
        node.parents = ()

    result = {}
    for tid, g in grads.items():
        t = holder[tid]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
            result[t] = g
    return result


# ---------------------------------------------------------------------------
# numeric gradient check and plain SGD

def grad_check(f, x, h=1e-3):
    """Max relative error between analytic and central-difference gradients.

    f maps a Tensor to a scalar Tensor and must be deterministic.
    """
    xt = Tensor(x.data.copy(), requires_grad=True)
    backward(f(xt))
    analytic = xt.grad.astype(np.float64).ravel()

    flat = x.data.astype(np.float64).ravel()
    numeric = np.empty_like(flat)
    with precision(np.float64):
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            fp = f(Tensor(bumped.reshape(x.data.shape))).item()
            bumped[i] = flat[i] - h
            fm = f(Tensor(bumped.reshape(x.data.shape))).item()
            numeric[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def sgd_step(params, lr):
    """In-place vanilla SGD update; zeroes gradients afterwards."""
    for p in params:
        if p.grad is None:
            raise ContractError("sgd_step: parameter has no gradient")
    for p in params:
        p.data -= np.float32(lr) * p.grad
        p.grad = None
