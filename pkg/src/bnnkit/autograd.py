"""Reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray plus a gradient closure, in the micrograd
style: every op builds the output tensor and attaches a `_backward`
that pushes the output gradient to its inputs. `backward()` walks the
graph once in reverse topological order.

Ops are module-level functions (tensors also carry the usual operator
sugar). Non-differentiable arguments (axes, strides, index arrays) are
plain python/numpy values, not tensors. Storage dtype follows the
input; training code uses float32, oracle tests float64.
"""

import contextlib

import numpy as np

from bnnkit import kernels

_GRAD_ENABLED = True


def is_grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _noop():
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_retain")

    def __init__(self, data, requires_grad=False, _prev=()):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = _noop
        self._prev = _prev
        self._retain = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        """New leaf sharing this tensor's data, cut off from the graph."""
        return Tensor(self.data)

    def retain_grad(self):
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        order = _topo_order(self)
        leaves = [t for t in order if not t._prev]
        self._accum(np.ones_like(self.data) if grad is None else grad)
        for t in reversed(order):
            t._backward()
            # Drop closures and interior grads once consumed; leaves keep
            # theirs for the optimizer, retain_grad() opts interiors in.
            t._backward = _noop
            if t._prev and not t._retain and t is not self:
                t.grad = None
            t._prev = ()
        # reachable leaves always end up with a buffer, even if no path
        # carried gradient to them
        for t in leaves:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _topo_order(root):
    order = []
    seen = set()
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
        for child in node._prev:
            if id(child) not in seen:
                stack.append((child, False))
    return order


def _make(data, children):
    """Output tensor; tracks grad only if enabled and some input needs it."""
    if _GRAD_ENABLED:
        tracked = tuple(c for c in children if c.requires_grad)
        if tracked:
            return Tensor(data, requires_grad=True, _prev=tracked), True
    return Tensor(data), False


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    out, track = _make(a.data + b.data, (a, b))
    if track:

        def _backward():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.data.shape))

        out._backward = _backward
    return out


def neg(a):
    out, track = _make(-a.data, (a,))
    if track:

        def _backward():
            a._accum(-out.grad)

        out._backward = _backward
    return out


def mul(a, b):
    out, track = _make(a.data * b.data, (a, b))
    if track:

        def _backward():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.data.shape))

        out._backward = _backward
    return out


def scale(a, s):
    """Multiply by a python scalar."""
    out, track = _make(a.data * s, (a,))
    if track:

        def _backward():
            a._accum(out.grad * s)

        out._backward = _backward
    return out


def add_scalar(a, s):
    out, track = _make(a.data + s, (a,))
    if track:

        def _backward():
            a._accum(out.grad)

        out._backward = _backward
    return out


def matmul(a, b, transpose_b=False):
    bd = b.data.T if transpose_b else b.data
    out, track = _make(a.data @ bd, (a, b))
    if track:

        def _backward():
            if a.requires_grad:
                a._accum(out.grad @ bd.T)
            if b.requires_grad:
                gb = a.data.T @ out.grad
                b._accum(gb.T if transpose_b else gb)

        out._backward = _backward
    return out


def exp(a):
    out, track = _make(np.exp(a.data), (a,))
    if track:

        def _backward():
            a._accum(out.grad * out.data)

        out._backward = _backward
    return out


def log(a):
    out, track = _make(np.log(a.data), (a,))
    if track:

        def _backward():
            a._accum(out.grad / a.data)

        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    out, track = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if track:

        def _backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape))

        out._backward = _backward
    return out


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    out, track = _make(a.data.reshape(shape), (a,))
    if track:

        def _backward():
            a._accum(out.grad.reshape(a.data.shape))

        out._backward = _backward
    return out


def flatten(a):
    return reshape(a, (a.data.shape[0], -1))


def concat(tensors, axis=0):
    out, track = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if track:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def _backward():
            pieces = np.split(out.grad, splits, axis=axis)
            for t, g in zip(tensors, pieces):
                if t.requires_grad:
                    t._accum(g)

        out._backward = _backward
    return out


def pick_rows(a, idx):
    """out[i] = a[i, idx[i]] for an integer index vector."""
    rows = np.arange(a.data.shape[0])
    out, track = _make(a.data[rows, idx], (a,))
    if track:

        def _backward():
            g = np.zeros_like(a.data)
            np.add.at(g, (rows, idx), out.grad)
            a._accum(g)

        out._backward = _backward
    return out


def sigmoid_bce(a, targets):
    """Mean binary cross-entropy on logits, numerically stable.

    targets is a constant array of the same shape with values in [0, 1].
    """
    s = a.data
    y = np.asarray(targets, dtype=s.dtype)
    val = np.maximum(s, 0) - s * y + np.log1p(np.exp(-np.abs(s)))
    out, track = _make(np.asarray(val.mean(), dtype=s.dtype), (a,))
    if track:

        def _backward():
            sig = 1.0 / (1.0 + np.exp(-s))
            a._accum(((sig - y) * (out.grad / s.size)).astype(s.dtype, copy=False))

        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalizations
# ---------------------------------------------------------------------------


def prelu(a, alpha):
    """Channelwise PReLU; alpha has shape (C,) against axis 1 of a 2d or
    4d input."""
    x = a.data
    out, track = _make(kernels.prelu_fwd(x, alpha.data), (a, alpha))
    if track:

        def _backward():
            gx, galpha = kernels.prelu_bwd(x, out.grad, alpha.data)
            if a.requires_grad:
                a._accum(gx)
            if alpha.requires_grad:
                alpha._accum(galpha.astype(alpha.data.dtype, copy=False))

        out._backward = _backward
    return out


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out, track = _make(s, (a,))
    if track:

        def _backward():
            dot = (out.grad * s).sum(axis=axis, keepdims=True)
            a._accum(s * (out.grad - dot))

        out._backward = _backward
    return out


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out, track = _make(shifted - lse, (a,))
    if track:

        def _backward():
            soft = np.exp(out.data)
            a._accum(out.grad - soft * out.grad.sum(axis=axis, keepdims=True))

        out._backward = _backward
    return out


def l2_normalize(a, axis=1, eps=1e-12):
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = a.data / norm
    out, track = _make(y, (a,))
    if track:

        def _backward():
            dot = (out.grad * y).sum(axis=axis, keepdims=True)
            a._accum((out.grad - y * dot) / norm)

        out._backward = _backward
    return out


def batchnorm2d(a, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5, update_stats=True):
    """Batch normalization over (N, H, W) per channel.

    `running_mean`/`running_var` are plain float arrays mutated in place
    when `training and update_stats` (unbiased variance, torch style).
    In eval mode the running stats normalize instead of batch stats.
    """
    x = a.data
    n, c, h, w = x.shape
    if training:
        y, mu, var = kernels.bn_fwd_train(x, gamma.data, beta.data, eps)
        if update_stats:
            m = n * h * w
            unbiased = var * (m / max(m - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mu = running_mean
        var = running_var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        y = (gamma.data.reshape(1, c, 1, 1) * xhat
             + beta.data.reshape(1, c, 1, 1)).astype(x.dtype, copy=False)
    out, track = _make(y, (a, gamma, beta))
    if track:

        def _backward():
            g = out.grad
            if training:
                istd1 = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
                dx, ggamma, gbeta = kernels.bn_bwd_train(
                    x, g, gamma.data, mu, istd1)
                if gamma.requires_grad:
                    gamma._accum(ggamma.astype(gamma.data.dtype, copy=False))
                if beta.requires_grad:
                    beta._accum(gbeta.astype(beta.data.dtype, copy=False))
                if a.requires_grad:
                    a._accum(dx.astype(x.dtype, copy=False))
                return
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=(0, 2, 3)).astype(gamma.data.dtype, copy=False))
            if beta.requires_grad:
                beta._accum(g.sum(axis=(0, 2, 3)).astype(beta.data.dtype, copy=False))
            if a.requires_grad:
                gxhat = g * gamma.data.reshape(1, c, 1, 1)
                istd = inv_std.reshape(1, c, 1, 1)
                a._accum((gxhat * istd).astype(x.dtype, copy=False))

        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def conv2d(a, w, stride=1, pad=0, pad_value=0.0):
    """2d convolution (cross-correlation), NCHW input, (F, C, kh, kw) weight.

    Runs as im2col plus one GEMM; the column matrix is kept alive in the
    closure for the backward GEMMs. `pad_value` fills the border (sign
    convs pad with -1 so training matches the packed inference path);
    being constant it never takes gradient.
    """
    f, cin, kh, kw = w.data.shape
    n = a.data.shape[0]
    if a.data.shape[1] != cin:
        raise ValueError(f"channel mismatch: input {a.data.shape[1]} vs weight {cin}")
    oh = (a.data.shape[2] + 2 * pad - kh) // stride + 1
    ow = (a.data.shape[3] + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv output would be empty: {oh}x{ow}")
    cols = kernels.im2col(a.data, kh, kw, stride, pad, pad_value)
    wmat = w.data.reshape(f, -1)
    out2d = cols @ wmat.T
    y = out2d.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    out, track = _make(np.ascontiguousarray(y), (a, w))
    if track:
        xshape = a.data.shape

        def _backward():
            g2d = out.grad.transpose(0, 2, 3, 1).reshape(-1, f)
            if w.requires_grad:
                w._accum((g2d.T @ cols).reshape(w.data.shape))
            if a.requires_grad:
                dcols = g2d @ wmat
                a._accum(kernels.col2im(np.ascontiguousarray(dcols), xshape, kh, kw, stride, pad))

        out._backward = _backward
    return out


def bias_add(a, b):
    """Add a per-channel bias (C,) to an NCHW tensor."""
    out, track = _make(a.data + b.data.reshape(1, -1, 1, 1), (a, b))
    if track:

        def _backward():
            if a.requires_grad:
                a._accum(out.grad)
            if b.requires_grad:
                b._accum(out.grad.sum(axis=(0, 2, 3)).astype(b.data.dtype, copy=False))

        out._backward = _backward
    return out


def avgpool2d(a, k, stride=None):
    """Non-overlapping average pooling (stride defaults to k)."""
    if stride is None:
        stride = k
    if stride != k:
        raise ValueError("avgpool2d supports stride == kernel only")
    n, c, h, w = a.data.shape
    oh, ow = h // k, w // k
    view = a.data[:, :, : oh * k, : ow * k].reshape(n, c, oh, k, ow, k)
    out, track = _make(view.mean(axis=(3, 5)), (a,))
    if track:

        def _backward():
            g = np.zeros_like(a.data)
            spread = out.grad[:, :, :, None, :, None] / (k * k)
            g[:, :, : oh * k, : ow * k] = np.broadcast_to(
                spread, (n, c, oh, k, ow, k)
            ).reshape(n, c, oh * k, ow * k)
            a._accum(g)

        out._backward = _backward
    return out


def global_avgpool(a):
    """Mean over spatial dims; (N, C, H, W) -> (N, C)."""
    n, c, h, w = a.data.shape
    out, track = _make(a.data.mean(axis=(2, 3)), (a,))
    if track:

        def _backward():
            g = out.grad[:, :, None, None] / (h * w)
            a._accum(np.broadcast_to(g, a.data.shape))

        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# custom gradient
# ---------------------------------------------------------------------------


def masked_grad(a, out_data, mask):
    """Tensor with arbitrary forward value and masked-identity backward.

    The upstream gradient reaches `a` as `grad * mask`, nothing else.
    This is the straight-through hook: the caller computes the forward
    (e.g. a sign) and the pass/clip mask from raw data.
    """
    out, track = _make(out_data, (a,))
    if track:

        def _backward():
            a._accum(out.grad * mask)

        out._backward = _backward
    return out


def custom_grad(forward_fn, mask_fn):
    """Build an elementwise op with a straight-through style backward.

    `forward_fn(data)` gives the output values, `mask_fn(data)` the
    factor multiplying the upstream gradient on the way back.
    """

    def op(a):
        return masked_grad(a, forward_fn(a.data), mask_fn(a.data))

    return op
