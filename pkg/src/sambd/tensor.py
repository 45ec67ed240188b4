"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Every operation builds a node in an acyclic graph of ``Tensor`` objects;
``backward()`` on a scalar walks the graph in reverse topological order and
accumulates gradients into ``.grad`` buffers.  Storage precision is
configurable (float32 for training, float64 for gradient checks) while all
inner accumulations (convolution sums, reductions) run in float64 with a
fixed iteration order, so forward passes are bit-deterministic.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """Dense N-dimensional array, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __float__(self):
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape))
        else:
            self.grad += g

    # -- autodiff ---------------------------------------------------------

    def backward(self):
        """Reverse accumulation from this scalar into all reachable grads.

        Repeated calls without ``zero_grad`` accumulate, matching the usual
        gradient-summation convention.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _wrap(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None) or DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _wrap(data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None) or DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _wrap(data, (a, b), backward)


def div(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None) or DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * data / b.data, b.shape))

    return _wrap(data, (a, b), backward)


def power(a, exponent):
    exponent = float(exponent)
    data = a.data**exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _wrap(data, (a,), backward)


# -- reductions and shape ops ------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype, copy=False)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _wrap(data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _wrap(data, (a,), backward)


def take(a, key):
    """Basic (slice/int) indexing with scatter-add backward."""
    data = a.data[key]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[key] = g
            a._accumulate(buf)

    return _wrap(data, (a,), backward)


def concat(tensors, axis=1):
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _wrap(data, tuple(tensors), backward)


def stack(tensors, axis=0):
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def broadcast_spatial(a, h, w):
    """Expand a [..., 1, 1] map to [..., h, w] (adjoint: sum over the plane)."""
    if a.shape[-2:] != (1, 1):
        raise ValueError(f"expected trailing spatial extents (1, 1), got {a.shape}")
    data = np.broadcast_to(a.data, a.shape[:-2] + (h, w)).copy()

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.sum(axis=(-2, -1), keepdims=True, dtype=np.float64).astype(a.dtype))

    return _wrap(data, (a,), backward)


# -- activations --------------------------------------------------------------


def relu(a):
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _wrap(data, (a,), backward)


def sigmoid(a):
    # Split by sign for overflow-free evaluation.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out * (1.0 - out))

    return _wrap(out, (a,), backward)


def pointwise_activation(a, kind):
    """Element-wise nonlinearity, ``kind`` in {"relu", "sigmoid"}."""
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation kind: {kind!r}")


def softmax_over_classes(logits, axis=-3):
    """Per-voxel class distribution; the class axis of a [..., K, H, W] map.

    Values along ``axis`` sum to 1 within float tolerance.
    """
    if logits.shape[axis] < 2:
        raise ValueError("softmax needs at least 2 classes")
    x = logits.data.astype(np.float64, copy=False)
    x = x - x.max(axis=axis, keepdims=True)
    ex = np.exp(x)
    sm = (ex / ex.sum(axis=axis, keepdims=True)).astype(logits.dtype, copy=False)

    def backward(g):
        if logits.requires_grad:
            gs = (g * sm).sum(axis=axis, keepdims=True, dtype=np.float64)
            logits._accumulate(sm * (g - gs.astype(logits.dtype)))

    return _wrap(sm, (logits,), backward)


# -- convolution ---------------------------------------------------------------


def same_padding(kernel_size, dilation=1):
    """Padding that keeps spatial extents under stride-1 convolution."""
    return dilation * (kernel_size - 1) // 2


def _check_conv_args(kh, kw, stride, dilation):
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")


def _conv_windows(xp, kh, kw, stride, dilation):
    span_h = (kh - 1) * dilation + 1
    span_w = (kw - 1) * dilation + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dilation, ::dilation]


def _out_extent(n_in, k, stride, dilation):
    return (n_in - ((k - 1) * dilation + 1)) // stride + 1


def _kernel_slices(oh, ow, stride, dilation, u, v):
    return (
        slice(u * dilation, u * dilation + (oh - 1) * stride + 1, stride),
        slice(v * dilation, v * dilation + (ow - 1) * stride + 1, stride),
    )


def _im2col(xp, kh, kw, stride, dilation, oh, ow):
    """Gather patches as a float64 (cin*kh*kw, n*oh*ow) matrix via per-tap block copies."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            su, sv = _kernel_slices(oh, ow, stride, dilation, u, v)
            cols[:, u, v] = xp[:, :, su, sv].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def conv2d(x, kernel, bias=None, stride=1, dilation=1, padding=0):
    """2D cross-correlation over NCHW input.

    ``kernel`` is [Cout, Cin, kh, kw]; accumulation runs in float64.
    """
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    _check_conv_args(kh, kw, stride, dilation)
    if kcin != cin:
        raise ValueError(f"kernel expects {kcin} input channels, input has {cin}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = _out_extent(xp.shape[2], kh, stride, dilation)
    ow = _out_extent(xp.shape[3], kw, stride, dilation)
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    k2 = kernel.data.reshape(cout, -1).astype(np.float64, copy=False)
    y = k2 @ cols
    if bias is not None:
        y += bias.data.astype(np.float64, copy=False)[:, None]
    out_data = y.reshape(cout, n, oh, ow).transpose(1, 0, 2, 3).astype(x.dtype)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).astype(np.float64).reshape(cout, n * oh * ow)
        if kernel.requires_grad:
            kernel._accumulate((g2 @ cols.T).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=1))
        if not x.requires_grad:
            return
        padb = dilation * (kh - 1) - padding
        if stride == 1 and padb >= 0:
            # dX is the correlation of g with the channel-swapped, flipped kernel.
            gp = np.pad(g, ((0, 0), (0, 0), (padb, padb), (padb, padb)))
            gcols = _im2col(gp, kh, kw, 1, dilation, h, w)
            kf = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), dtype=np.float64).reshape(cin, -1)
            dx = (kf @ gcols).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
            x._accumulate(dx)
        else:
            dcols = (k2.T @ g2).reshape(cin, kh, kw, n, oh, ow)
            dxp = np.zeros(xp.shape, dtype=np.float64)
            for u in range(kh):
                for v in range(kw):
                    su, sv = _kernel_slices(oh, ow, stride, dilation, u, v)
                    dxp[:, :, su, sv] += dcols[:, u, v].transpose(1, 0, 2, 3)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    return _wrap(out_data, parents, backward)


def depthwise_conv2d(x, kernel, bias=None, stride=1, dilation=1, padding=0):
    """Per-channel convolution; ``kernel`` is [C, 1, kh, kw] (one filter per input channel)."""
    n, c, h, w = x.shape
    kc, one, kh, kw = kernel.shape
    _check_conv_args(kh, kw, stride, dilation)
    if kc != c or one != 1:
        raise ValueError(f"depthwise kernel must be [{c}, 1, kh, kw], got {kernel.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _conv_windows(xp, kh, kw, stride, dilation)
    k3 = kernel.data.reshape(c, kh, kw)
    out64 = np.einsum("nchwuv,cuv->nchw", win, k3, dtype=np.float64)
    if bias is not None:
        out64 = out64 + bias.data.astype(np.float64, copy=False)[None, :, None, None]
    out_data = out64.astype(x.dtype)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        oh, ow = g.shape[2], g.shape[3]
        if kernel.requires_grad:
            dk = np.einsum("nchw,nchwuv->cuv", g, win, dtype=np.float64)
            kernel._accumulate(dk.reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3), dtype=np.float64))
        if x.requires_grad:
            g64 = g.astype(np.float64)
            dxp = np.zeros(xp.shape, dtype=np.float64)
            for u in range(kh):
                for v in range(kw):
                    su, sv = _kernel_slices(oh, ow, stride, dilation, u, v)
                    dxp[:, :, su, sv] += g64 * k3[None, :, u, v, None, None]
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    return _wrap(out_data, parents, backward)


def separable_conv2d(x, depthwise_kernel, pointwise_kernel, bias=None, stride=1, dilation=1, padding=0):
    """Depthwise conv followed by a 1x1 pointwise conv; equals composing the two."""
    if pointwise_kernel.shape[1] != depthwise_kernel.shape[0]:
        raise ValueError(
            f"pointwise expects {pointwise_kernel.shape[1]} channels, "
            f"depthwise produces {depthwise_kernel.shape[0]}"
        )
    mid = depthwise_conv2d(x, depthwise_kernel, stride=stride, dilation=dilation, padding=padding)
    return conv2d(mid, pointwise_kernel, bias=bias)


# -- bilinear interpolation ------------------------------------------------------


def _interp_coeffs(n_out, n_in, factor):
    # Half-pixel source centers, clamped to the valid range (edge clamping).
    pos = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = pos - i0
    return i0, i1, 1.0 - w1, w1


_interp_matrix_cache = {}


def _interp_matrix(n_out, n_in, factor):
    key = (n_out, n_in, factor)
    mat = _interp_matrix_cache.get(key)
    if mat is None:
        i0, i1, w0, w1 = _interp_coeffs(n_out, n_in, factor)
        mat = np.zeros((n_out, n_in))
        rows = np.arange(n_out)
        np.add.at(mat, (rows, i0), w0)
        np.add.at(mat, (rows, i1), w1)
        mat.setflags(write=False)
        _interp_matrix_cache[key] = mat
    return mat


def bilinear_upsample(x, factor):
    """Bilinear upsampling with half-pixel centers and edge clamping."""
    if int(factor) != factor or factor < 2:
        raise ValueError(f"upsampling factor must be an integer >= 2, got {factor}")
    factor = int(factor)
    n, c, h, w = x.shape
    row_mat = _interp_matrix(h * factor, h, factor)
    col_mat = _interp_matrix(w * factor, w, factor)
    out_data = (row_mat @ x.data.astype(np.float64, copy=False) @ col_mat.T).astype(x.dtype, copy=False)

    def backward(g):
        if x.requires_grad:
            x._accumulate(row_mat.T @ g.astype(np.float64) @ col_mat)

    return _wrap(out_data, (x,), backward)


# -- verification + optimizer ------------------------------------------------------


def backward(scalar_loss):
    """Populate gradients of every reachable parameter of ``scalar_loss``."""
    scalar_loss.backward()


def grad_check(loss_fn, params, eps=1e-5, max_coords_per_param=None, rng=None):
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    Returns the max over checked coordinates of
    ``|analytic - fd| / max(1, |fd|)``.  Run in float64 storage; ``loss_fn``
    must rebuild its graph on every call.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    max_err = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            coords = list(np.ndindex(*p.shape)) if p.shape else [()]
            if max_coords_per_param is not None and len(coords) > max_coords_per_param:
                picks = (rng or np.random.default_rng(0)).choice(len(coords), size=max_coords_per_param, replace=False)
                coords = [coords[i] for i in picks]
            for idx in coords:
                orig = p.data[idx]
                p.data[idx] = orig + eps
                f_plus = float(loss_fn().data)
                p.data[idx] = orig - eps
                f_minus = float(loss_fn().data)
                p.data[idx] = orig
                fd = (f_plus - f_minus) / (2.0 * eps)
                err = abs(float(ana[idx]) - fd) / max(1.0, abs(fd))
                if err > max_err:
                    max_err = err
    return max_err


@dataclass
class OptimState:
    """SGD-with-momentum state: one velocity buffer per parameter."""

    lr: float
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_momentum_step(params, state, grads=None):
    """Classic (heavy-ball) momentum update: v <- m*v + g; w <- w - lr*v.

    ``params`` is a name -> Tensor mapping; ``grads`` defaults to each
    parameter's accumulated ``.grad``.
    """
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g
        state.velocity[name] = v
        p.data = p.data - state.lr * v
