"""Dense tensors with reverse-mode automatic differentiation.

Small tape-based autodiff over numpy arrays: each operation records its
parents and a closure that maps the output gradient to parent gradients.
Training runs in float32; float64 inputs stay float64 so oracle code can
check gradients in double precision.
"""

from __future__ import annotations

import math
import warnings
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# fused GELU kernels; the scipy fallback below computes the same values
try:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from numba import vectorize as _nb_vectorize

    @_nb_vectorize(["float32(float32)", "float64(float64)"],
                   target="parallel", cache=True)
    def _gelu_fwd_kernel(x):
        return 0.5 * x * (1.0 + math.erf(x * 0.7071067811865476))

    @_nb_vectorize(["float32(float32, float32)", "float64(float64, float64)"],
                   target="parallel", cache=True)
    def _gelu_bwd_kernel(x, g):
        cdf = 0.5 * (1.0 + math.erf(x * 0.7071067811865476))
        pdf = 0.3989422804014327 * math.exp(-0.5 * x * x)
        return g * (cdf + x * pdf)

    warnings.filterwarnings("ignore", message=".*TBB.*")
    _HAVE_FUSED_GELU = True
except Exception:  # pragma: no cover - numba is optional
    _HAVE_FUSED_GELU = False


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """backward() was asked to differentiate an unusable graph."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data):
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    # make numpy defer to the reflected operators instead of coercing
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _coerce_pair(a, b):
    """Wrap non-Tensor operands; bare python scalars adopt the peer tensor's
    dtype so float32 graphs stay float32."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        if isinstance(b, (bool, int, float)):
            return a, Tensor(np.asarray(b, dtype=a.data.dtype))
        return a, Tensor(b)
    if isinstance(b, Tensor):
        if isinstance(a, (bool, int, float)):
            return Tensor(np.asarray(a, dtype=b.data.dtype)), b
        return Tensor(a), b
    return Tensor(a), Tensor(b)


def _make(data, parents, backward_fn) -> Tensor:
    """Build an op result; records the tape edge only when grad is live."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _accum(flow: dict, t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    key = id(t)
    if key in flow:
        flow[key] = flow[key] + g
    else:
        flow[key] = g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Accumulate dloss/dt into t.grad for every requires_grad leaf tensor.

    Interior op results only relay gradient flow and never retain a grad
    buffer (a missing .grad reads as zero). Repeated calls without
    zero_grad() keep accumulating.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from every differentiable tensor")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    flow = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is not None:
            node._backward_fn(g, flow)
        elif node.grad is None:
            node.grad = g.copy()
        else:
            node.grad += g


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data + b.data

    def bwd(g, flow):
        if a.requires_grad:
            _accum(flow, a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(flow, b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data - b.data

    def bwd(g, flow):
        if a.requires_grad:
            _accum(flow, a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(flow, b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data * b.data

    def bwd(g, flow):
        if a.requires_grad:
            _accum(flow, a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(flow, b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data / b.data

    def bwd(g, flow):
        if a.requires_grad:
            _accum(flow, a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(flow, b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g, flow):
        _accum(flow, a, -g)

    return _make(-a.data, (a,), bwd)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    data = a.data**p

    def bwd(g, flow):
        _accum(flow, a, g * p * a.data ** (p - 1.0))

    return _make(data, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    if a.ndim > 2 and b.ndim == 2:
        # collapse leading axes into one GEMM; much faster than the
        # stack-of-matmuls path BLAS would otherwise run per batch item
        lead = a.data.shape[:-1]
        a2 = a.data.reshape(-1, a.data.shape[-1])
        data = (a2 @ b.data).reshape(lead + (b.data.shape[-1],))

        def bwd(g, flow):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accum(flow, a, (g2 @ b.data.T).reshape(a.data.shape))
            if b.requires_grad:
                _accum(flow, b, a2.T @ g2)

        return _make(data, (a, b), bwd)

    data = a.data @ b.data

    def bwd(g, flow):
        if a.requires_grad:
            _accum(flow, a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            _accum(flow, b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _make(data, (a, b), bwd)


# -- shape manipulation --------------------------------------------------------


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bwd(g, flow):
        _accum(flow, a, np.transpose(g, inv))

    return _make(data, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bwd(g, flow):
        _accum(flow, a, g.reshape(a.data.shape))

    return _make(data, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g, flow):
        for t, piece in zip(ts, np.split(g, offsets, axis=axis)):
            _accum(flow, t, piece)

    return _make(data, tuple(ts), bwd)


def slice_(a, key) -> Tensor:
    """Basic (slice/int) indexing with scatter-back gradient."""
    a = as_tensor(a)
    data = a.data[key]

    def bwd(g, flow):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        full[key] = g
        _accum(flow, a, full)

    return _make(data, (a,), bwd)


def take_rows(a, indices) -> Tensor:
    """Select rows along axis 0 by integer index (gradient scatters back)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    def bwd(g, flow):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(flow, a, full)

    return _make(data, (a,), bwd)


# -- reductions -----------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g, flow):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(flow, a, np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- nonlinearities ---------------------------------------------------------------


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bwd(g, flow):
        _accum(flow, a, g * (1.0 - data * data))

    return _make(data, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = expit(a.data)

    def bwd(g, flow):
        _accum(flow, a, g * data * (1.0 - data))

    return _make(data, (a,), bwd)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    if _HAVE_FUSED_GELU:
        data = _gelu_fwd_kernel(x)

        def bwd(g, flow):
            if g.dtype == x.dtype:
                _accum(flow, a, _gelu_bwd_kernel(x, g))
            else:
                cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
                pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
                _accum(flow, a, g * (cdf + x * pdf))

        return _make(data, (a,), bwd)

    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def bwd(g, flow):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        _accum(flow, a, g * (cdf + x * pdf))

    return _make(data, (a,), bwd)


def softplus(a) -> Tensor:
    """log(1 + exp(x)) in overflow-safe form."""
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g, flow):
        _accum(flow, a, g * expit(x))

    return _make(data, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g, flow):
        _accum(flow, a, g * data)

    return _make(data, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g, flow):
        _accum(flow, a, g / a.data)

    return _make(np.log(a.data), (a,), bwd)


# -- normalization ------------------------------------------------------------------


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    a = as_tensor(a)
    x = a.data
    data = x - x.max(axis=-1, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=-1, keepdims=True)

    def bwd(g, flow):
        inner = (g * data).sum(axis=-1, keepdims=True)
        out = g - inner
        out *= data
        _accum(flow, a, out)

    return _make(data, (a,), bwd)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def bwd(g, flow):
        soft = np.exp(data)
        _accum(flow, a, g - soft * g.sum(axis=-1, keepdims=True))

    return _make(data, (a,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row (last axis) to zero mean / unit biased variance,
    then scale by gain and shift by bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = xhat * gain.data + bias.data

    def bwd(g, flow):
        lead = tuple(range(g.ndim - 1))
        _accum(flow, gain, (g * xhat).sum(axis=lead))
        _accum(flow, bias, g.sum(axis=lead))
        if x.requires_grad:
            gh = g * gain.data
            term = gh - gh.mean(axis=-1, keepdims=True)
            term -= xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            _accum(flow, x, term * inv_std)

    return _make(data, (x, gain, bias), bwd)


def pointwise_conv1d(x, w, b) -> Tensor:
    """Kernel-size-1 convolution along channels: per-patch affine map.

    x: (..., patches, c_in), w: (c_in, c_out), b: (c_out,).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"pointwise_conv1d channel mismatch: input {x.shape} vs weight {w.shape}"
        )
    return matmul(x, w) + b


# Ops covered by the finite-difference gradient suite. Every entry must have a
# matching input factory in the test harness; the suite fails on gaps.
DIFFERENTIABLE_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "power": power,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "slice": slice_,
    "take_rows": take_rows,
    "sum": sum_,
    "mean": mean,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "softmax_rows": softmax_rows,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "pointwise_conv1d": pointwise_conv1d,
}
