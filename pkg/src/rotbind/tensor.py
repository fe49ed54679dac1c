"""Dense tensors with tape-based reverse-mode differentiation.

Everything is backed by numpy arrays in row-major layout. Each operation
records its inputs and a closure computing input gradients; ``backward``
on a scalar replays the tape in reverse topological order. Training runs
in float32; gradient-check suites switch to float64 via ``use_dtype``.

Norm and division singularities are guarded by a single global ``EPS``
so no primitive produces NaN/Inf from finite inputs.
"""

from __future__ import annotations

import contextlib
import weakref
from collections import defaultdict

import numpy as np

EPS = 1e-8  # global guard for norm/division singularities

_DTYPE = np.float32
_GRAD_ENABLED = True
_ALLOC_TAG: str | None = None


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """Invalid operation or layer configuration."""


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the dtype newly created tensors default to."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; forwards inside run without graph buildup."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class AllocationTracker:
    """Live/peak byte accounting for arrays owned by engine tensors.

    Mirrors the reset-peak / read-high-water workflow of GPU allocator
    statistics. Views that do not own their buffer count as zero bytes.
    Optional tags attribute allocations to a subsystem (e.g. gate fields).
    """

    def __init__(self):
        self.current = 0
        self.peak = 0
        self.total = 0
        self.live_by_tag = defaultdict(int)
        self.total_by_tag = defaultdict(int)

    def track(self, nbytes, tag=None):
        self.current += nbytes
        self.total += nbytes
        if self.current > self.peak:
            self.peak = self.current
        if tag is not None:
            self.live_by_tag[tag] += nbytes
            self.total_by_tag[tag] += nbytes

    def release(self, nbytes, tag=None):
        self.current -= nbytes
        if tag is not None:
            self.live_by_tag[tag] -= nbytes

    def reset_peak(self):
        self.peak = self.current


tracker = AllocationTracker()


@contextlib.contextmanager
def alloc_tag(tag):
    """Attribute tensor allocations inside the block to ``tag``."""
    global _ALLOC_TAG
    prev = _ALLOC_TAG
    _ALLOC_TAG = tag
    try:
        yield
    finally:
        _ALLOC_TAG = prev


class Tensor:
    """A dense real array with optional gradient and tape record.

    Tensors are immutable after creation except for gradient accumulation.
    Repeated ``backward`` calls without resetting ``grad`` accumulate.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents",
                 "_grad_fn", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, op="leaf",
                 parents=(), grad_fn=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        if _GRAD_ENABLED and self.requires_grad:
            self._parents = tuple(parents)
            self._grad_fn = grad_fn
        else:
            self._parents = ()
            self._grad_fn = None
        owned = self.data.nbytes if self.data.base is None else 0
        if owned:
            tracker.track(owned, _ALLOC_TAG)
            weakref.finalize(self, tracker.release, owned, _ALLOC_TAG)

    # -- introspection -------------------------------------------------
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
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------
    def backward(self):
        """Accumulate dLoss/dt into ``grad`` of every requires_grad tensor.

        The loss must be a scalar (single element). Each call adds one
        full gradient contribution; callers reset ``grad`` between steps.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not require grad; nothing to differentiate")

        topo = []
        seen = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            advanced = False
            for p in it:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()

        local = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = local.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._grad_fn is not None:
                for parent, pg in node._grad_fn(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in local:
                        local[key] = local[key] + pg
                    else:
                        local[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _coerce(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _DTYPE))


def _result(data, parents, op, grad_fn):
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, dtype=data.dtype, op=op,
                  parents=parents, grad_fn=grad_fn if rg else None)


def _unbroadcast(grad, shape):
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_forward(a, b, fn, opname):
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise binary ops ------------------------------------------------

def add(a, b):
    a = _coerce(a)
    b = _coerce(b, a)
    out = _broadcast_forward(a, b, np.add, "add")

    def grad_fn(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _result(out, (a, b), "add", grad_fn)


def sub(a, b):
    a = _coerce(a)
    b = _coerce(b, a)
    out = _broadcast_forward(a, b, np.subtract, "sub")

    def grad_fn(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _result(out, (a, b), "sub", grad_fn)


def mul(a, b):
    a = _coerce(a)
    b = _coerce(b, a)
    out = _broadcast_forward(a, b, np.multiply, "mul")

    def grad_fn(g):
        return [(a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape))]

    return _result(out, (a, b), "mul", grad_fn)


def div(a, b):
    """Elementwise division with denominators guarded away from zero.

    Denominators with magnitude below EPS are replaced by +/-EPS, so the
    result and its gradients stay finite for any finite inputs. Exact
    division whenever |denominator| >= EPS.
    """
    a = _coerce(a)
    b = _coerce(b, a)
    denom = b.data
    sign = np.where(denom < 0, -1.0, 1.0)
    safe = np.where(np.abs(denom) < EPS, sign * EPS, denom)
    try:
        out = a.data / safe
    except ValueError as exc:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def grad_fn(g):
        ga = g / safe
        gb = -g * a.data / (safe * safe)
        return [(a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape))]

    return _result(out, (a, b), "div", grad_fn)


def neg(a):
    out = -a.data

    def grad_fn(g):
        return [(a, -g)]

    return _result(out, (a,), "neg", grad_fn)


def power(a, p):
    """Raise to a scalar exponent. Non-integer exponents need positive base."""
    p = float(p)
    out = a.data ** p

    def grad_fn(g):
        return [(a, g * p * a.data ** (p - 1.0))]

    return _result(out, (a,), "pow", grad_fn)


def relu(a):
    out = np.maximum(a.data, 0)

    def grad_fn(g):
        return [(a, g * (a.data > 0))]

    return _result(out, (a,), "relu", grad_fn)


def clip(a, lo, hi):
    """Clamp values into [lo, hi]; gradient is 1 strictly inside, else 0."""
    out = np.clip(a.data, lo, hi)

    def grad_fn(g):
        return [(a, g * ((a.data > lo) & (a.data < hi)))]

    return _result(out, (a,), "clip", grad_fn)


# -- contractions ------------------------------------------------------------

def matmul(a, b):
    a = _coerce(a)
    b = _coerce(b, a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _result(out, (a, b), "matmul", grad_fn)


def einsum(spec, a, b):
    """Two-operand contraction ``np.einsum(spec, a, b)`` with autodiff.

    Every index of each operand must appear in the output or in the other
    operand, and indices may not repeat within one operand; this keeps the
    backward pass expressible as two further einsums.
    """
    try:
        lhs, out_sub = spec.replace(" ", "").split("->")
        sub_a, sub_b = lhs.split(",")
    except ValueError as exc:
        raise ConfigError(f"einsum spec {spec!r} must be 'ab,bc->ac' style") from exc
    for sub in (sub_a, sub_b):
        if len(set(sub)) != len(sub):
            raise ConfigError(f"einsum spec {spec!r}: repeated index within one operand")
    if not set(sub_a) <= set(out_sub) | set(sub_b):
        raise ConfigError(f"einsum spec {spec!r}: dangling index in first operand")
    if not set(sub_b) <= set(out_sub) | set(sub_a):
        raise ConfigError(f"einsum spec {spec!r}: dangling index in second operand")
    if not set(out_sub) <= set(sub_a) | set(sub_b):
        raise ConfigError(f"einsum spec {spec!r}: output index missing from operands")

    try:
        out = np.einsum(spec, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise ShapeError(f"einsum {spec!r}: shapes {a.shape} and {b.shape} mismatch") from exc

    def grad_fn(g):
        ga = np.einsum(f"{out_sub},{sub_b}->{sub_a}", g, b.data, optimize=True)
        gb = np.einsum(f"{sub_a},{out_sub}->{sub_b}", a.data, g, optimize=True)
        return [(a, ga), (b, gb)]

    return _result(out, (a, b), "einsum", grad_fn)


# -- reductions --------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(ax + ndim if ax < 0 else ax for ax in axis)
    for ax in axes:
        if not 0 <= ax < ndim:
            raise ShapeError(f"reduction axis {ax} out of range for rank {ndim}")
    return axes


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
            g = g.reshape(kshape)
        return [(a, np.broadcast_to(g, a.shape))]

    return _result(out, (a,), "sum", grad_fn)


def tmean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = np.mean(a.data, axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
            g = g.reshape(kshape)
        return [(a, np.broadcast_to(g / count, a.shape))]

    return _result(out, (a,), "mean", grad_fn)


# -- shape ops ----------------------------------------------------------------

def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} into {shape}") from exc

    def grad_fn(g):
        return [(a, g.reshape(old))]

    return _result(out, (a,), "reshape", grad_fn)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def grad_fn(g):
        return [(a, g.transpose(inv))]

    return _result(out, (a,), "transpose", grad_fn)


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc

    def grad_fn(g):
        return [(a, _unbroadcast(g, a.shape))]

    return _result(out, (a,), "broadcast_to", grad_fn)


# -- norms ---------------------------------------------------------------------

def l2_norm(a, axis, eps=EPS, keepdims=False):
    """sqrt(sum of squares along ``axis`` + eps^2); strictly positive.

    The eps^2 term keeps the value and its gradient finite at the zero
    vector (value exactly eps, gradient zero).
    """
    if not isinstance(axis, int) or not 0 <= axis < a.ndim:
        raise ShapeError(f"l2_norm axis {axis} out of range for rank {a.ndim}")
    sq = np.sum(np.square(a.data), axis=axis, keepdims=True) + eps * eps
    norm_k = np.sqrt(sq)
    out = norm_k if keepdims else np.squeeze(norm_k, axis=axis)

    def grad_fn(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return [(a, gk * a.data / norm_k)]

    return _result(out, (a,), "l2_norm", grad_fn)


# -- convolution machinery -------------------------------------------------------

def _conv_out_size(size, kernel, stride, padding):
    span = size + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ConfigError(
            f"conv geometry invalid: size {size}, kernel {kernel}, "
            f"stride {stride}, padding {padding} gives non-integer output")
    return span // stride + 1


def extract_patches(x, kernel, stride=1, padding=0):
    """[B,C,H,W] -> [B,C,H',W',K,K] sliding windows (cross-correlation order)."""
    if x.ndim != 4:
        raise ShapeError(f"extract_patches expects [B,C,H,W], got {x.shape}")
    if padding < 0:
        raise ConfigError("padding must be >= 0")
    b, c, h, w = x.shape
    h_out = _conv_out_size(h, kernel, stride, padding)
    w_out = _conv_out_size(w, kernel, stride, padding)
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    out = np.ascontiguousarray(windows[:, :, ::stride, ::stride])

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        for k1 in range(kernel):
            for k2 in range(kernel):
                gxp[:, :, k1:k1 + stride * h_out:stride,
                    k2:k2 + stride * w_out:stride] += g[..., k1, k2]
        if padding:
            gxp = gxp[:, :, padding:padding + h, padding:padding + w]
        return [(x, gxp)]

    return _result(out, (x,), "extract_patches", grad_fn)


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of [B,C_in,H,W] with weights [C_in,C_out,K,K]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weights, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d kernel must be square, got {w.shape}")
    if w.shape[2] % 2 != 1:
        raise ConfigError(f"conv2d kernel size must be odd, got {w.shape[2]}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weights {w.shape}")
    patches = extract_patches(x, w.shape[2], stride, padding)
    return einsum("bihwkl,iokl->bohw", patches, w)


def upsample_nearest2d(x, factor):
    """Nearest-neighbor upsampling of [B,C,H,W] by an integer factor."""
    if x.ndim != 4:
        raise ShapeError(f"upsample expects [B,C,H,W], got {x.shape}")
    if factor < 1 or int(factor) != factor:
        raise ConfigError(f"upsample factor must be a positive integer, got {factor}")
    f = int(factor)
    if f == 1:
        return x
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def grad_fn(g):
        return [(x, g.reshape(b, c, h, f, w, f).sum(axis=(3, 5)))]

    return _result(out, (x,), "upsample_nearest2d", grad_fn)


# -- batch normalization -----------------------------------------------------------

class BatchNormState:
    """Learnable per-channel affine plus running statistics.

    Normalization happens over all axes except the channel axis (axis 1).
    Train mode uses batch statistics and updates the running buffers;
    eval mode applies the frozen running statistics.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        dt = _DTYPE
        self.channels = channels
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True, op="bn_gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True, op="bn_beta")
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return [self.gamma, self.beta]


def batchnorm(x, state, train):
    """Normalize over the channel axis with affine scale/shift.

    Accepts [B,C] or [B,C,H,W]; ``state.channels`` must equal C.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects [B,C] or [B,C,H,W], got {x.shape}")
    channels = x.shape[1]
    if channels != state.channels:
        raise ShapeError(f"batchnorm channel mismatch: input has {channels}, state has {state.channels}")
    bshape = (1, channels) + (1,) * (x.ndim - 2)
    axes = (0,) if x.ndim == 2 else (0, 2, 3)

    if train:
        batch_mean = x.data.mean(axis=axes)
        batch_var = x.data.var(axis=axes)
        n = x.data.size // channels
        bessel = n / (n - 1) if n > 1 else 1.0
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * batch_mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * batch_var * bessel).astype(state.running_var.dtype)

        mu = tmean(x, axis=axes, keepdims=True)
        xc = sub(x, mu)
        var = tmean(mul(xc, xc), axis=axes, keepdims=True)
        inv = power(add(var, state.eps), -0.5)
        xhat = mul(xc, inv)
    else:
        rm = state.running_mean.reshape(bshape)
        rv = state.running_var.reshape(bshape)
        scale = 1.0 / np.sqrt(rv + state.eps)
        xhat = mul(sub(x, Tensor(rm, dtype=rm.dtype)), Tensor(scale, dtype=scale.dtype))

    gamma = reshape(state.gamma, bshape)
    beta = reshape(state.beta, bshape)
    return add(mul(xhat, gamma), beta)
