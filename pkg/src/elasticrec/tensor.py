"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op records one entry on a thread-local tape when any
input requires a gradient and gradient recording is enabled.  Because ops are
appended as they execute, the tape is already in topological order and
``backward`` simply replays it in reverse.

The module also owns two instruments used by the benchmark harness: a FLOP
counter (multiply-add = 2 FLOPs, softmax = 5 FLOPs per element, every other
elementwise/data-movement op = 1 FLOP per output element) and a live-buffer
tracker reporting the peak number of bytes held by tensors.
"""
from __future__ import annotations

import contextlib
import itertools
import math
import threading
import weakref
import zlib

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "exp",
    "log",
    "relu",
    "gelu",
    "reshape",
    "transpose",
    "concat",
    "index",
    "sum",
    "mean",
    "softmax",
    "masked_fill",
    "layer_norm",
    "cross_entropy",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "clear_tape",
    "tape_size",
    "flop_count",
    "reset_flops",
    "add_flops",
    "count_flops",
    "track_memory",
    "rng_for",
    "normal_init",
]

_ids = itertools.count()


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = []
        self.grad_enabled = True
        self.flops = 0
        self.memory = None


_state = _ThreadState()


class MemoryTracker:
    """Running total and high-water mark of live tensor bytes."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def _alloc(self, nbytes):
        self.current += nbytes
        if self.current > self.peak:
            self.peak = self.current

    def _free(self, nbytes):
        self.current -= nbytes


class FlopCounter:
    def __init__(self, start):
        self._start = start
        self.flops = 0


class Tensor:
    """Row-major float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "name", "node_id", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, _copy=True):
        arr = np.require(np.asarray(data, dtype=np.float64), requirements="C")
        if arr is data and _copy:
            arr = arr.copy()
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''} of shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id = next(_ids)
        tracker = _state.memory
        if tracker is not None:
            tracker._alloc(arr.nbytes)
            weakref.finalize(self, tracker._free, arr.nbytes)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, parents, backward_fn, flops):
    _state.flops += int(flops)
    needs = _state.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs, _copy=False)
    if needs:
        _state.tape.append((out, parents, backward_fn))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    inner = a.shape[-1]

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), backward_fn, 2 * out.size * inner)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    out = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward_fn, out.size)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), backward_fn, out.size)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward_fn, out.size)


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,), x.size)


def neg(x):
    return scale(x, -1.0)


def exp(x):
    x = _as_tensor(x)
    with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError instead
        out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), x.size)


def log(x):
    x = _as_tensor(x)
    if (x.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,), x.size)


def relu(x):
    x = _as_tensor(x)
    on = x.data > 0
    return _record(x.data * on, (x,), lambda g: (g * on,), x.size)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU."""
    x = _as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _record(out, (x,), backward_fn, x.size)


def masked_fill(x, mask, value):
    """Replace entries where the boolean ``mask`` broadcasts True by ``value``."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, float(value), x.data)
    except ValueError:
        raise DimensionError(f"masked_fill: mask {mask.shape} vs tensor {x.shape}") from None
    if out.shape != x.shape:
        raise DimensionError(f"masked_fill: mask {mask.shape} would broadcast tensor {x.shape}")
    return _record(out, (x,), lambda g: (np.where(mask, 0.0, g),), x.size)


# ---------------------------------------------------------------------------
# shape manipulation (all copies, no strided views)

def reshape(x, shape):
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape).copy()
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    old = x.shape
    return _record(out, (x,), lambda g: (g.reshape(old),), x.size)


def transpose(x, axes=None):
    """Permute axes; by default swap the last two."""
    x = _as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 axes, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inverse),), x.size)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(tensors), backward_fn, out.size)


def index(x, idx):
    """Basic or integer-array indexing; integer indices are not differentiable."""
    x = _as_tensor(x)
    try:
        out = x.data[idx]
    except IndexError as exc:
        raise DimensionError(f"index: {exc} for shape {x.shape}") from None
    out = np.array(out, dtype=np.float64)

    def backward_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (x,), backward_fn, max(out.size, 1))


# ---------------------------------------------------------------------------
# reductions

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _record(out, (x,), lambda g: (np.array(_expand(g, x.shape, axis, keepdims)),), x.size)


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // max(out.size, 1)
    return _record(
        out, (x,), lambda g: (np.array(_expand(g, x.shape, axis, keepdims)) / count,), x.size
    )


# ---------------------------------------------------------------------------
# normalisation and losses

def softmax(x, axis=-1):
    """Row-max stabilised softmax."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (x,), backward_fn, 5 * x.size)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row mean/variance normalisation over the last axis, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward_fn(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), backward_fn, 8 * x.size)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ContractError("cross_entropy: target outside candidate range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(targets.shape[0])
    out = np.asarray(-logp[rows, targets].mean())

    def backward_fn(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (float(g) / targets.shape[0]),)

    return _record(out, (logits,), backward_fn, 5 * logits.size + targets.shape[0])


# ---------------------------------------------------------------------------
# tape control

def backward(loss):
    """Populate ``.grad`` on everything reachable from scalar ``loss``; clears the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if not loss.requires_grad or not any(entry[0] is loss for entry in reversed(tape)):
        raise ContractError("loss is not connected to the recorded tape")
    loss.grad = np.ones_like(loss.data)
    try:
        for out, parents, fn in reversed(tape):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    p.grad = p.grad + g
    finally:
        tape.clear()


def clear_tape():
    _state.tape.clear()


def tape_size():
    return len(_state.tape)


def is_grad_enabled():
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference mode)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# ---------------------------------------------------------------------------
# instruments

def flop_count():
    return _state.flops


def reset_flops():
    _state.flops = 0


def add_flops(n):
    """Charge ``n`` FLOPs for work done outside the tensor ops (e.g. compiled kernels)."""
    _state.flops += int(n)


@contextlib.contextmanager
def count_flops():
    """Yield a counter whose ``flops`` holds the FLOPs spent inside the block."""
    counter = FlopCounter(_state.flops)
    try:
        yield counter
    finally:
        counter.flops = _state.flops - counter._start


@contextlib.contextmanager
def track_memory():
    """Yield a tracker of bytes held by tensors created inside the block."""
    prev = _state.memory
    tracker = MemoryTracker()
    _state.memory = tracker
    try:
        yield tracker
    finally:
        _state.memory = prev


# ---------------------------------------------------------------------------
# deterministic initialisation

def rng_for(seed, name=""):
    """Generator keyed by (seed, parameter name); independent of creation order."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & (2**64 - 1), zlib.crc32(name.encode())])))


def normal_init(shape, seed, name, std=0.02):
    return parameter(rng_for(seed, name).normal(0.0, std, size=shape), name=name)
