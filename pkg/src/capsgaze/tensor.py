"""Dense float tensors with reverse-mode automatic differentiation.

Conventions:
  * Storage is float32 by default; float64 is available (used by the
    gradient-check tests, which need finite differences at 1e-4 relative
    accuracy). Binary ops require both operands to share a dtype.
  * Reductions (sum / mean) accumulate in float64 and cast back to the
    input dtype.
  * Broadcasting is deliberately limited to two cases: a scalar operand,
    or a smaller operand whose shape equals the trailing dimensions of the
    larger one (e.g. bias [O] against activations [B, O]). Anything else
    raises ShapeError rather than silently broadcasting.
  * Graphs are built eagerly during the forward pass and freed by
    backward(); calling backward twice on the same graph is an error.

Randomness comes from RandomSource, a counter-based splitmix64 stream with
Box-Muller normal sampling. The same seed yields the same values on every
run regardless of how the stream is split across calls.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, ShapeError

# --------------------------------------------------------------------------
# FLOP accounting hook.
#
# Cost conventions (shared with metrics.count_flops): one multiply-accumulate
# counts as 2 FLOPs, a bias add or any elementwise arithmetic op counts as 1
# FLOP per output element, a transcendental evaluation (tanh, sigmoid, exp,
# erf) counts as 1 FLOP per element, softmax counts 4 per element, and pure
# data movement (reshape, transpose, concat, slice) counts 0.
# --------------------------------------------------------------------------

_FLOP_COUNTER = None


class FlopCount:
    def __init__(self):
        self.total = 0


@contextmanager
def count_flops():
    """Instrument all tensor ops executed in this context.

    Yields a FlopCount whose .total holds the forward-pass FLOPs under the
    documented cost conventions. Not reentrant.
    """
    global _FLOP_COUNTER
    if _FLOP_COUNTER is not None:
        raise ContractError("count_flops() is not reentrant")
    counter = FlopCount()
    _FLOP_COUNTER = counter
    try:
        yield counter
    finally:
        _FLOP_COUNTER = None


def tick_flops(n):
    if _FLOP_COUNTER is not None:
        _FLOP_COUNTER.total += int(n)


# --------------------------------------------------------------------------
# Autograd machinery
# --------------------------------------------------------------------------

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction (eval-mode forward passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class _Context:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """A dense n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "_freed")

    def __init__(self, data, requires_grad=False, dtype=None):
        # No implicit float64: without an explicit dtype everything becomes
        # float32, including python floats and float64 numpy input.
        if dtype is None:
            dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._ctx = None
        self._freed = False

    # -- basic introspection ------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype, requires_grad=False)

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- backward -------------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from this scalar.

        Populates .grad (a numpy array) on every requires_grad tensor
        reachable through the graph, then frees the graph. A second call on
        the same graph raises ContractError.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._freed:
            raise ContractError("backward() already ran on this graph; rebuild the forward pass")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor with no graph (built under no_grad, or no grad leaves)")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for p in node._ctx.parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            ctx = node._ctx
            if ctx is None:
                continue
            parent_grads = ctx.backward_fn(g)
            for p, pg in zip(ctx.parents, parent_grads):
                if pg is None:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
            node._ctx = None
            node._freed = True
        self._freed = True


def _coerce(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.data.dtype)


def make_op(data, parents, backward_fn):
    """Create an op output, attaching a backward context when grads are on.

    backward_fn(out_grad) must return one gradient array (or None) per
    parent, each matching that parent's shape.
    """
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._ctx = _Context(tuple(parents), backward_fn)
    return out


# --------------------------------------------------------------------------
# Creation
# --------------------------------------------------------------------------


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    return shape


def zeros(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype), dtype=dtype, requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.ones(_check_shape(shape), dtype=dtype), dtype=dtype, requires_grad=requires_grad)


def randn(shape, rng, dtype=np.float32, requires_grad=False):
    """Standard-normal tensor drawn from a RandomSource."""
    shape = _check_shape(shape)
    return Tensor(rng.normal(shape), dtype=dtype, requires_grad=requires_grad)


def uniform(shape, rng, low=0.0, high=1.0, dtype=np.float32, requires_grad=False):
    shape = _check_shape(shape)
    return Tensor(rng.uniform(shape, low, high), dtype=dtype, requires_grad=requires_grad)


# --------------------------------------------------------------------------
# Binary elementwise ops with restricted broadcasting
# --------------------------------------------------------------------------


def _binary_shapes(a, b, opname):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{opname}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{opname}: shapes {sa} and {sb} (only scalar or trailing-dim broadcast)")


def _unbroadcast(grad, shape):
    """Reduce a gradient back to `shape` after trailing-dim or scalar broadcast."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.sum(grad, dtype=np.float64).astype(grad.dtype).reshape(())
    extra = grad.ndim - len(shape)
    return np.sum(grad, axis=tuple(range(extra)), dtype=np.float64).astype(grad.dtype)


def add(a, b):
    b = _coerce(b, a)
    _binary_shapes(a, b, "add")
    out = a.data + b.data
    tick_flops(out.size)
    return make_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    _binary_shapes(a, b, "sub")
    out = a.data - b.data
    tick_flops(out.size)
    return make_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    b = _coerce(b, a)
    _binary_shapes(a, b, "mul")
    out = a.data * b.data
    tick_flops(out.size)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return make_op(out, (a, b), backward)


def div(a, b):
    _binary_shapes(a, b, "div")
    out = a.data / b.data
    tick_flops(out.size)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    return make_op(out, (a, b), backward)


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)
    tick_flops(a.size)
    return make_op(a.data * np.asarray(s, dtype=a.data.dtype), (a,), lambda g: (g * np.asarray(s, dtype=g.dtype),))


def add_scalar(a, s):
    s = float(s)
    tick_flops(a.size)
    return make_op(a.data + np.asarray(s, dtype=a.data.dtype), (a,), lambda g: (g,))


def pow_const(a, exponent):
    """Elementwise power with a constant exponent (a > 0 for fractional exponents)."""
    p = float(exponent)
    out = a.data ** p
    tick_flops(a.size)

    def backward(g):
        return (g * (p * a.data ** (p - 1.0)),)

    return make_op(out, (a,), backward)


# --------------------------------------------------------------------------
# Unary ops
# --------------------------------------------------------------------------


def exp(a):
    out = np.exp(a.data)
    tick_flops(a.size)
    return make_op(out, (a,), lambda g: (g * out,))


def tanh(a):
    out = np.tanh(a.data)
    tick_flops(a.size)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    # Stable logistic: exp of the negated magnitude only.
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)
    tick_flops(a.size)
    return make_op(out, (a,), lambda g: (g * (out * (1.0 - out)),))


# --------------------------------------------------------------------------
# matmul
# --------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with optional shared leading (batch) dimensions.

    Accepted shapes: a [..., m, k] with b [k, n] (b shared across the batch)
    or b [..., k, n] with identical leading dims. Vectors are not accepted;
    reshape first.
    """
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"matmul: mixed dtypes {a.data.dtype} vs {b.data.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ, {a.shape} @ {b.shape}")

    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    batch = int(np.prod(a.shape[:-2], dtype=np.int64)) if a.ndim > 2 else 1
    tick_flops(2 * batch * m * k * n)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if b.ndim == 2 and gb.ndim > 2:
            gb = np.sum(gb, axis=tuple(range(gb.ndim - 2)))
        return (ga.astype(a.data.dtype, copy=False), gb.astype(b.data.dtype, copy=False))

    return make_op(out, (a, b), backward)


# --------------------------------------------------------------------------
# Shape ops (zero-FLOP data movement)
# --------------------------------------------------------------------------


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = np.argsort(axes)
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    dt = tensors[0].data.dtype
    nd = tensors[0].ndim
    ax = axis if axis >= 0 else axis + nd
    for t in tensors:
        if t.data.dtype != dt:
            raise ShapeError("concat: mixed dtypes")
        if t.ndim != nd:
            raise ShapeError("concat: rank mismatch")
        if t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_op(out, tuple(tensors), backward)


def slice_axis(a, axis, start, stop):
    """Contiguous slice along one axis; gradient zero-fills the complement."""
    ax = axis if axis >= 0 else axis + a.ndim
    if not (0 <= start < stop <= a.shape[ax]):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for extent {a.shape[ax]}")
    idx = tuple(slice(None) if i != ax else slice(start, stop) for i in range(a.ndim))

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return make_op(a.data[idx], (a,), backward)


# --------------------------------------------------------------------------
# Reductions (float64 accumulation)
# --------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a if a >= 0 else a + ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    tick_flops(a.size)

    def backward(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.shape).astype(a.data.dtype, copy=False).copy(),)

    return make_op(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes], dtype=np.int64))
    out = (np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64) / count).astype(a.data.dtype)
    tick_flops(a.size)

    def backward(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return ((np.broadcast_to(gg, a.shape) / count).astype(a.data.dtype, copy=False),)

    return make_op(out, (a,), backward)


# --------------------------------------------------------------------------
# RandomSource: counter-based splitmix64 + Box-Muller
# --------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_DERIVE_SALT = np.uint64(0xD6E8FEB86659FD93)
_U53 = np.uint64(11)


def _mix64(z):
    # uint64 arithmetic wraps mod 2^64 by design; hide numpy's overflow warning.
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


class RandomSource:
    """Deterministic random stream: splitmix64 over a counter.

    The i-th raw draw is mix64(seed + (i+1) * golden_gamma), so the stream
    is a pure function of (seed, counter) and identical on every platform.
    Uniforms take the top 53 bits; normals use the Box-Muller transform on
    consecutive uniform pairs.
    """

    def __init__(self, seed):
        self.seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def raw(self, n):
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(self.seed + idx * _GOLDEN)

    def uniform(self, shape=None, low=0.0, high=1.0):
        """Uniform floats in [low, high) as float64."""
        if shape is None:
            n, shape = 1, ()
        elif isinstance(shape, int):
            n, shape = shape, (shape,)
        else:
            shape = tuple(shape)
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.raw(n) >> _U53).astype(np.float64) * (2.0 ** -53)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape):
        """Standard normal via Box-Muller on uniform pairs."""
        if isinstance(shape, int):
            shape = (shape,)
        shape = tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (n + 1) // 2
        raw = self.raw(2 * pairs)
        u1 = ((raw[:pairs] >> _U53).astype(np.float64) + 1.0) * (2.0 ** -53)  # (0, 1]
        u2 = (raw[pairs:] >> _U53).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def shuffle_indices(self, n):
        """Fisher-Yates permutation of range(n)."""
        idx = np.arange(n)
        u = self.uniform(n)
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def derive(self, index):
        """Independent child stream, stable in (seed, index)."""
        with np.errstate(over="ignore"):
            child = _mix64((self.seed ^ _DERIVE_SALT) + np.uint64(int(index) + 1) * _GOLDEN)
        return RandomSource(int(child))

    def get_state(self):
        return (int(self.seed), int(self.counter))

    def set_state(self, state):
        self.seed = np.uint64(state[0])
        self.counter = int(state[1])


def derive_seed(seed, index):
    """Stable 64-bit child seed for (seed, index); see RandomSource.derive."""
    with np.errstate(over="ignore"):
        child = _mix64(
            (np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF) ^ _DERIVE_SALT) + np.uint64(int(index) + 1) * _GOLDEN
        )
    return int(child)
