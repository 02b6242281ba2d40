"""Neural network layers on top of the tensor core.

Parameter containers are plain dataclasses of Tensors; layer functions are
free functions so the same parameters can be applied under different modes
(training vs eval, frozen vs trainable). Initialization draws from a
RandomSource, so a seed fully determines every weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf as _erf

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor, make_op, tick_flops

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# Linear
# --------------------------------------------------------------------------


@dataclass
class LinearParams:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]


def init_linear(in_features, out_features, rng, dtype=np.float32):
    """Uniform(-1/sqrt(in), 1/sqrt(in)) weights, zero bias."""
    bound = 1.0 / math.sqrt(in_features)
    w = T.uniform((out_features, in_features), rng, -bound, bound, dtype=dtype, requires_grad=True)
    b = T.zeros((out_features,), dtype=dtype, requires_grad=True)
    return LinearParams(weight=w, bias=b)


def linear(x, p):
    """y = x @ W.T + b over the last axis of x."""
    if x.shape[-1] != p.weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in_features {p.weight.shape[1]}")
    lead = x.shape[:-1]
    flat = x.reshape((int(np.prod(lead, dtype=np.int64)), x.shape[-1])) if len(lead) != 1 else x
    out = flat @ T.transpose(p.weight, (1, 0)) + p.bias
    if len(lead) != 1:
        out = out.reshape(lead + (p.weight.shape[0],))
    return out


# --------------------------------------------------------------------------
# Softmax (single primitive: fused max-shift, exp, normalize)
# --------------------------------------------------------------------------


def softmax(x, axis=-1):
    """Numerically stable softmax along one axis.

    Backward uses dx = (g - sum(g * y)) * y; the max subtraction is a
    constant shift and does not enter the gradient.
    """
    ax = axis if axis >= 0 else axis + x.ndim
    shifted = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=ax, keepdims=True)
    y = y.astype(x.data.dtype, copy=False)
    tick_flops(4 * x.size)

    def backward(g):
        dot = np.sum(g * y, axis=ax, keepdims=True)
        return ((g - dot) * y,)

    return make_op(y, (x,), backward)


# --------------------------------------------------------------------------
# GELU (exact, erf form)
# --------------------------------------------------------------------------


def gelu(x):
    """gelu(x) = 0.5 x (1 + erf(x / sqrt(2))), the exact formulation.

    d/dx = Phi(x) + x * phi(x) with Phi the standard normal CDF.
    """
    xd = x.data
    cdf = 0.5 * (1.0 + _erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)
    tick_flops(x.size)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return make_op(out, (x,), backward)


# --------------------------------------------------------------------------
# Batch normalization
# --------------------------------------------------------------------------


@dataclass
class BatchNormParams:
    gamma: Tensor  # [C]
    beta: Tensor  # [C]
    running_mean: np.ndarray  # [C], float32 buffers, not parameters
    running_var: np.ndarray  # [C]
    eps: float = 1e-5
    momentum: float = 0.1


def init_batch_norm(channels, dtype=np.float32):
    return BatchNormParams(
        gamma=T.ones((channels,), dtype=dtype, requires_grad=True),
        beta=T.zeros((channels,), dtype=dtype, requires_grad=True),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
    )


def batch_norm(x, p, channel_axis, training, update_stats=True):
    """Normalize over every axis except channel_axis.

    Training mode uses batch statistics (biased variance) and, unless
    update_stats is False (frozen encoder), folds them into the running
    buffers with factor `momentum`. Eval mode uses the running buffers.
    Built from differentiable primitives, so the gradient flows through
    the batch statistics as it should.
    """
    ax = channel_axis if channel_axis >= 0 else channel_axis + x.ndim
    reduce_count = x.size // x.shape[ax]
    if training and reduce_count < 2:
        raise ContractError("batch_norm: training mode needs >= 2 values per channel")

    # move channels last so [C] parameters broadcast over trailing dims
    perm = tuple(i for i in range(x.ndim) if i != ax) + (ax,)
    xl = T.transpose(x, perm) if perm != tuple(range(x.ndim)) else x
    red_axes = tuple(range(x.ndim - 1))

    if training:
        # stats reduce to [C], which broadcasts over the trailing channel axis
        mean = xl.mean(axis=red_axes)
        centered = xl - mean
        var = (centered * centered).mean(axis=red_axes)
        if update_stats:
            m = p.momentum
            p.running_mean[...] = (1 - m) * p.running_mean + m * mean.data
            p.running_var[...] = (1 - m) * p.running_var + m * var.data
        norm = centered * ((var + p.eps) ** -0.5)
    else:
        rm = Tensor(p.running_mean, dtype=x.data.dtype)
        rv = Tensor(((p.running_var + p.eps) ** -0.5), dtype=x.data.dtype)
        norm = (xl - rm) * rv

    out = norm * p.gamma + p.beta
    if perm != tuple(range(x.ndim)):
        out = T.transpose(out, tuple(np.argsort(perm)))
    return out


# --------------------------------------------------------------------------
# Dropout
# --------------------------------------------------------------------------


def dropout(x, rate, training, rng=None):
    """Inverted dropout: survivors scaled by 1/(1-rate).

    Eval mode (or rate 0) returns x unchanged. The mask comes from the
    given RandomSource so runs are reproducible.
    """
    if not (0.0 <= rate < 1.0):
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a RandomSource")
    keep = (rng.uniform(x.shape) >= rate).astype(x.data.dtype)
    mask = Tensor(keep / (1.0 - rate), dtype=x.data.dtype)
    return x * mask


# --------------------------------------------------------------------------
# GRU
# --------------------------------------------------------------------------


@dataclass
class GRUParams:
    """Gated recurrent unit weights.

    Gate equations (sigmoid gates, tanh candidate):
        z = sigmoid(x W_z^T + h U_z^T + b_z)
        r = sigmoid(x W_r^T + h U_r^T + b_r)
        hc = tanh(x W_h^T + (r * h) U_h^T + b_h)
        h' = (1 - z) * h + z * hc
    so z == 1 fully replaces the state with the candidate.
    """

    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_h: Tensor
    U_h: Tensor
    b_h: Tensor

    @property
    def hidden_size(self):
        return self.b_z.shape[0]

    @property
    def input_size(self):
        return self.W_z.shape[1]


def init_gru(input_size, hidden_size, rng, dtype=np.float32):
    bound = 1.0 / math.sqrt(input_size)
    ubound = 1.0 / math.sqrt(hidden_size)

    def w():
        return T.uniform((hidden_size, input_size), rng, -bound, bound, dtype=dtype, requires_grad=True)

    def u():
        return T.uniform((hidden_size, hidden_size), rng, -ubound, ubound, dtype=dtype, requires_grad=True)

    def b():
        return T.zeros((hidden_size,), dtype=dtype, requires_grad=True)

    return GRUParams(W_z=w(), U_z=u(), b_z=b(), W_r=w(), U_r=u(), b_r=b(), W_h=w(), U_h=u(), b_h=b())


def gru_cell(x, h, p):
    """One step; x is [B, I] (or [I]), h is [B, H] (or [H])."""
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape((1, x.shape[0]))
        h = h.reshape((1, h.shape[0]))
    if x.shape[-1] != p.input_size:
        raise ShapeError(f"gru_cell: input width {x.shape[-1]} != {p.input_size}")
    if h.shape[-1] != p.hidden_size:
        raise ShapeError(f"gru_cell: state width {h.shape[-1]} != {p.hidden_size}")

    wt = lambda m: T.transpose(m, (1, 0))
    z = T.sigmoid(x @ wt(p.W_z) + h @ wt(p.U_z) + p.b_z)
    r = T.sigmoid(x @ wt(p.W_r) + h @ wt(p.U_r) + p.b_r)
    hc = T.tanh(x @ wt(p.W_h) + (r * h) @ wt(p.U_h) + p.b_h)
    out = (1.0 - z) * h + z * hc
    return out.reshape((out.shape[-1],)) if squeeze else out


def gru_sequence(xs, p, h0=None):
    """Run a GRU over xs [B, T, I]; returns (h_T [B, H], states [B, T, H])."""
    if xs.ndim != 3:
        raise ShapeError(f"gru_sequence expects [B, T, I], got {xs.shape}")
    b, t, _ = xs.shape
    h = h0 if h0 is not None else T.zeros((b, p.hidden_size), dtype=xs.data.dtype)
    states = []
    for step in range(t):
        x_t = T.slice_axis(xs, 1, step, step + 1).reshape((b, xs.shape[2]))
        h = gru_cell(x_t, h, p)
        states.append(h.reshape((b, 1, p.hidden_size)))
    return h, T.concat(states, axis=1)
