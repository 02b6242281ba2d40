"""Convolutional frame encoder and the on-disk feature format.

The encoder is a small three-block CNN that maps a [B, 3, S, S] image batch
to a [B, C, S/8, S/8] feature map: each block is conv(3x3, stride 2, pad 1)
-> batch norm -> GELU. With the default channel plan (16, 32, 64) a 64x64
input becomes an 8x8 map with 64 channels, i.e. 64 spatial locations.

The encoder can be frozen: its tensors are created without gradient slots
and its batch norm buffers never update, so downstream code can rely on a
frozen encoder contributing exactly zero gradient.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import FormatError, ShapeError
from .tensor import Tensor, make_op, tick_flops

FEATURE_MAGIC = b"CSFT"
FEATURE_VERSION = 1


# --------------------------------------------------------------------------
# conv2d primitive (im2col / col2im)
# --------------------------------------------------------------------------


def conv2d(x, weight, bias, stride=1, padding=0):
    """2-D convolution (cross-correlation), NCHW layout.

    x [B, C, H, W], weight [O, C, k, k], bias [O]. Output spatial size is
    (H + 2 pad - k) // stride + 1.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cw}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit {h}x{w} input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    # im2col: cols [B, C*kh*kw, oh*ow]
    cols = np.empty((b, c * kh * kw, oh * ow), dtype=x.data.dtype)
    idx = 0
    for ci in range(c):
        for ki in range(kh):
            for kj in range(kw):
                patch = xp[:, ci, ki: ki + stride * oh: stride, kj: kj + stride * ow: stride]
                cols[:, idx, :] = patch.reshape(b, oh * ow)
                idx += 1
    w2 = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(w2, cols).reshape(b, o, oh, ow) + bias.data.reshape(1, o, 1, 1)
    tick_flops(2 * b * o * (c * kh * kw) * oh * ow + b * o * oh * ow)

    def backward(g):
        gflat = g.reshape(b, o, oh * ow)
        gw = np.einsum("bol,bkl->ok", gflat, cols).reshape(weight.shape)
        gb = gflat.sum(axis=(0, 2))
        gcols = np.einsum("ok,bol->bkl", w2, gflat)
        # col2im with overlap accumulation
        gxp = np.zeros_like(xp)
        idx2 = 0
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, ci, ki: ki + stride * oh: stride, kj: kj + stride * ow: stride] += gcols[:, idx2, :].reshape(b, oh, ow)
                    idx2 += 1
        gx = gxp[:, :, padding: padding + h, padding: padding + w] if padding else gxp
        return (
            gx.astype(x.data.dtype, copy=False),
            gw.astype(weight.data.dtype, copy=False),
            gb.astype(bias.data.dtype, copy=False),
        )

    return make_op(out, (x, weight, bias), backward)


# --------------------------------------------------------------------------
# Encoder
# --------------------------------------------------------------------------


@dataclass
class ConvBlockParams:
    weight: Tensor  # [O, C, 3, 3]
    bias: Tensor  # [O]
    norm: L.BatchNormParams


@dataclass
class EncoderParams:
    blocks: list = field(default_factory=list)
    frozen: bool = False

    @property
    def out_channels(self):
        return self.blocks[-1].weight.shape[0]


def init_encoder(rng, in_channels=3, channels=(16, 32, 64), frozen=False, dtype=np.float32):
    """Three stride-2 conv blocks; weight bound 1/sqrt(fan_in)."""
    blocks = []
    c_in = in_channels
    for c_out in channels:
        fan_in = c_in * 9
        bound = 1.0 / np.sqrt(fan_in)
        w = T.uniform((c_out, c_in, 3, 3), rng, -bound, bound, dtype=dtype, requires_grad=not frozen)
        b = T.zeros((c_out,), dtype=dtype, requires_grad=not frozen)
        norm = L.init_batch_norm(c_out, dtype=dtype)
        if frozen:
            norm.gamma.requires_grad = False
            norm.beta.requires_grad = False
        blocks.append(ConvBlockParams(weight=w, bias=b, norm=norm))
        c_in = c_out
    return EncoderParams(blocks=blocks, frozen=frozen)


def encode(frames, p, training):
    """[B, 3, S, S] -> [B, C, S/8, S/8] feature maps.

    S must be divisible by 8 so the three stride-2 blocks tile exactly.
    A frozen encoder runs under no_grad and never updates norm buffers.
    """
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeError(f"encode expects [B, 3, S, S], got {frames.shape}")
    if frames.shape[2] != frames.shape[3] or frames.shape[2] % 8 != 0:
        raise ShapeError(f"encode: spatial size must be square and divisible by 8, got {frames.shape[2:]}")

    def run(x):
        for blk in p.blocks:
            x = conv2d(x, blk.weight, blk.bias, stride=2, padding=1)
            x = L.batch_norm(x, blk.norm, channel_axis=1, training=training, update_stats=not p.frozen)
            x = L.gelu(x)
        return x

    if p.frozen:
        with T.no_grad():
            return run(frames)
    return run(frames)


def encoder_param_dict(p, prefix="encoder"):
    """Named tensors for optimizers and checkpoints."""
    out = {}
    for i, blk in enumerate(p.blocks):
        out[f"{prefix}.block{i}.weight"] = blk.weight
        out[f"{prefix}.block{i}.bias"] = blk.bias
        out[f"{prefix}.block{i}.gamma"] = blk.norm.gamma
        out[f"{prefix}.block{i}.beta"] = blk.norm.beta
    return out


def encoder_buffer_dict(p, prefix="encoder"):
    out = {}
    for i, blk in enumerate(p.blocks):
        out[f"{prefix}.block{i}.running_mean"] = blk.norm.running_mean
        out[f"{prefix}.block{i}.running_var"] = blk.norm.running_var
    return out


# --------------------------------------------------------------------------
# Feature file format
#
# Layout (little-endian): magic "CSFT", version u32, rank u32, dims u32[rank],
# then the float32 payload in C order.
# --------------------------------------------------------------------------


def save_features(path, array):
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<I", FEATURE_VERSION))
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def load_features(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {FEATURE_MAGIC!r}")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature version {version}")
    off = 12
    if len(blob) < off + 4 * rank:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", blob, off)
    off += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    want = off + 4 * count
    if len(blob) != want:
        raise FormatError(f"{path}: payload is {len(blob) - off} bytes, header promises {4 * count}")
    return np.frombuffer(blob, dtype="<f4", offset=off, count=count).reshape(dims).copy()
