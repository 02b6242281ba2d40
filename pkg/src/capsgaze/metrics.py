"""Angular error, parameter/FLOP accounting, and latency measurement.

Angle convention: gaze is (pitch, yaw) in radians; the corresponding unit
ray is

    v = (cos(pitch) sin(yaw), sin(pitch), cos(pitch) cos(yaw))

so (0, 0) looks straight down the +z axis, positive yaw turns toward +x,
positive pitch looks up. Angular error is the arc between the two rays in
degrees, computed in float64 with the dot product clamped to [-1, 1].

FLOP convention (matches the instrumented counter in the tensor core):
one multiply-accumulate = 2 FLOPs, bias add = 1 per output element,
elementwise arithmetic and transcendentals = 1 per element, softmax = 4
per element, data movement = 0.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .errors import NumericError, ShapeError


@dataclass
class GazeAngles:
    pitch: float  # radians
    yaw: float


@dataclass
class Ray3D:
    x: float
    y: float
    z: float


def angles_to_ray(g):
    """Unit gaze ray for (pitch, yaw); float64 throughout."""
    pitch, yaw = float(g.pitch), float(g.yaw)
    if not (math.isfinite(pitch) and math.isfinite(yaw)):
        raise NumericError(f"non-finite gaze angles ({g.pitch}, {g.yaw})")
    cp = math.cos(pitch)
    return Ray3D(x=cp * math.sin(yaw), y=math.sin(pitch), z=cp * math.cos(yaw))


def angular_error(pred, true):
    """Angle in degrees between the rays of two (pitch, yaw) pairs."""
    a = angles_to_ray(pred)
    b = angles_to_ray(true)
    dot = a.x * b.x + a.y * b.y + a.z * b.z
    return math.degrees(math.acos(min(1.0, max(-1.0, dot))))


def angular_error_batch(pred, true):
    """Vectorized angular error: [B, 2] arrays of (pitch, yaw) -> [B] degrees."""
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ShapeError(f"expected matching [B, 2] angle arrays, got {pred.shape} and {true.shape}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(true))):
        raise NumericError("non-finite angles in batch")

    def rays(ang):
        cp = np.cos(ang[:, 0])
        return np.stack([cp * np.sin(ang[:, 1]), np.sin(ang[:, 0]), cp * np.cos(ang[:, 1])], axis=1)

    dot = np.clip(np.sum(rays(pred) * rays(true), axis=1), -1.0, 1.0)
    return np.degrees(np.arccos(dot))


# --------------------------------------------------------------------------
# Parameter accounting (closed forms)
# --------------------------------------------------------------------------


def count_linear(in_features, out_features):
    return in_features * out_features + out_features


def count_gru(input_size, hidden_size):
    """3 gates x (W + U + b) = 3(I*H + H^2 + H)."""
    return 3 * (input_size * hidden_size + hidden_size * hidden_size + hidden_size)


def count_params(cfg):
    """Trainable parameter count for a config, from closed forms.

    A frozen encoder contributes nothing (its tensors never receive
    gradients). dual_shared counts the shared decoder once.
    """
    total = 0
    if not cfg.frozen_encoder:
        c_in = 3
        for c_out in cfg.encoder_channels:
            total += c_out * c_in * 9 + c_out  # conv weight + bias
            total += 2 * c_out  # batch norm gamma + beta
            c_in = c_out
    c_feat = cfg.encoder_channels[-1]
    total += count_linear(c_feat, cfg.capsule_dim)  # phi
    if cfg.use_capsules:
        total += cfg.num_capsules * cfg.capsule_dim  # pooling queries
    if cfg.use_attention:
        total += 4 * count_linear(cfg.capsule_dim, cfg.capsule_dim)
    dec = count_gru(cfg.decoder_input_size, cfg.hidden_dim) + count_linear(cfg.hidden_dim, 2)
    total += 2 * dec if cfg.decoder_mode == "dual" else dec
    if cfg.decoder_mode != "single":
        total += count_linear(4, 2)  # fusion
    return total


# --------------------------------------------------------------------------
# FLOP accounting (closed forms; per single frame)
# --------------------------------------------------------------------------


def flops_breakdown(cfg):
    """Per-component forward FLOPs for one whole sequence, batch size 1.

    Keys:
      encoder                 conv blocks (conv + norm + gelu), all T frames
      capsule_formation       phi projection, pooling logits/softmax/sum
      attn_proj_qk            the two projections that produce Q and K
                              (MACs only, so doubling D exactly quadruples it)
      attn_other              scores, softmax, AV, V/out projections, biases,
                              residual
      decoders                GRU unrolls plus heads (both branches when dual)
      fusion                  the 4->2 late fusion
    """
    t, k, d, h = cfg.seq_len, cfg.num_capsules, cfg.capsule_dim, cfg.num_heads
    hid = cfg.hidden_dim
    n = cfg.num_locations

    bk = {}

    # encoder: three stride-2 conv blocks per frame
    enc = 0
    c_in, side = 3, cfg.image_size
    for c_out in cfg.encoder_channels:
        side //= 2
        elems = c_out * side * side
        enc += 2 * c_out * c_in * 9 * side * side  # conv MACs
        enc += elems  # conv bias
        enc += 4 * elems  # norm (eval): subtract, scale, gamma, beta
        enc += elems  # gelu
        c_in = c_out
    bk["encoder"] = t * enc

    c_feat = cfg.encoder_channels[-1]
    form = 2 * n * c_feat * d + n * d  # phi MACs + bias
    if cfg.use_capsules:
        form += 2 * n * d * k  # pooling logits
        form += k * n  # logit scaling
        form += 4 * k * n  # softmax
        form += 2 * k * n * d  # weighted sum
    bk["capsule_formation"] = t * form

    tokens_per_frame = cfg.num_tokens
    if cfg.use_attention:
        s = t * tokens_per_frame
        bk["attn_proj_qk"] = 2 * (2 * s * d * d)
        other = 2 * s * d  # q, k biases
        other += 2 * s * d * d + s * d  # V projection + bias
        other += 2 * s * s * d  # QK^T scores
        other += h * s * s  # logit scaling
        other += 4 * h * s * s  # softmax
        other += 2 * s * s * d  # A V
        other += 2 * s * d * d + s * d  # output projection + bias
        other += s * d  # residual
        bk["attn_other"] = other
    else:
        bk["attn_proj_qk"] = 0
        bk["attn_other"] = 0

    # GRU per step: 3 gates of (2IH + 2H^2), plus elementwise gate math
    i_sz = cfg.decoder_input_size
    step = 3 * (2 * i_sz * hid + 2 * hid * hid) + 14 * hid
    head = 2 * hid * 2 + 2
    one_dec = t * step + head
    branches = 1 if cfg.decoder_mode == "single" else 2
    bk["decoders"] = branches * one_dec

    bk["fusion"] = 0 if cfg.decoder_mode == "single" else (2 * 4 * 2 + 2)
    return bk


def count_flops(cfg):
    """Closed-form forward FLOPs per single frame (sequence total / T)."""
    total = sum(flops_breakdown(cfg).values())
    return total // cfg.seq_len


def instrumented_flops(cfg, params=None, seed=0):
    """Measured per-frame FLOPs of one eval forward (batch 1), for cross-checks."""
    if params is None:
        params = M.init_model(cfg, T.RandomSource(seed))
    frames = T.randn((1, cfg.seq_len, 3, cfg.image_size, cfg.image_size), T.RandomSource(seed))
    with T.no_grad():
        with T.count_flops() as counter:
            M.model_forward(frames, params, cfg, training=False)
    return counter.total // cfg.seq_len


# --------------------------------------------------------------------------
# Latency
# --------------------------------------------------------------------------


def measure_latency(params, cfg, warmup=10, iters=100, seed=0):
    """Wall-clock per-sequence eval forward; returns (mean_ms, p95_ms).

    Runs `warmup` untimed forwards first, then times exactly `iters` more.
    """
    if iters < 10:
        raise ValueError(f"need iters >= 10 for stable stats, got {iters}")
    frames = T.randn((1, cfg.seq_len, 3, cfg.image_size, cfg.image_size), T.RandomSource(seed))
    with T.no_grad():
        for _ in range(warmup):
            M.model_forward(frames, params, cfg, training=False)
        samples = np.empty(iters)
        for i in range(iters):
            t0 = time.perf_counter()
            M.model_forward(frames, params, cfg, training=False)
            samples[i] = (time.perf_counter() - t0) * 1000.0
    return float(samples.mean()), float(np.percentile(samples, 95))


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


@dataclass
class MetricReport:
    mean_err_deg: float
    param_count: int
    flops_per_frame: int
    latency_mean_ms: float
    latency_p95_ms: float

    CSV_HEADER = "err_deg,params,flops,latency_ms,latency_p95_ms"

    def __post_init__(self):
        if self.mean_err_deg < 0 or self.param_count < 0 or self.flops_per_frame < 0:
            raise ValueError("metric report fields must be nonnegative")

    def csv_row(self):
        return (f"{self.mean_err_deg:.6f},{self.param_count},{self.flops_per_frame},"
                f"{self.latency_mean_ms:.3f},{self.latency_p95_ms:.3f}")

    def text(self):
        return "\n".join([
            f"angular error : {self.mean_err_deg:.4f} deg",
            f"parameters    : {self.param_count:,}",
            f"flops/frame   : {self.flops_per_frame:,}",
            f"latency       : {self.latency_mean_ms:.3f} ms (p95 {self.latency_p95_ms:.3f} ms)",
        ])
