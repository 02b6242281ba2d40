"""Capsule formation from feature maps and attention routing across a sequence.

A feature map with H*W = N spatial locations is projected location-wise to
D dimensions (a 1x1 projection) and pooled into K capsules: capsule k is a
convex combination of the N location embeddings under softmax weights

    P[k, :] = softmax(<query_k, loc_.> / sqrt(D)),   capsule_k = sum_n P[k, n] loc_n

so each capsule learns to attend to a region of the frame (eyes, face
outline, ...) and P doubles as an interpretable heatmap.

Routing is one-shot multi-head self-attention over all T*K capsules of a
sequence treated as an unordered token set: A = softmax(Q K^T / scale) per
head, heads concatenated, output-projected, plus a residual. No positional
encodings are injected, which makes token-permutation equivariance exact.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import layers as L
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


# --------------------------------------------------------------------------
# Capsule formation
# --------------------------------------------------------------------------


@dataclass
class CapsuleParams:
    phi: L.LinearParams  # C -> D location projection
    queries: Tensor  # [K, D] pooling queries


def init_capsules(in_channels, num_capsules, capsule_dim, rng, dtype=np.float32):
    phi = L.init_linear(in_channels, capsule_dim, rng, dtype=dtype)
    bound = 1.0 / math.sqrt(capsule_dim)
    queries = T.uniform((num_capsules, capsule_dim), rng, -bound, bound, dtype=dtype, requires_grad=True)
    return CapsuleParams(phi=phi, queries=queries)


def project_locations(fm, phi):
    """[BT, C, H, W] -> location embeddings [BT, N, D] with N = H*W."""
    if fm.ndim != 4:
        raise ShapeError(f"expected [B*T, C, H, W] feature map, got {fm.shape}")
    bt, c, h, w = fm.shape
    if c != phi.weight.shape[1]:
        raise ShapeError(f"feature map has {c} channels, projection expects {phi.weight.shape[1]}")
    locs = T.transpose(fm, (0, 2, 3, 1)).reshape((bt, h * w, c))
    return L.linear(locs, phi)


def form_capsules(fm, p, seq_len, dropout_rate=0.0, training=False, rng=None):
    """Pool a [B*T, C, H, W] feature map into K capsules per frame.

    Returns (caps [B, T, K, D], P [B, T, K, N]). Dropout (when training)
    hits the pooled capsules, not the location embeddings.
    """
    bt = fm.shape[0]
    if bt % seq_len != 0:
        raise ShapeError(f"batch*time {bt} not divisible by seq_len {seq_len}")
    b = bt // seq_len
    k, d = p.queries.shape

    locs = project_locations(fm, p.phi)  # [BT, N, D]
    n = locs.shape[1]
    # logits [BT, K, N]: one score per (query, location)
    logits = T.transpose(locs @ T.transpose(p.queries, (1, 0)), (0, 2, 1)) * (1.0 / math.sqrt(d))
    pool = L.softmax(logits, axis=-1)
    caps = pool @ locs  # [BT, K, D] convex combinations
    caps = L.dropout(caps, dropout_rate, training, rng)
    return caps.reshape((b, seq_len, k, d)), pool.reshape((b, seq_len, k, n))


# --------------------------------------------------------------------------
# Attention routing
# --------------------------------------------------------------------------


@dataclass
class AttentionParams:
    q: L.LinearParams  # D -> D
    k: L.LinearParams
    v: L.LinearParams
    out: L.LinearParams
    heads: int
    scale_mode: str = "per_head"  # "per_head": sqrt(D/h); "model": sqrt(D)


def init_attention(capsule_dim, heads, rng, scale_mode="per_head", dtype=np.float32):
    if capsule_dim % heads != 0:
        raise ConfigError(f"capsule_dim {capsule_dim} not divisible by heads {heads}")
    if scale_mode not in ("per_head", "model"):
        raise ConfigError(f"unknown attention scale mode {scale_mode!r}")
    mk = lambda: L.init_linear(capsule_dim, capsule_dim, rng, dtype=dtype)
    return AttentionParams(q=mk(), k=mk(), v=mk(), out=mk(), heads=heads, scale_mode=scale_mode)


def attention_scale(capsule_dim, heads, scale_mode):
    if scale_mode == "per_head":
        return math.sqrt(capsule_dim / heads)
    if scale_mode == "model":
        return math.sqrt(capsule_dim)
    raise ConfigError(f"unknown attention scale mode {scale_mode!r}")


def route(caps, p):
    """Self-attention over all T*K capsules; returns (out, A).

    caps [B, T, K, D] -> out [B, T, K, D] (with residual),
    A [B, h, T*K, T*K] row-stochastic attention weights.
    """
    if caps.ndim != 4:
        raise ShapeError(f"route expects [B, T, K, D], got {caps.shape}")
    b, t, k, d = caps.shape
    h = p.heads
    if d % h != 0:
        raise ConfigError(f"capsule_dim {d} not divisible by heads {h}")
    dh = d // h
    s = t * k
    scale = attention_scale(d, h, p.scale_mode)

    tok = caps.reshape((b, s, d))

    def split_heads(x):
        return T.transpose(x.reshape((b, s, h, dh)), (0, 2, 1, 3))  # [B, h, S, dh]

    q = split_heads(L.linear(tok, p.q))
    kk = split_heads(L.linear(tok, p.k))
    v = split_heads(L.linear(tok, p.v))

    logits = (q @ T.transpose(kk, (0, 1, 3, 2))) * (1.0 / scale)
    attn = L.softmax(logits, axis=-1)  # [B, h, S, S]
    ctx = attn @ v  # [B, h, S, dh]
    merged = T.transpose(ctx, (0, 2, 1, 3)).reshape((b, s, d))
    out = L.linear(merged, p.out) + tok  # residual
    return out.reshape((b, t, k, d)), attn


# --------------------------------------------------------------------------
# Heatmaps
# --------------------------------------------------------------------------


def capsule_heatmaps(pool, height, width):
    """Render one frame's pooling weights as K grayscale images.

    pool is [K, N] with N = height*width and row sums of 1. Each row is
    min-max scaled to [0, 255]; a constant row (uniform attention) has no
    contrast to show and maps to mid-gray 127 by convention.
    """
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim != 2 or pool.shape[1] != height * width:
        raise ShapeError(f"pool weights {pool.shape} do not cover a {height}x{width} map")
    k = pool.shape[0]
    out = np.empty((k, height, width), dtype=np.uint8)
    for i in range(k):
        row = pool[i]
        lo, hi = float(row.min()), float(row.max())
        if hi - lo < 1e-12:
            out[i] = 127
        else:
            out[i] = np.round((row - lo) / (hi - lo) * 255.0).reshape(height, width).astype(np.uint8)
    return out


def export_heatmaps(out_dir, pool_seq, height, width):
    """Write caps_{k}_{frame}.png plus per-frame CSVs of the raw weights.

    pool_seq is [T, K, N] for one sequence. Each frame t produces K PNG
    files and one caps_weights_{t}.csv with rows (capsule, location, weight).
    Returns the list of written paths.
    """
    pool_seq = np.asarray(pool_seq, dtype=np.float64)
    if pool_seq.ndim != 3:
        raise ShapeError(f"expected [T, K, N] pooling weights, got {pool_seq.shape}")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    t_len, k, n = pool_seq.shape
    for t in range(t_len):
        images = capsule_heatmaps(pool_seq[t], height, width)
        for ki in range(k):
            path = os.path.join(out_dir, f"caps_{ki}_{t}.png")
            Image.fromarray(images[ki], mode="L").save(path)
            written.append(path)
        csv_path = os.path.join(out_dir, f"caps_weights_{t}.csv")
        with open(csv_path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["capsule", "location", "weight"])
            for ki in range(k):
                for ni in range(n):
                    wr.writerow([ki, ni, repr(float(pool_seq[t, ki, ni]))])
        written.append(csv_path)
    return written
