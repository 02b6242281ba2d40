"""Full gaze model: encoder -> capsules -> attention routing -> dual GRU decoders.

Decoder modes:
  * dual         two independently initialized GRU decoders read the same
                 routed capsule stream; their 2-D outputs are fused by a
                 learned 4->2 linear layer. Specialization (eye vs head
                 dynamics) emerges from the parameters, not from wiring.
  * single       one decoder, its head output used directly; no fusion.
  * dual_shared  both branches are literally the same parameter object, so
                 their outputs are exactly equal and fusion sees (y, y).

use_capsules / use_attention toggle those stages for ablations: without
capsules the N location embeddings pass through as tokens; without
attention the tokens skip routing entirely (no attention parameters exist).

split_capsules is an experimental wiring where decoder 1 reads the first
half of the tokens and decoder 2 the second half, probing region-specific
decoding instead of shared input.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import capsules as Cap
from . import encoder as E
from . import layers as L
from . import tensor as T
from .errors import CapsGazeError, ConfigError, ShapeError
from .tensor import Tensor

DECODER_MODES = ("dual", "single", "dual_shared")


@dataclass
class ModelConfig:
    num_capsules: int = 4
    num_heads: int = 4
    capsule_dim: int = 64
    hidden_dim: int = 128
    seq_len: int = 9
    decoder_mode: str = "dual"
    use_capsules: bool = True
    use_attention: bool = True
    image_size: int = 64
    encoder_channels: tuple = (16, 32, 64)
    frozen_encoder: bool = False
    dropout: float = 0.1
    attention_scale_mode: str = "per_head"
    split_capsules: bool = False

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        for name in ("num_capsules", "num_heads", "capsule_dim", "hidden_dim", "seq_len", "image_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.capsule_dim % self.num_heads != 0:
            raise ConfigError(f"capsule_dim {self.capsule_dim} not divisible by num_heads {self.num_heads}")
        if self.decoder_mode not in DECODER_MODES:
            raise ConfigError(f"decoder_mode must be one of {DECODER_MODES}, got {self.decoder_mode!r}")
        if self.image_size % 8 != 0:
            raise ConfigError(f"image_size must be divisible by 8, got {self.image_size}")
        if len(self.encoder_channels) != 3 or any(c < 1 for c in self.encoder_channels):
            raise ConfigError(f"encoder_channels needs 3 positive entries, got {self.encoder_channels}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.attention_scale_mode not in ("per_head", "model"):
            raise ConfigError(f"attention_scale_mode must be per_head or model, got {self.attention_scale_mode!r}")
        if self.split_capsules:
            if self.decoder_mode == "single":
                raise ConfigError("split_capsules needs two decoder branches")
            if self.num_tokens % 2 != 0:
                raise ConfigError(f"split_capsules needs an even token count, got {self.num_tokens}")

    @property
    def feature_hw(self):
        """Spatial side of the encoder output (three stride-2 halvings)."""
        return self.image_size // 8

    @property
    def num_locations(self):
        return self.feature_hw * self.feature_hw

    @property
    def num_tokens(self):
        """Tokens per frame entering the decoders: K capsules or N locations."""
        return self.num_capsules if self.use_capsules else self.num_locations

    @property
    def decoder_input_size(self):
        per_branch = self.num_tokens // 2 if self.split_capsules else self.num_tokens
        return per_branch * self.capsule_dim


@dataclass
class DecoderParams:
    gru: L.GRUParams
    head: L.LinearParams  # hidden -> 2


@dataclass
class FusionParams:
    lin: L.LinearParams  # 4 -> 2


@dataclass
class AttentionWeights:
    """Interpretability outputs: None for stages the config disables."""

    A: Optional[Tensor] = None  # [B, h, T*K, T*K] routing weights
    P: Optional[Tensor] = None  # [B, T, K, N] capsule pooling weights


@dataclass
class GazeParams:
    encoder: E.EncoderParams
    phi: L.LinearParams  # C -> D location projection, always present
    queries: Optional[Tensor]  # [K, D] when use_capsules
    attention: Optional[Cap.AttentionParams]
    dec1: DecoderParams
    dec2: Optional[DecoderParams]  # dec1 itself under dual_shared, None under single
    fusion: Optional[FusionParams]


def init_decoder(input_size, hidden_size, rng, dtype=np.float32):
    return DecoderParams(gru=L.init_gru(input_size, hidden_size, rng, dtype=dtype),
                         head=L.init_linear(hidden_size, 2, rng, dtype=dtype))


def init_model(cfg, rng, dtype=np.float32):
    """Build all parameters for a config.

    Each component draws from its own derived stream, so toggling one
    component does not shift the initialization of the others. That keeps
    ablation cells comparable: the shared components start identical.
    """
    enc = E.init_encoder(rng.derive(0), channels=cfg.encoder_channels, frozen=cfg.frozen_encoder, dtype=dtype)
    phi = L.init_linear(cfg.encoder_channels[-1], cfg.capsule_dim, rng.derive(1), dtype=dtype)
    queries = None
    if cfg.use_capsules:
        cp = Cap.init_capsules(cfg.encoder_channels[-1], cfg.num_capsules, cfg.capsule_dim, rng.derive(2), dtype=dtype)
        queries = cp.queries  # phi stays the derive(1) one for cross-config stability
    attention = None
    if cfg.use_attention:
        attention = Cap.init_attention(cfg.capsule_dim, cfg.num_heads, rng.derive(3),
                                       scale_mode=cfg.attention_scale_mode, dtype=dtype)
    dec1 = init_decoder(cfg.decoder_input_size, cfg.hidden_dim, rng.derive(4), dtype=dtype)
    if cfg.decoder_mode == "dual":
        dec2 = init_decoder(cfg.decoder_input_size, cfg.hidden_dim, rng.derive(5), dtype=dtype)
    elif cfg.decoder_mode == "dual_shared":
        dec2 = dec1
    else:
        dec2 = None
    fusion = None
    if cfg.decoder_mode != "single":
        fusion = FusionParams(lin=L.init_linear(4, 2, rng.derive(6), dtype=dtype))
    return GazeParams(encoder=enc, phi=phi, queries=queries, attention=attention,
                      dec1=dec1, dec2=dec2, fusion=fusion)


# --------------------------------------------------------------------------
# Forward pieces
# --------------------------------------------------------------------------


def decode(caps, p):
    """[B, T, K', D] capsules -> [B, 2] angles: flatten each timestep, run the
    GRU from zero state, project the final hidden state."""
    if caps.ndim != 4:
        raise ShapeError(f"decode expects [B, T, K, D], got {caps.shape}")
    b, t, k, d = caps.shape
    if k * d != p.gru.input_size:
        raise ShapeError(f"decode: {k}*{d} does not match GRU input size {p.gru.input_size}")
    h_t, _ = L.gru_sequence(caps.reshape((b, t, k * d)), p.gru)
    return L.linear(h_t, p.head)


def fuse(y1, y2, p):
    """Late fusion: linear on the concatenated branch outputs."""
    if y1.shape != y2.shape or y1.ndim != 2 or y1.shape[1] != 2:
        raise ShapeError(f"fuse expects two [B, 2] inputs, got {y1.shape} and {y2.shape}")
    return L.linear(T.concat([y1, y2], axis=1), p.lin)


@contextmanager
def _stage(name):
    """Re-raise module errors with the pipeline stage labeled."""
    try:
        yield
    except CapsGazeError as e:
        if str(e).startswith("["):
            raise
        raise type(e)(f"[{name}] {e}") from e


def model_forward(frames, params, cfg, training=False, rng=None):
    """Frames [B, T, 3, S, S] -> (predictions [B, 2], AttentionWeights).

    Eval mode (training=False) is deterministic; training mode needs an rng
    when dropout is active. Errors from sub-stages carry a stage label.
    """
    if frames.ndim != 5:
        raise ShapeError(f"model_forward expects [B, T, 3, S, S], got {frames.shape}")
    b, t, c, s1, s2 = frames.shape
    if t != cfg.seq_len:
        raise ShapeError(f"sequence length {t} does not match config seq_len {cfg.seq_len}")
    if (c, s1, s2) != (3, cfg.image_size, cfg.image_size):
        raise ShapeError(f"frames are {(c, s1, s2)}, config wants (3, {cfg.image_size}, {cfg.image_size})")

    with _stage("encoder"):
        flat = frames.reshape((b * t, c, s1, s2))
        fm = E.encode(flat, params.encoder, training)

    with _stage("capsules"):
        if cfg.use_capsules:
            cp = Cap.CapsuleParams(phi=params.phi, queries=params.queries)
            tokens, pool = Cap.form_capsules(fm, cp, seq_len=t, dropout_rate=cfg.dropout,
                                             training=training, rng=rng)
        else:
            locs = Cap.project_locations(fm, params.phi)  # [B*T, N, D]
            n = locs.shape[1]
            tokens = L.dropout(locs, cfg.dropout, training, rng).reshape((b, t, n, cfg.capsule_dim))
            pool = None

    with _stage("attention"):
        if cfg.use_attention:
            tokens, attn = Cap.route(tokens, params.attention)
        else:
            attn = None

    with _stage("decoder"):
        if cfg.split_capsules:
            half = tokens.shape[2] // 2
            in1 = T.slice_axis(tokens, 2, 0, half)
            in2 = T.slice_axis(tokens, 2, half, tokens.shape[2])
        else:
            in1 = in2 = tokens
        y1 = decode(in1, params.dec1)
        if cfg.decoder_mode == "single":
            return y1, AttentionWeights(A=attn, P=pool)
        y2 = decode(in2, params.dec2)

    with _stage("fusion"):
        pred = fuse(y1, y2, params.fusion)
    return pred, AttentionWeights(A=attn, P=pool)


# --------------------------------------------------------------------------
# Parameter naming (optimizer + checkpoint order)
# --------------------------------------------------------------------------

_GRU_FIELDS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def _decoder_entries(prefix, dec):
    out = {}
    for f in _GRU_FIELDS:
        out[f"{prefix}.gru.{f}"] = getattr(dec.gru, f)
    out[f"{prefix}.head.weight"] = dec.head.weight
    out[f"{prefix}.head.bias"] = dec.head.bias
    return out


def named_parameters(params, cfg):
    """Stable name -> Tensor mapping of every parameter the config materializes.

    Frozen encoder tensors are included (checkpoints must carry them); the
    optimizer skips anything without requires_grad. dual_shared lists the
    shared decoder once, under dec1.
    """
    out = dict(E.encoder_param_dict(params.encoder))
    out["caps.phi.weight"] = params.phi.weight
    out["caps.phi.bias"] = params.phi.bias
    if params.queries is not None:
        out["caps.queries"] = params.queries
    if params.attention is not None:
        for nm in ("q", "k", "v", "out"):
            lin = getattr(params.attention, nm)
            out[f"attn.{nm}.weight"] = lin.weight
            out[f"attn.{nm}.bias"] = lin.bias
    out.update(_decoder_entries("dec1", params.dec1))
    if cfg.decoder_mode == "dual":
        out.update(_decoder_entries("dec2", params.dec2))
    if params.fusion is not None:
        out["fusion.weight"] = params.fusion.lin.weight
        out["fusion.bias"] = params.fusion.lin.bias
    return out


def named_buffers(params):
    """Non-parameter state that checkpoints must carry (batch norm stats)."""
    return E.encoder_buffer_dict(params.encoder)
