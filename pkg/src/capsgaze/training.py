"""Optimizer, schedule, checkpointing, and the training loop.

Determinism is the organizing principle: every stochastic choice in an
epoch (shuffle order, dropout masks) comes from a stream derived from
(seed, epoch), so a run resumed from a checkpoint replays exactly the run
that was never interrupted.
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import frames_array, labels_array
from .errors import ConfigError, FormatError, MissingFileError, NumericError, ShapeError
from .metrics import angular_error_batch
from .model import init_model, model_forward, named_buffers, named_parameters
from .tensor import RandomSource, Tensor

_CKPT_MAGIC = b"CSTR"
_CKPT_VERSION = 1


def mse_loss(pred, target):
    """Mean squared error over every coordinate of the batch."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def cosine_lr(t, t_max, lr_max, lr_min=0.0):
    """Cosine anneal from lr_max at t=0 to lr_min at t=t_max."""
    if t_max < 1:
        raise ConfigError(f"t_max must be >= 1, got {t_max}")
    if not (0 <= t <= t_max):
        raise ConfigError(f"schedule step {t} outside [0, {t_max}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / t_max))


def init_adam_state(params):
    """Fresh first/second moment buffers for every trainable parameter."""
    state = {"t": 0, "m": {}, "v": {}}
    for name, p in params.items():
        if p.requires_grad:
            state["m"][name] = np.zeros_like(p.data)
            state["v"][name] = np.zeros_like(p.data)
    return state


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, grad_clip=None):
    """One Adam update in place; L2 is coupled (decay added to the gradient).

    Parameters without gradients (frozen or unused this step) are skipped.
    Returns the global gradient norm seen before any clipping.
    """
    state["t"] += 1
    t = state["t"]
    sq = 0.0
    grads = {}
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad.astype(np.float64)
        if weight_decay:
            g = g + weight_decay * p.data.astype(np.float64)
        grads[name] = g
        sq += float((g * g).sum())
    gnorm = math.sqrt(sq)
    scale = 1.0
    if grad_clip is not None and gnorm > grad_clip > 0:
        scale = grad_clip / gnorm
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if scale != 1.0:
            g = g * scale
        m = state["m"][name].astype(np.float64)
        v = state["v"][name].astype(np.float64)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state["m"][name] = m.astype(p.data.dtype)
        state["v"][name] = v.astype(p.data.dtype)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = (p.data.astype(np.float64) - step).astype(p.data.dtype)
    return gnorm


@dataclass
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-5
    epochs: int = 30
    batch_train: int = 32
    batch_val: int = 16
    seed: int = 0
    grad_clip: float | None = None
    eval_every: int = 1
    lr_min: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError(f"lr must be > 0 and weight_decay >= 0: {self.lr}, {self.weight_decay}")
        if self.epochs < 1 or self.batch_train < 1 or self.batch_val < 1:
            raise ConfigError("epochs and batch sizes must be >= 1")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")


def _batches(n, batch_size, order=None):
    idx = np.arange(n) if order is None else np.asarray(order)
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def evaluate(params, cfg, val_x, val_y, batch_size=16):
    """Mean angular error in degrees over a validation array pair."""
    errs = []
    for sel in _batches(val_x.shape[0], batch_size):
        pred, _ = model_forward(Tensor(val_x[sel]), params, cfg, training=False)
        errs.append(angular_error_batch(pred.data, val_y[sel]))
    return float(np.mean(np.concatenate(errs)))


@dataclass
class TrainResult:
    params: object
    history: list = field(default_factory=list)  # (epoch, step, lr, train_mse, val_err_deg)
    final_val_err: float = math.nan


def _epoch_rng(seed, epoch):
    return RandomSource(seed).derive(epoch)


def train(model_cfg, train_cfg, train_samples, val_samples, params=None, adam_state=None,
          start_epoch=0, stop_epoch=None, log_path=None, progress=None):
    """Run (or resume) the optimization loop.

    Samples may be SequenceSample lists or prebuilt (frames, labels) array
    pairs. Epoch randomness derives from (seed, epoch), so training epochs
    [0, k) then [k, n) from a checkpoint reproduces an uninterrupted run
    bit for bit. A NaN or infinite loss aborts with NumericError carrying
    the batch index, learning rate, and last gradient norm. Returns
    TrainResult with history rows (epoch, step, lr, train_mse,
    val_err_deg); val error is NaN on epochs that skip evaluation.
    """
    if isinstance(train_samples, tuple):
        train_x, train_y = train_samples
    else:
        train_x, train_y = frames_array(train_samples), labels_array(train_samples)
    if isinstance(val_samples, tuple):
        val_x, val_y = val_samples
    else:
        val_x, val_y = frames_array(val_samples), labels_array(val_samples)

    if params is None:
        params = init_model(model_cfg, RandomSource(train_cfg.seed))
    named = named_parameters(params, model_cfg)
    if adam_state is None:
        adam_state = init_adam_state(named)

    history = []
    log_file = None
    log_writer = None
    if log_path is not None:
        fresh = start_epoch == 0 or not os.path.exists(log_path)
        log_file = open(log_path, "w" if fresh else "a", newline="")
        log_writer = csv.writer(log_file)
        if fresh:
            log_writer.writerow(["epoch", "step", "lr", "train_mse", "val_err_deg"])

    n = train_x.shape[0]
    stop = train_cfg.epochs if stop_epoch is None else min(stop_epoch, train_cfg.epochs)
    step = start_epoch * math.ceil(n / train_cfg.batch_train)
    last_gnorm = 0.0
    try:
        for epoch in range(start_epoch, stop):
            lr = cosine_lr(epoch, train_cfg.epochs, train_cfg.lr, train_cfg.lr_min)
            rng = _epoch_rng(train_cfg.seed, epoch)
            order = rng.shuffle_indices(n)
            drop_rng = rng.derive(0)
            losses = []
            for batch_i, sel in enumerate(_batches(n, train_cfg.batch_train, order)):
                pred, _ = model_forward(Tensor(train_x[sel]), params, model_cfg,
                                        training=True, rng=drop_rng)
                loss = mse_loss(pred, Tensor(train_y[sel]))
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(
                        f"non-finite loss {value} at epoch {epoch} batch {batch_i} "
                        f"(lr {lr:.3e}, last grad norm {last_gnorm:.3e})")
                loss.backward()
                last_gnorm = adam_step(named, adam_state, lr,
                                       weight_decay=train_cfg.weight_decay,
                                       grad_clip=train_cfg.grad_clip)
                for p in named.values():
                    p.grad = None
                losses.append(value)
                step += 1
            train_mse = float(np.mean(losses))
            if (epoch + 1) % train_cfg.eval_every == 0 or epoch == stop - 1:
                val_err = evaluate(params, model_cfg, val_x, val_y, train_cfg.batch_val)
            else:
                val_err = math.nan
            row = (epoch, step, lr, train_mse, val_err)
            history.append(row)
            if log_writer is not None:
                log_writer.writerow([epoch, step, repr(lr), repr(train_mse), repr(val_err)])
                log_file.flush()
            if progress is not None:
                progress(*row)
    finally:
        if log_file is not None:
            log_file.close()

    final = next((h[4] for h in reversed(history) if not math.isnan(h[4])), math.nan)
    return TrainResult(params=params, history=history, final_val_err=final)


# --------------------------------------------------------------------------
# Checkpoint format: magic, version, config echo, named f32 tensors
# --------------------------------------------------------------------------


def _write_entry(f, name, arr):
    blob = name.encode("utf-8")
    f.write(struct.pack("<I", len(blob)))
    f.write(blob)
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
    f.write(arr.tobytes())


def _read_exact(f, size, what):
    blob = f.read(size)
    if len(blob) != size:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return blob


def _read_entry(f):
    nlen = struct.unpack("<I", _read_exact(f, 4, "name length"))[0]
    name = _read_exact(f, nlen, "entry name").decode("utf-8")
    rank = struct.unpack("<I", _read_exact(f, 4, f"rank of {name}"))[0]
    if rank > 8:
        raise FormatError(f"implausible rank {rank} for {name}")
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"dims of {name}")) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = _read_exact(f, 4 * count, f"payload of {name}")
    return name, np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def config_echo(model_cfg, train_cfg=None):
    lines = [f"model.{k}={v!r}" for k, v in sorted(vars(model_cfg).items())]
    if train_cfg is not None:
        lines += [f"train.{k}={v!r}" for k, v in sorted(vars(train_cfg).items())]
    return "\n".join(lines)


def save_checkpoint(path, params, model_cfg, train_cfg=None, adam_state=None,
                    epoch=0, extra=None):
    """Serialize parameters (and optionally optimizer state) to one file."""
    named = named_parameters(params, model_cfg)
    entries = [(name, p.data) for name, p in named.items()]
    entries += [(name, arr) for name, arr in named_buffers(params).items()]
    if adam_state is not None:
        entries += [(f"adam.m.{n}", a) for n, a in sorted(adam_state["m"].items())]
        entries += [(f"adam.v.{n}", a) for n, a in sorted(adam_state["v"].items())]
        entries.append(("meta.adam_t", np.array([adam_state["t"]], dtype=np.float32)))
    entries.append(("meta.epoch", np.array([epoch], dtype=np.float32)))
    if extra:
        entries += [(f"meta.{k}", np.asarray(v, dtype=np.float32)) for k, v in sorted(extra.items())]

    echo = config_echo(model_cfg, train_cfg).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<I", _CKPT_VERSION))
    buf.write(struct.pack("<I", len(echo)))
    buf.write(echo)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        _write_entry(buf, name, arr)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_checkpoint(path):
    """Raw checkpoint contents: (config_echo_str, {name: array})."""
    if not os.path.isfile(path):
        raise MissingFileError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != _CKPT_MAGIC:
            raise FormatError(f"not a checkpoint file (magic {magic!r})")
        version = struct.unpack("<I", _read_exact(f, 4, "version"))[0]
        if version != _CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}, expected {_CKPT_VERSION}")
        elen = struct.unpack("<I", _read_exact(f, 4, "config length"))[0]
        echo = _read_exact(f, elen, "config echo").decode("utf-8")
        count = struct.unpack("<I", _read_exact(f, 4, "entry count"))[0]
        entries = {}
        for _ in range(count):
            name, arr = _read_entry(f)
            if name in entries:
                raise FormatError(f"duplicate checkpoint entry {name}")
            entries[name] = arr
        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after final checkpoint entry")
    return echo, entries


def load_checkpoint(path, model_cfg, params=None):
    """Restore parameters (and optimizer state when present) from a file.

    Every tensor of the model must be present with its exact shape; a
    mismatch raises ShapeError naming the offending tensor. Returns
    (params, adam_state_or_None, epoch, extra_meta).
    """
    echo, entries = read_checkpoint(path)
    if params is None:
        params = init_model(model_cfg, RandomSource(0))
    named = named_parameters(params, model_cfg)
    buffers = named_buffers(params)

    for name, p in named.items():
        if name not in entries:
            raise FormatError(f"checkpoint is missing tensor {name}")
        arr = entries[name]
        if arr.shape != p.data.shape:
            raise ShapeError(f"checkpoint tensor {name} has shape {arr.shape}, model expects {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    for name, buf in buffers.items():
        if name not in entries:
            raise FormatError(f"checkpoint is missing buffer {name}")
        arr = entries[name]
        if arr.shape != buf.shape:
            raise ShapeError(f"checkpoint buffer {name} has shape {arr.shape}, model expects {buf.shape}")
        buf[...] = arr

    adam_state = None
    m_names = {k[len("adam.m."):] for k in entries if k.startswith("adam.m.")}
    if m_names:
        adam_state = {"t": int(entries["meta.adam_t"][0]), "m": {}, "v": {}}
        for name in m_names:
            if name not in named:
                raise FormatError(f"optimizer state for unknown tensor {name}")
            adam_state["m"][name] = entries[f"adam.m.{name}"].astype(named[name].data.dtype)
            adam_state["v"][name] = entries[f"adam.v.{name}"].astype(named[name].data.dtype)
    epoch = int(entries["meta.epoch"][0]) if "meta.epoch" in entries else 0
    extra = {k[len("meta."):]: v for k, v in entries.items()
             if k.startswith("meta.") and k not in ("meta.epoch", "meta.adam_t")}
    return params, adam_state, epoch, extra
