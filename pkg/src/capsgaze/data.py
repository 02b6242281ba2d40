"""Procedural synthetic gaze sequences plus a directory dataset loader.

Each frame is a schematic face rendered into separate channels so the label
is analytically recoverable from pixels alone:

    R: face disk, center shifted by head pitch/yaw
    G: two eye disks, fixed offsets within the face
    B: pupil disks, offset inside each eye proportionally to eye pitch/yaw

Disks are anti-aliased (coverage = clamp(r + 0.5 - dist, 0, 1)) and pixel
centers sit at (j + 0.5, i + 0.5), which makes a centered face exactly
mirror-symmetric on even image sizes.

Dynamics follow the two-timescale premise the model targets: the head
sweeps a slow sinusoid while the eyes hold fixation and occasionally jump
(saccades). The label is head + eye gaze at the final frame.

Ambiguity mode makes single frames provably left/right ambiguous: head yaw
is pinned to zero and eye yaw is rendered as symmetric vergence (both
pupils move outward by |yaw|), so a lone frame is identical for +yaw and
-yaw. The sign is encoded only in the vergence profile over time (positive
yaw ramps up, negative holds steady), so sequence models can recover it and
single-frame models cannot.
"""

from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, LabelCountError, LabelParseError, MissingFileError
from .metrics import GazeAngles
from .tensor import RandomSource

# face geometry as fractions of the image side
_FACE_R = 0.38
_HEAD_SHIFT = 0.15  # pixels of face-center shift per radian of head angle
_EYE_DX = 0.16
_EYE_DY = -0.10  # eyes above face center (image rows grow downward)
_EYE_R = 0.09
_PUPIL_R = 0.035


@dataclass
class SyntheticSpec:
    count: int = 16
    seq_len: int = 9
    image_size: int = 64
    head_amp: float = 0.35  # radians, slow sinusoid
    head_freq: float = 0.02  # cycles per frame
    saccade_prob: float = 0.15
    saccade_amp: float = 0.25  # radians, eye jump bound
    noise: float = 0.02  # pixel noise sigma
    seed: int = 0
    ambiguity: bool = False

    def __post_init__(self):
        if self.count < 1 or self.seq_len < 1:
            raise ConfigError(f"count and seq_len must be >= 1, got {self.count}, {self.seq_len}")
        if self.image_size < 16 or self.image_size % 8 != 0:
            raise ConfigError(f"image_size must be >= 16 and divisible by 8, got {self.image_size}")
        if not (0.0 <= self.saccade_prob <= 1.0):
            raise ConfigError(f"saccade_prob must be in [0, 1], got {self.saccade_prob}")
        if self.head_amp < 0 or self.saccade_amp < 0 or self.noise < 0:
            raise ConfigError("amplitudes and noise must be nonnegative")
        if self.head_amp + self.saccade_amp > math.pi / 3:
            raise ConfigError(
                f"head_amp + saccade_amp = {self.head_amp + self.saccade_amp:.3f} exceeds pi/3; pupils would leave the frame")


@dataclass
class SequenceSample:
    seq_id: str
    frames: np.ndarray  # [T, 3, S, S] float32 in [0, 1]
    label: GazeAngles  # gaze at the final frame


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------


def _paint_disk(channel, dx, dy, r):
    """Max-blend an anti-aliased disk; dx/dy are per-pixel offsets from its center."""
    cov = np.clip(r + 0.5 - np.sqrt(dx * dx + dy * dy), 0.0, 1.0)
    np.maximum(channel, cov, out=channel)


def _pupil_scale(spec):
    """Pixels of pupil offset per radian of eye angle.

    Chosen so eye yaw = +saccade_amp puts the pupil exactly at the right
    edge of the eye disk (touching from inside).
    """
    travel = (_EYE_R - _PUPIL_R) * spec.image_size
    return travel / spec.saccade_amp if spec.saccade_amp > 0 else 0.0


def render_frame(head, eye, spec, noise_rng=None, vergence=False):
    """One [3, S, S] float32 frame for the given head and eye angles.

    With vergence=True (ambiguity mode) the pupils move symmetrically
    outward by |eye.yaw| instead of sideways together, so the rendered
    frame is independent of the yaw sign.
    """
    bound_h = spec.head_amp + 1e-9
    bound_e = spec.saccade_amp + 1e-9
    if abs(head.pitch) > bound_h or abs(head.yaw) > bound_h:
        raise DataError(f"head angles {(head.pitch, head.yaw)} exceed head_amp {spec.head_amp}")
    if abs(eye.pitch) > bound_e or abs(eye.yaw) > bound_e:
        raise DataError(f"eye angles {(eye.pitch, eye.yaw)} exceed saccade_amp {spec.saccade_amp}")

    s = spec.image_size
    img = np.zeros((3, s, s), dtype=np.float64)
    shift = _HEAD_SHIFT * s
    ii, jj = np.meshgrid(np.arange(s) + 0.5, np.arange(s) + 0.5, indexing="ij")
    # offsets are nested (pixel -> face -> eye -> pupil) rather than taken
    # from absolute centers, so a centered face mirrors bit-exactly
    fx = jj - (s / 2 + shift * head.yaw)
    fy = ii - (s / 2 - shift * head.pitch)  # positive pitch looks up
    _paint_disk(img[0], fx, fy, _FACE_R * s)

    pscale = _pupil_scale(spec)
    for side in (-1.0, 1.0):
        ex = fx - side * (_EYE_DX * s)
        ey = fy - _EYE_DY * s
        _paint_disk(img[1], ex, ey, _EYE_R * s)
        if vergence:
            dx = side * (abs(eye.yaw) * pscale)  # outward, sign-blind
        else:
            dx = eye.yaw * pscale
        dy = -eye.pitch * pscale
        _paint_disk(img[2], ex - dx, ey - dy, _PUPIL_R * s)

    if noise_rng is not None and spec.noise > 0:
        img += spec.noise * noise_rng.normal(img.shape)
        np.clip(img, 0.0, 1.0, out=img)
    return img.astype(np.float32)


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------


def head_trajectory(rng, spec):
    """Slow sinusoidal head motion: (pitch[T], yaw[T]).

    Amplitude jitters in U(0.5, 1) x head_amp and each axis gets a random
    phase, so sequences differ while staying inside bounds.
    """
    t = np.arange(spec.seq_len)
    phase = rng.uniform(2, 0.0, 2.0 * math.pi)
    amp = rng.uniform(2, 0.5, 1.0) * spec.head_amp
    pitch = amp[0] * np.sin(2 * math.pi * spec.head_freq * t + phase[0])
    yaw = amp[1] * np.sin(2 * math.pi * spec.head_freq * t + phase[1])
    return pitch, yaw


def eye_trajectory(rng, spec):
    """Piecewise-constant fixations with saccadic jumps: (pitch[T], yaw[T])."""
    pitch = np.zeros(spec.seq_len)
    yaw = np.zeros(spec.seq_len)
    cur_p, cur_y = 0.0, 0.0
    for t in range(1, spec.seq_len):
        if float(rng.uniform()) < spec.saccade_prob:
            cur_p = float(rng.uniform(None, -spec.saccade_amp, spec.saccade_amp))
            cur_y = float(rng.uniform(None, -spec.saccade_amp, spec.saccade_amp))
        pitch[t], yaw[t] = cur_p, cur_y
    return pitch, yaw


def _ambiguity_trajectory(rng, spec, force_sign=None):
    """Eye yaw magnitude profile for ambiguity mode.

    Positive-sign sequences ramp vergence linearly from 0 to a; negative
    ones hold it at a. Both end at the same magnitude, so the final frame
    never reveals the sign.
    """
    t_len = spec.seq_len
    sign = force_sign if force_sign is not None else (1.0 if float(rng.uniform()) < 0.5 else -1.0)
    # consume the draw either way so force_sign does not shift the stream
    if force_sign is not None:
        rng.uniform()
    a = float(rng.uniform(None, 0.3, 1.0)) * spec.saccade_amp
    if t_len == 1 or sign < 0:
        mag = np.full(t_len, a)
    else:
        mag = a * np.arange(t_len) / (t_len - 1)
    return sign, mag


def _make_sample(index, spec, force_sign=None):
    base = RandomSource(spec.seed)
    sample_rng = base.derive(index)
    traj_rng = sample_rng.derive(0)
    noise_rng = sample_rng.derive(1) if spec.noise > 0 else None

    s_id = f"seq_{index:05d}"
    frames = np.empty((spec.seq_len, 3, spec.image_size, spec.image_size), dtype=np.float32)

    if spec.ambiguity:
        hp, _ = head_trajectory(traj_rng, spec)
        hy = np.zeros(spec.seq_len)  # yaw information must come from the eyes
        sign, mag = _ambiguity_trajectory(traj_rng, spec, force_sign)
        ep = np.zeros(spec.seq_len)
        ey = sign * mag
        for t in range(spec.seq_len):
            frames[t] = render_frame(GazeAngles(hp[t], hy[t]), GazeAngles(ep[t], ey[t]),
                                     spec, noise_rng, vergence=True)
    else:
        hp, hy = head_trajectory(traj_rng, spec)
        ep, ey = eye_trajectory(traj_rng, spec)
        for t in range(spec.seq_len):
            frames[t] = render_frame(GazeAngles(hp[t], hy[t]), GazeAngles(ep[t], ey[t]),
                                     spec, noise_rng)

    bound = spec.head_amp + spec.saccade_amp
    label = GazeAngles(
        pitch=float(np.clip(hp[-1] + ep[-1], -bound, bound)),
        yaw=float(np.clip(hy[-1] + ey[-1], -bound, bound)),
    )
    return SequenceSample(seq_id=s_id, frames=frames, label=label)


def generate(spec):
    """Materialize spec.count seeded sequences.

    Sample i depends only on (spec, i) via a derived stream, so generation
    order (or parallelism) can never change the output.
    """
    return [_make_sample(i, spec) for i in range(spec.count)]


def mirror_pair(index, spec):
    """Both sign variants of an ambiguity-mode sample (for the ill-posedness check)."""
    if not spec.ambiguity:
        raise ConfigError("mirror_pair is only defined in ambiguity mode")
    return _make_sample(index, spec, force_sign=1.0), _make_sample(index, spec, force_sign=-1.0)


# --------------------------------------------------------------------------
# Analytic label decoder (closes the render loop)
# --------------------------------------------------------------------------


def _centroid(channel):
    total = channel.sum()
    if total <= 0:
        raise DataError("empty channel, cannot locate centroid")
    ii, jj = np.meshgrid(np.arange(channel.shape[0]) + 0.5, np.arange(channel.shape[1]) + 0.5, indexing="ij")
    return float((jj * channel).sum() / total), float((ii * channel).sum() / total)


def decode_render(frame, spec):
    """Recover (head+eye) gaze angles from a noise-free rendered frame.

    Inverts the renderer: face centroid gives the head angles, pupil
    centroids relative to the eye centers give the eye angles. Used to
    prove the images actually encode the labels.
    """
    frame = np.asarray(frame, dtype=np.float64)
    s = spec.image_size
    shift = _HEAD_SHIFT * s
    face_cx, face_cy = _centroid(frame[0])
    head_yaw = (face_cx - s / 2) / shift
    head_pitch = (s / 2 - face_cy) / shift

    pscale = _pupil_scale(spec)
    pupils = frame[2]
    cols = np.arange(s) + 0.5
    left = pupils * (cols[None, :] < face_cx)
    right = pupils * (cols[None, :] >= face_cx)
    dxs, dys = [], []
    for side, mask in ((-1.0, left), (1.0, right)):
        px, py = _centroid(mask)
        dxs.append(px - (face_cx + side * _EYE_DX * s))
        dys.append(py - (face_cy + _EYE_DY * s))
    eye_yaw = float(np.mean(dxs)) / pscale if pscale > 0 else 0.0
    eye_pitch = -float(np.mean(dys)) / pscale if pscale > 0 else 0.0
    return GazeAngles(pitch=head_pitch + eye_pitch, yaw=head_yaw + eye_yaw)


# --------------------------------------------------------------------------
# Disk layout: root/sequences/<seq_id>/frame_{ttt}.png + root/labels.csv
# --------------------------------------------------------------------------


def save_dataset(root, samples):
    seq_dir = os.path.join(root, "sequences")
    os.makedirs(seq_dir, exist_ok=True)
    for s in samples:
        d = os.path.join(seq_dir, s.seq_id)
        os.makedirs(d, exist_ok=True)
        for t in range(s.frames.shape[0]):
            arr = np.round(s.frames[t] * 255.0).astype(np.uint8)
            Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB").save(
                os.path.join(d, f"frame_{t:03d}.png"))
    with open(os.path.join(root, "labels.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seq_id", "pitch_rad", "yaw_rad"])
        for s in samples:
            w.writerow([s.seq_id, repr(s.label.pitch), repr(s.label.yaw)])


_FRAME_RE = re.compile(r"frame_(\d{3,})\.png$")


def load_directory(root):
    """Read a dataset directory back into SequenceSamples.

    Errors are specific: a missing file (labels.csv or any referenced
    frame) raises MissingFileError naming the path; a malformed label row
    raises LabelParseError with its line number; sequences and label rows
    not matching one-to-one raises LabelCountError.
    """
    labels_path = os.path.join(root, "labels.csv")
    if not os.path.isfile(labels_path):
        raise MissingFileError(f"missing labels file: {labels_path}")
    labels = {}
    with open(labels_path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["seq_id", "pitch_rad", "yaw_rad"]:
        raise LabelParseError(f"{labels_path}:1: expected header seq_id,pitch_rad,yaw_rad")
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise LabelParseError(f"{labels_path}:{ln}: expected 3 fields, got {len(row)}")
        seq_id, p_s, y_s = row
        try:
            pitch, yaw = float(p_s), float(y_s)
        except ValueError:
            raise LabelParseError(f"{labels_path}:{ln}: non-numeric label for {seq_id!r}") from None
        if not (math.isfinite(pitch) and math.isfinite(yaw)):
            raise LabelParseError(f"{labels_path}:{ln}: non-finite label for {seq_id!r}")
        if seq_id in labels:
            raise LabelParseError(f"{labels_path}:{ln}: duplicate seq_id {seq_id!r}")
        labels[seq_id] = GazeAngles(pitch, yaw)

    seq_root = os.path.join(root, "sequences")
    dirs = sorted(d for d in (os.listdir(seq_root) if os.path.isdir(seq_root) else [])
                  if os.path.isdir(os.path.join(seq_root, d)))
    if set(dirs) != set(labels):
        missing = sorted(set(labels) - set(dirs))
        extra = sorted(set(dirs) - set(labels))
        raise LabelCountError(
            f"{root}: {len(labels)} label rows vs {len(dirs)} sequence dirs"
            + (f"; unlabeled dirs {extra[:3]}" if extra else "")
            + (f"; missing dirs for {missing[:3]}" if missing else ""))

    samples = []
    seq_len = None
    for seq_id in dirs:
        d = os.path.join(seq_root, seq_id)
        names = sorted(n for n in os.listdir(d) if _FRAME_RE.match(n))
        if not names:
            raise MissingFileError(f"no frame files in {d}")
        # a gap below the highest index means a file is missing; a dir that
        # is internally complete but a different length is a count mismatch
        top = max(int(_FRAME_RE.match(n).group(1)) for n in names)
        expected = [f"frame_{t:03d}.png" for t in range(top + 1)]
        for want in expected:
            if want not in names:
                raise MissingFileError(f"missing frame file: {os.path.join(d, want)}")
        if seq_len is None:
            seq_len = top + 1
        elif top + 1 != seq_len:
            raise LabelCountError(f"{d}: {top + 1} frames, dataset uses {seq_len}")
        decoded = []
        for want in expected:
            with Image.open(os.path.join(d, want)) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            decoded.append(np.transpose(arr, (2, 0, 1)))
        frames = np.stack(decoded)
        samples.append(SequenceSample(seq_id=seq_id, frames=frames, label=labels[seq_id]))
    return samples


# --------------------------------------------------------------------------
# Split and batching helpers
# --------------------------------------------------------------------------


def split(samples, fraction, seed):
    """Seeded shuffle, then partition into (train, val); train gets `fraction`."""
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    n = len(samples)
    n_train = int(math.floor(fraction * n + 0.5))
    if n_train < 1 or n_train >= n:
        raise DataError(f"split of {n} samples at {fraction} leaves an empty side")
    order = RandomSource(seed).shuffle_indices(n)
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:]]
    return train, val


def frames_array(samples):
    """Stack samples to a [B, T, 3, S, S] float32 batch array."""
    return np.stack([s.frames for s in samples])


def labels_array(samples):
    """[B, 2] float32 (pitch, yaw) labels."""
    return np.array([[s.label.pitch, s.label.yaw] for s in samples], dtype=np.float32)
