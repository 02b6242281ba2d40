"""Run configuration: file parsing, flag overrides, and the effective echo.

The format is deliberately flat: one `key = value` per line, keys carrying
their section as a dotted prefix (model., train., data., out.). Flags use
the same keys (--train.lr=1e-3) and always win over file values. The echo
of an effective configuration parses back to an equal RunConfig, so every
artifact directory records exactly what produced it.
"""

from __future__ import annotations

import dataclasses
import difflib
import re
from dataclasses import dataclass

from .data import SyntheticSpec
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: SyntheticSpec
    source: str = "synthetic"  # or "directory"
    data_dir: str | None = None
    out_dir: str | None = None


def _parse_bool(raw):
    low = raw.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int(raw):
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"not an integer: {raw!r}") from None


def _parse_float(raw):
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"not a number: {raw!r}") from None


def _parse_channels(raw):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError(f"expected comma-separated channel counts: {raw!r}")
    return tuple(_parse_int(p) for p in parts)


def _parse_opt_float(raw):
    return None if raw.lower() == "none" else _parse_float(raw)


def _parse_opt_str(raw):
    return None if raw.lower() == "none" else raw


_CASTERS = {
    bool: _parse_bool,
    int: _parse_int,
    float: _parse_float,
    str: lambda raw: raw,
}


def _keyspec():
    """Every recognized key mapped to (group, field, caster)."""
    spec = {}
    for group, cls in (("model", ModelConfig), ("train", TrainConfig), ("data", SyntheticSpec)):
        for f in dataclasses.fields(cls):
            if f.name == "encoder_channels":
                caster = _parse_channels
            elif f.name == "grad_clip":
                caster = _parse_opt_float
            else:
                caster = _CASTERS.get(f.type if isinstance(f.type, type) else type(f.default))
                if caster is None:
                    caster = _CASTERS[type(f.default)]
            spec[f"{group}.{f.name}"] = (group, f.name, caster)
    spec["data.source"] = ("run", "source", lambda raw: raw)
    spec["data.dir"] = ("run", "data_dir", _parse_opt_str)
    spec["out.dir"] = ("run", "out_dir", _parse_opt_str)
    return spec


_KEYSPEC = _keyspec()
_FLAG_RE = re.compile(r"^--([A-Za-z_][\w.]*)=(.*)$", re.S)


def _suggest(key):
    matches = difflib.get_close_matches(key, _KEYSPEC.keys(), n=1, cutoff=0.4)
    return matches[0] if matches else None


def _apply(overrides, key, raw, where):
    if key not in _KEYSPEC:
        hint = _suggest(key)
        msg = f"{where}: unknown key {key!r}"
        if hint:
            msg += f"; did you mean {hint!r}?"
        raise ConfigError(msg)
    group, field, caster = _KEYSPEC[key]
    try:
        value = caster(raw)
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for {key!r}: {e}") from None
    overrides[(group, field)] = value


def read_config_file(path):
    """Ordered (key, raw_value, where) triples from a config file."""
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    triples = []
    for ln, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', got {stripped!r}")
        key, raw = stripped.split("=", 1)
        triples.append((key.strip(), raw.strip(), f"{path}:{ln}"))
    return triples


def parse_config(path=None, flags=()):
    """Assemble a RunConfig from an optional file plus override flags.

    Flags look like --train.lr=1e-3 and take precedence over the file.
    Unknown keys fail with the nearest valid key named. data.seq_len and
    data.image_size follow the model unless set explicitly.
    """
    overrides = {}
    explicit = set()
    if path is not None:
        for key, raw, where in read_config_file(path):
            _apply(overrides, key, raw, where)
            explicit.add(key)
    for flag in flags:
        m = _FLAG_RE.match(flag)
        if not m:
            raise ConfigError(f"flag {flag!r} is not of the form --section.key=value")
        _apply(overrides, m.group(1), m.group(2), f"flag --{m.group(1)}")
        explicit.add(m.group(1))

    def build(cls, group):
        kwargs = {f: v for (g, f), v in overrides.items() if g == group}
        return cls(**kwargs)

    model = build(ModelConfig, "model")
    train = build(TrainConfig, "train")
    data_kwargs = {f: v for (g, f), v in overrides.items() if g == "data"}
    if "data.seq_len" not in explicit:
        data_kwargs["seq_len"] = model.seq_len
    if "data.image_size" not in explicit:
        data_kwargs["image_size"] = model.image_size
    data = SyntheticSpec(**data_kwargs)

    run_kwargs = {f: v for (g, f), v in overrides.items() if g == "run"}
    rc = RunConfig(model=model, train=train, data=data, **run_kwargs)
    if rc.source not in ("synthetic", "directory"):
        raise ConfigError(f"data.source must be 'synthetic' or 'directory', got {rc.source!r}")
    if rc.source == "directory" and rc.data_dir is None:
        raise ConfigError("missing required key data.dir (data.source = directory)")
    return rc


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def echo_config(rc):
    """Effective configuration as text that parse_config reproduces exactly."""
    lines = ["# effective configuration"]
    for group, obj in (("model", rc.model), ("train", rc.train), ("data", rc.data)):
        for f in dataclasses.fields(obj):
            lines.append(f"{group}.{f.name} = {_fmt(getattr(obj, f.name))}")
    lines.append(f"data.source = {rc.source}")
    lines.append(f"data.dir = {_fmt(rc.data_dir)}")
    lines.append(f"out.dir = {_fmt(rc.out_dir)}")
    return "\n".join(lines) + "\n"


def default_run_config(**flag_overrides):
    flags = [f"--{k}={v}" for k, v in flag_overrides.items()]
    return parse_config(flags=flags)
