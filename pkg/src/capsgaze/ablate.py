"""Ablation harness: train grids of config variants and report medians.

Every grid shares one dataset and one list of training seeds, so cells
differ only in the axis under study. Per-(cell, seed) outcomes are written
as JSON the moment they finish, which makes an interrupted grid resumable
and keeps raw results recomputable into any report.

Built-in grids:
    heads_caps  attention heads x capsule count, {4, 8} each
    dims        capsule dim / GRU hidden dim pairs from 64 to 256
    components  capsule formation x attention routing on/off
    decoder     dual vs single vs weight-shared dual decoders
    seqlen      T=9 vs T=1 on ambiguity-mode data
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import data as D
from .config import echo_config, parse_config, read_config_file
from .errors import CapsGazeError, ConfigError
from .metrics import count_flops, count_params, measure_latency
from .model import init_model, named_parameters
from .tensor import RandomSource
from .training import TrainConfig, init_adam_state, train

GRID_NAMES = ("heads_caps", "dims", "components", "decoder", "seqlen")

REPORT_COLUMNS = "cell,seed,err_deg,params,flops,latency_ms"

# Desk-scale benchmark the grids run on unless the caller overrides it:
# small images and dims keep a full grid within CPU budgets while leaving
# every architectural contrast intact.
_BASE = {
    "model.num_capsules": "4",
    "model.num_heads": "4",
    "model.capsule_dim": "32",
    "model.hidden_dim": "64",
    "model.seq_len": "9",
    "model.image_size": "32",
    "model.encoder_channels": "8,16,32",
    "model.dropout": "0.1",
    "train.lr": "2e-3",
    "train.weight_decay": "1e-5",
    "train.epochs": "8",
    "train.batch_train": "16",
    "train.batch_val": "25",
    "train.eval_every": "100",
    "data.count": "250",
    "data.seed": "1234",
    "data.noise": "0.02",
}


def base_overrides():
    return dict(_BASE)


def builtin_grid(name):
    """(grid_overrides, cells) for a named grid; cells are (name, overrides)."""
    if name == "heads_caps":
        cells = [(f"h{h}_k{k}", {"model.num_heads": str(h), "model.num_capsules": str(k)})
                 for h in (4, 8) for k in (4, 8)]
        return {}, cells
    if name == "dims":
        pairs = ((64, 64), (64, 128), (64, 256), (128, 128), (128, 256), (256, 256))
        cells = [(f"d{d}_h{h}", {"model.capsule_dim": str(d), "model.hidden_dim": str(h)})
                 for d, h in pairs]
        return {}, cells
    if name == "components":
        cells = [
            ("full", {}),
            ("no_attention", {"model.use_attention": "false"}),
            ("no_capsules", {"model.use_capsules": "false"}),
            ("neither", {"model.use_capsules": "false", "model.use_attention": "false"}),
        ]
        return {}, cells
    if name == "decoder":
        cells = [(m, {"model.decoder_mode": m}) for m in ("dual", "single", "dual_shared")]
        return {}, cells
    if name == "seqlen":
        cells = [("T9", {}), ("T1", {"model.seq_len": "1"})]
        return {"data.ambiguity": "true", "data.seq_len": "9"}, cells
    raise ConfigError(f"unknown grid {name!r}; built-ins: {', '.join(GRID_NAMES)}")


def parse_grid_file(path):
    """Custom grid: one cell per line, 'name: key=value key=value ...'."""
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except FileNotFoundError:
        raise ConfigError(f"grid file not found: {path}") from None
    cells = []
    for ln, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if ":" not in stripped:
            raise ConfigError(f"{path}:{ln}: expected 'name: key=value ...'")
        name, rest = stripped.split(":", 1)
        overrides = {}
        for token in rest.split():
            if "=" not in token:
                raise ConfigError(f"{path}:{ln}: bad override {token!r}")
            k, v = token.split("=", 1)
            overrides[k.strip()] = v.strip()
        cells.append((name.strip(), overrides))
    if not cells:
        raise ConfigError(f"grid file {path} defines no cells")
    return {}, cells


@dataclass
class CellOutcome:
    cell: str
    seed: int
    err_deg: float = math.nan
    params: int = 0
    flops: int = 0
    latency_ms: float = math.nan
    failed: bool = False
    message: str = ""
    data_sha: str = ""
    batch_sha: str = ""
    wall_s: float = 0.0


def _merged_config(layers):
    """Later layers win; returns the parsed RunConfig."""
    merged = {}
    for layer in layers:
        merged.update(layer)
    return parse_config(flags=[f"--{k}={v}" for k, v in merged.items()])


def _dataset_sha(x, y):
    h = hashlib.sha256()
    h.update(x.tobytes())
    h.update(y.tobytes())
    return h.hexdigest()[:16]


def _batch_sha(seed, epochs, n):
    h = hashlib.sha256()
    for epoch in range(epochs):
        order = RandomSource(seed).derive(epoch).shuffle_indices(n)
        h.update(np.asarray(order, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


def run_cell(cell_rc, seed, train_arrays, val_arrays):
    """Train one configuration with one seed and measure everything."""
    t0 = time.time()
    x_tr, y_tr = train_arrays
    x_va, y_va = val_arrays
    t_model = cell_rc.model.seq_len
    if t_model < x_tr.shape[1]:
        x_tr = x_tr[:, -t_model:]
        x_va = x_va[:, -t_model:]
    elif t_model > x_tr.shape[1]:
        raise ConfigError(f"model seq_len {t_model} exceeds dataset length {x_tr.shape[1]}")

    tc = dataclasses.replace(cell_rc.train, seed=seed)
    params = init_model(cell_rc.model, RandomSource(seed))
    named = named_parameters(params, cell_rc.model)
    state = init_adam_state(named)
    result = train(cell_rc.model, tc, (x_tr, y_tr), (x_va, y_va),
                   params=params, adam_state=state)
    mean_ms, _ = measure_latency(result.params, cell_rc.model, warmup=3, iters=10, seed=seed)
    return CellOutcome(
        cell="", seed=seed,
        err_deg=result.final_val_err,
        params=count_params(cell_rc.model),
        flops=count_flops(cell_rc.model),
        latency_ms=mean_ms,
        data_sha=_dataset_sha(x_tr, y_tr),
        batch_sha=_batch_sha(seed, tc.epochs, x_tr.shape[0]),
        wall_s=time.time() - t0,
    )


def _outcome_path(grid_dir, cell, seed):
    return os.path.join(grid_dir, f"{cell}__seed{seed}.json")


def _save_outcome(grid_dir, outcome):
    with open(_outcome_path(grid_dir, outcome.cell, outcome.seed), "w") as f:
        json.dump(dataclasses.asdict(outcome), f, indent=1)


def _load_outcome(grid_dir, cell, seed):
    path = _outcome_path(grid_dir, cell, seed)
    if not os.path.exists(path):
        return None
    with open(path) as f:
        return CellOutcome(**json.load(f))


def run_grid(grid, out_dir, user_path=None, user_flags=(), seeds=5, progress=None):
    """Train every (cell, seed) of a grid, resuming from saved outcomes.

    Precedence, lowest to highest: desk-scale base, grid requirements, the
    user's config file, user flags, then each cell's own overrides. Returns
    (outcomes, csv_path, txt_path).
    """
    if seeds < 1:
        raise ConfigError(f"seeds must be >= 1, got {seeds}")
    if grid in GRID_NAMES:
        grid_over, cells = builtin_grid(grid)
        grid_name = grid
    elif os.path.isfile(str(grid)):
        grid_over, cells = parse_grid_file(grid)
        grid_name = os.path.splitext(os.path.basename(str(grid)))[0]
    else:
        raise ConfigError(f"unknown grid {grid!r}; built-ins: {', '.join(GRID_NAMES)} (or a grid file path)")

    user_file = dict()
    if user_path is not None:
        for key, raw, where in read_config_file(user_path):
            user_file[key] = raw
    user_cli = {}
    for flag in user_flags:
        if not flag.startswith("--") or "=" not in flag:
            raise ConfigError(f"flag {flag!r} is not of the form --section.key=value")
        k, v = flag[2:].split("=", 1)
        user_cli[k] = v
    layers = [base_overrides(), grid_over, user_file, user_cli]

    base_rc = _merged_config(layers)
    grid_dir = os.path.join(out_dir, grid_name)
    os.makedirs(grid_dir, exist_ok=True)
    with open(os.path.join(grid_dir, "config.txt"), "w") as f:
        f.write(echo_config(base_rc))

    # one dataset for the whole grid; cells never regenerate it
    samples = D.generate(base_rc.data)
    train_s, val_s = D.split(samples, 0.8, seed=base_rc.data.seed)
    train_arrays = (D.frames_array(train_s), D.labels_array(train_s))
    val_arrays = (D.frames_array(val_s), D.labels_array(val_s))

    outcomes = []
    for cell_name, cell_over in cells:
        for seed in range(seeds):
            done = _load_outcome(grid_dir, cell_name, seed)
            if done is not None:
                outcomes.append(done)
                continue
            try:
                cell_rc = _merged_config(layers + [cell_over])
                outcome = run_cell(cell_rc, seed, train_arrays, val_arrays)
                outcome.cell = cell_name
            except CapsGazeError as e:
                outcome = CellOutcome(cell=cell_name, seed=seed, failed=True,
                                      message=f"{type(e).__name__}: {e}")
            _save_outcome(grid_dir, outcome)
            outcomes.append(outcome)
            if progress is not None:
                progress(outcome)

    csv_path, txt_path = write_report(grid_dir, outcomes)
    return outcomes, csv_path, txt_path


def cell_stats(outcomes):
    """cell -> (median, iqr_low, iqr_high, n) over completed runs."""
    stats = {}
    by_cell = {}
    for o in outcomes:
        if not o.failed and math.isfinite(o.err_deg):
            by_cell.setdefault(o.cell, []).append(o.err_deg)
    for cell, errs in by_cell.items():
        arr = np.asarray(errs)
        stats[cell] = (float(np.median(arr)), float(np.percentile(arr, 25)),
                       float(np.percentile(arr, 75)), len(errs))
    return stats


def write_report(grid_dir, outcomes):
    csv_path = os.path.join(grid_dir, "report.csv")
    with open(csv_path, "w") as f:
        f.write(REPORT_COLUMNS + "\n")
        for o in outcomes:
            if o.failed:
                continue
            f.write(f"{o.cell},{o.seed},{o.err_deg:.6f},{o.params},{o.flops},{o.latency_ms:.3f}\n")

    stats = cell_stats(outcomes)
    seen = []
    for o in outcomes:
        if o.cell not in seen:
            seen.append(o.cell)
    lines = [f"{'Cell':<16} {'Err (deg)':>10} {'IQR':>17} {'Params':>10} {'FLOPs/frame':>12} {'Infer (ms)':>10}"]
    for cell in seen:
        if cell not in stats:
            lines.append(f"{cell:<16} {'failed':>10}")
            continue
        med, lo, hi, n = stats[cell]
        ex = next(o for o in outcomes if o.cell == cell and not o.failed)
        lines.append(f"{cell:<16} {med:>10.3f} {f'[{lo:.3f}, {hi:.3f}]':>17} "
                     f"{ex.params:>10} {ex.flops:>12} {ex.latency_ms:>10.3f}")
    failures = [o for o in outcomes if o.failed]
    if failures:
        lines.append("")
        lines.append("failed runs:")
        for o in failures:
            lines.append(f"  {o.cell} seed {o.seed}: {o.message}")
    txt_path = os.path.join(grid_dir, "report.txt")
    with open(txt_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return csv_path, txt_path
