"""Command-line entry point.

Verbs: train, eval, gen-data, ablate, export-heatmaps, count, bench.
Any unrecognized --section.key=value flag is a config override applied on
top of --config. Failures exit with a category code (2 config, 3 data,
4 numeric, 5 format) and a single machine-parsable stderr line.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import ablate as AB
from . import data as D
from .capsules import export_heatmaps
from .config import echo_config, parse_config
from .errors import (
    CapsGazeError,
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    NumericError,
    ShapeError,
)
from .metrics import MetricReport, count_flops, count_params, measure_latency
from .model import init_model, model_forward, named_parameters
from .tensor import RandomSource, Tensor
from .training import (
    evaluate,
    init_adam_state,
    load_checkpoint,
    save_checkpoint,
    train,
)

_EXIT_CODES = (
    (ConfigError, 2, "config"),
    (DataError, 3, "data"),
    (NumericError, 4, "numeric"),
    (ContractError, 4, "numeric"),
    (FormatError, 5, "format"),
    (ShapeError, 5, "format"),
)


def _classify(exc):
    for cls, code, category in _EXIT_CODES:
        if isinstance(exc, cls):
            return code, category
    return 1, "internal"


def _config_flags(extras):
    for flag in extras:
        if not flag.startswith("--") or "=" not in flag:
            raise ConfigError(f"flag {flag!r} is not of the form --section.key=value")
    return extras


def _require_out(rc):
    if rc.out_dir is None:
        raise ConfigError("missing required key out.dir")
    os.makedirs(rc.out_dir, exist_ok=True)
    return rc.out_dir


def _load_samples(rc):
    if rc.source == "directory":
        samples = D.load_directory(rc.data_dir)
    else:
        samples = D.generate(rc.data)
    if not samples:
        raise DataError("dataset is empty")
    return samples


def cmd_train(args, extras):
    rc = parse_config(args.config, _config_flags(extras))
    out = _require_out(rc)
    with open(os.path.join(out, "config.txt"), "w") as f:
        f.write(echo_config(rc))
    samples = _load_samples(rc)
    train_s, val_s = D.split(samples, 0.8, seed=rc.data.seed)

    params = init_model(rc.model, RandomSource(rc.train.seed))
    state = init_adam_state(named_parameters(params, rc.model))
    result = train(rc.model, rc.train, train_s, val_s, params=params,
                   adam_state=state, log_path=os.path.join(out, "train_log.csv"))
    ckpt = os.path.join(out, "model.ckpt")
    save_checkpoint(ckpt, params, rc.model, rc.train, adam_state=state,
                    epoch=rc.train.epochs, extra={"val_err": result.final_val_err})
    print(f"epochs {rc.train.epochs}")
    print(f"final_val_err_deg {result.final_val_err:.6f}")
    print(f"checkpoint {ckpt}")
    return 0


def cmd_eval(args, extras):
    rc = parse_config(args.config, _config_flags(extras))
    params, _, _, _ = load_checkpoint(args.checkpoint, rc.model)
    samples = _load_samples(rc)
    x, y = D.frames_array(samples), D.labels_array(samples)
    if x.shape[1] > rc.model.seq_len:
        x = x[:, -rc.model.seq_len:]
    err = evaluate(params, rc.model, x, y, rc.train.batch_val)
    mean_ms, p95_ms = measure_latency(params, rc.model, warmup=3, iters=10)
    report = MetricReport(err, count_params(rc.model), count_flops(rc.model), mean_ms, p95_ms)
    text = report.text()
    print(text)
    if rc.out_dir is not None:
        os.makedirs(rc.out_dir, exist_ok=True)
        with open(os.path.join(rc.out_dir, "eval.txt"), "w") as f:
            f.write(text + "\n")
    return 0


def cmd_gen_data(args, extras):
    rc = parse_config(args.config, _config_flags(extras))
    dest = args.dest or rc.data_dir
    if dest is None:
        dest = os.path.join(_require_out(rc), "dataset")
    samples = D.generate(rc.data)
    D.save_dataset(dest, samples)
    print(f"sequences {len(samples)}")
    print(f"dataset {dest}")
    return 0


def cmd_ablate(args, extras):
    rc_flags = _config_flags(extras)
    out_dir = None
    for flag in rc_flags:
        if flag.startswith("--out.dir="):
            out_dir = flag.split("=", 1)[1]
    if out_dir is None and args.config is not None:
        out_dir = parse_config(args.config, rc_flags).out_dir
    if out_dir is None:
        raise ConfigError("missing required key out.dir")

    def progress(outcome):
        if outcome.failed:
            print(f"{outcome.cell} seed {outcome.seed}: FAILED {outcome.message}")
        else:
            print(f"{outcome.cell} seed {outcome.seed}: {outcome.err_deg:.3f} deg "
                  f"({outcome.wall_s:.0f}s)")

    outcomes, csv_path, txt_path = AB.run_grid(
        args.grid, out_dir, user_path=args.config, user_flags=rc_flags,
        seeds=args.seeds, progress=progress)
    print(open(txt_path).read().rstrip())
    print(f"report {csv_path}")
    failed = sum(1 for o in outcomes if o.failed)
    if failed:
        print(f"failed_runs {failed}")
    return 0


def cmd_export_heatmaps(args, extras):
    rc = parse_config(args.config, _config_flags(extras))
    out = _require_out(rc)
    if not rc.model.use_capsules:
        raise ConfigError("cannot export heatmaps: model.use_capsules is false")
    params, _, _, _ = load_checkpoint(args.checkpoint, rc.model)
    samples = _load_samples(rc)
    if not (0 <= args.sample < len(samples)):
        raise DataError(f"sample index {args.sample} outside dataset of {len(samples)}")
    x = D.frames_array([samples[args.sample]])
    if x.shape[1] > rc.model.seq_len:
        x = x[:, -rc.model.seq_len:]
    _, weights = model_forward(Tensor(x), params, rc.model, training=False)
    hw = rc.model.feature_hw
    dest = os.path.join(out, "heatmaps")
    paths = export_heatmaps(dest, weights.P.data[0], hw, hw)
    print(f"files {len(paths)}")
    print(f"heatmaps {dest}")
    return 0


def cmd_count(args, extras):
    rc = parse_config(args.config, _config_flags(extras))
    print(f"params {count_params(rc.model)}")
    print(f"flops_per_frame {count_flops(rc.model)}")
    return 0


def cmd_bench(args, extras):
    rc = parse_config(args.config, _config_flags(extras))
    params = init_model(rc.model, RandomSource(rc.train.seed))
    mean_ms, p95_ms = measure_latency(params, rc.model, warmup=args.warmup, iters=args.iters)
    print(f"params {count_params(rc.model)}")
    print(f"flops_per_frame {count_flops(rc.model)}")
    print(f"latency_mean_ms {mean_ms:.3f}")
    print(f"latency_p95_ms {p95_ms:.3f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="capsgaze",
        description="Capsule-attention gaze estimation toolkit")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(name, fn, **extra_args):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="config file path")
        for flag, kw in extra_args.items():
            p.add_argument(flag, **kw)
        p.set_defaults(fn=fn)
        return p

    add("train", cmd_train)
    add("eval", cmd_eval, **{"--checkpoint": dict(required=True)})
    add("gen-data", cmd_gen_data, **{"--dest": dict(default=None)})
    add("ablate", cmd_ablate, **{
        "--grid": dict(required=True, help="built-in grid name or grid file"),
        "--seeds": dict(type=int, default=5),
    })
    add("export-heatmaps", cmd_export_heatmaps, **{
        "--checkpoint": dict(required=True),
        "--sample": dict(type=int, default=0),
    })
    add("count", cmd_count)
    add("bench", cmd_bench, **{
        "--warmup": dict(type=int, default=10),
        "--iters": dict(type=int, default=50),
    })
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        return args.fn(args, extras)
    except SystemExit as e:
        # argparse already printed its message; normalize to the config code
        return 2 if e.code not in (0, None) else 0
    except CapsGazeError as e:
        code, category = _classify(e)
        message = " ".join(str(e).split())
        print(f"error: code={code} category={category} message={message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
