"""Command-line entry point: ``srnn-lab {train,gradcheck,benchmark,dump-states}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import diagnostics, harness, models, tasks
from .checkpoint import CheckpointError
from .tensor import ShapeError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _epilog() -> str:
    keys = ", ".join(harness.config_keys())
    return f"presets: {', '.join(harness.PRESETS)}\nconfig keys: {keys}"


def _positive(raw: str) -> int:
    try:
        v = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {raw!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _int_list(raw: str) -> list[int]:
    try:
        vals = [int(v) for v in raw.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"hidden sizes must be positive, got {raw!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="srnn-lab", description="Shuffling recurrent network experiments.", epilog=_epilog(),
                formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a preset", epilog=_epilog(), formatter_class=fmt)
    t.add_argument("--preset", choices=list(harness.PRESETS), required=True)
    t.add_argument("--config", type=Path, help="flat 'key = value' file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--out", help="output directory")
    keys = t.add_argument_group("config keys (each overrides the preset and the config file)")
    for key in harness.config_keys():
        if key != "out":
            keys.add_argument(f"--{key}", dest=f"key_{key}", metavar="V")

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--model", choices=["srnn", "rnn"], required=True)
    g.add_argument("--dh", type=_positive, default=16)
    g.add_argument("--T", type=_positive, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--batch", type=_positive, default=4)
    g.add_argument("--task", choices=["adding", "memcopy"], default="adding")

    b = sub.add_parser("benchmark", help="time one training step across hidden sizes")
    b.add_argument("--model", choices=["srnn", "rnn"], required=True)
    b.add_argument("--dh-list", type=_int_list, default=[256, 512, 1024, 2048])
    b.add_argument("--T", type=_positive, default=300)
    b.add_argument("--batch", type=_positive, default=1)
    b.add_argument("--repeats", type=_positive, default=5)
    b.add_argument("--shape", choices=["synthetic", "memcopy"], default="synthetic")
    b.add_argument("--threads", type=int, default=0)
    b.add_argument("--out", type=Path, help="CSV path (default: stdout)")

    d = sub.add_parser("dump-states", help="write de-rotated hidden states of one sample")
    d.add_argument("--checkpoint", type=Path, required=True)
    d.add_argument("--task", choices=list(harness.PRESETS), required=True)
    d.add_argument("--out", type=Path, required=True)
    d.add_argument("--sample-seed", type=int, default=0)
    return p


def cmd_train(args) -> int:
    file_values = {}
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as e:
            raise harness.ConfigError(f"cannot read config file: {e}") from None
        file_values = harness.parse_config_text(text)
    overrides = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise harness.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = harness.parse_value(key.strip(), raw)
    for key in harness.config_keys():
        raw = getattr(args, f"key_{key}", None)
        if raw is not None:
            overrides[key] = harness.parse_value(key, raw)
    if args.out is not None:
        overrides["out"] = args.out
    cfg = harness.make_config(args.preset, file_values, overrides)
    if cfg.task not in harness.GENERATOR_TASKS:
        harness.load_dataset_task(cfg)  # fail on missing data before any training
    result = harness.train(cfg)
    final = result.final
    print(f"step {final.step} samples {final.samples_seen} train_loss {final.train_loss:.6g} "
          f"eval_metric {final.eval_metric:.6g}")
    for k, v in result.summary.items():
        print(f"{k} {v}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    module = models.get(args.model)
    if args.task == "memcopy":
        batch = tasks.gen_memcopy(args.T, args.batch, rng)
        kw = dict(vocab=tasks.MEMCOPY_VOCAB, d_e=8)
        d_in, d_out = None, tasks.MEMCOPY_CLASSES
    else:
        if args.T < 2:
            raise UsageError("adding needs --T >= 2")
        batch = tasks.gen_adding(args.T, args.batch, rng)
        kw, d_in, d_out = {}, 2, 1
    if args.model == "srnn":
        params = module.init_params(d_in, args.dh, d_out, (8,), seed=args.seed, **kw)
    else:
        params = module.init_params(d_in, args.dh, d_out, seed=args.seed, **kw)
    res = diagnostics.finite_diff_check(args.model, params, batch)
    print(f"max_rel_err {res.max_rel_err:.3e} skipped {res.skipped} checked {res.checked} worst {res.worst}")
    return EXIT_OK if res.max_rel_err < 1e-5 else EXIT_FAIL


def cmd_benchmark(args) -> int:
    with harness.thread_limit(args.threads):
        rows = harness.runtime_benchmark(args.model, args.dh_list, T=args.T, batch=args.batch,
                                         repeats=max(args.repeats, 3), shape=args.shape)
    if args.out is not None:
        harness.write_benchmark_csv(rows, args.out, args.model)
    else:
        print("model,d_h,seconds_per_step")
        for d_h, sec in rows:
            print(f"{args.model},{d_h},{sec!r}")
    if len(rows) >= 2:
        print(f"slope {harness.loglog_slope(rows):.3f}")
    return EXIT_OK


def _one_sample(cfg: harness.ExperimentConfig, seed: int):
    rng = np.random.default_rng(seed)
    if cfg.task in harness.GENERATOR_TASKS:
        return harness.generator_for(cfg)(1, rng).inputs
    ds = tasks.find_mnist(cfg.data_dir, "train")
    i = int(rng.integers(ds.N))
    one = tasks.ImageDataset(ds.images[i : i + 1], ds.labels[i : i + 1])
    view = tasks.make_pixel_sequences(one, cfg.crop or None, cfg.permute_seed)
    return view.batch(np.array([0])).inputs


def cmd_dump_states(args) -> int:
    if not args.checkpoint.is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    try:
        params, meta = models.load_any(args.checkpoint)
    except CheckpointError as e:
        raise UsageError(str(e)) from None
    overrides = {k: harness.parse_value(k, meta[k]) for k in ("T", "crop", "permute_seed") if k in meta}
    cfg = harness.make_config(args.task, overrides=overrides)
    try:
        inputs = _one_sample(cfg, args.sample_seed)
    except tasks.IdxError as e:
        raise UsageError(str(e)) from None
    module = models.module_for(params)
    try:
        _, trace = module.forward(params, inputs)
    except (ShapeError, IndexError, ValueError) as e:
        raise UsageError(f"checkpoint does not fit task {args.task}: {e}") from None
    if not hasattr(trace, "b_cache"):
        raise UsageError("dump-states needs a shuffling-network checkpoint")
    states = diagnostics.derotate_states(trace)
    diagnostics.write_states_csv(states, args.out)
    print(f"wrote {states.shape[0]} units x {states.shape[1]} steps to {args.out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "gradcheck": cmd_gradcheck, "benchmark": cmd_benchmark,
            "dump-states": cmd_dump_states}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except harness.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except harness.NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
