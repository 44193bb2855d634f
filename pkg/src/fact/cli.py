"""``fact`` command line: pretrain, train, eval, sweep, merge, count-params, export-plots.

Exit codes: 0 success, 2 configuration error, 3 data or file error, 4 divergence.
Failures print one line to stderr starting with ``fact: error[<kind>]:``.
Every run echoes its resolved configuration to stderr as ``fact: config {json}``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from fact import checkpoint as ck
from fact import config as cfgfile
from fact import data, desk, plots, training, vit
from fact import factorization as fz
from fact.tensor import ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
_KINDS = {EXIT_CONFIG: "config", EXIT_DATA: "data", EXIT_DIVERGENCE: "divergence"}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_CONFIG, message)


def _int_list(text):
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _format_list(text):
    items = [t.strip() for t in str(text).split(",") if t.strip()]
    bad = [t for t in items if t not in fz.FORMATS]
    if bad or not items:
        raise argparse.ArgumentTypeError(f"formats must be drawn from {','.join(fz.FORMATS)}, got {text!r}")
    return items


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_optim(p, epochs, warmup):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--warmup-epochs", type=int, default=warmup)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-4)


def _add_factor(p):
    p.add_argument("--format", choices=fz.FORMATS, default="tt")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--strategy", choices=vit.STRATEGIES, default="all")


def build_parser():
    parser = _Parser(prog="fact", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    parsers = {}

    def sub(name, help_text):
        p = subs.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key=value file; flags override it")
        parsers[name] = p
        return p

    p = sub("pretrain", "train a backbone from scratch on a source task")
    p.add_argument("-L", "--layers", type=int, default=desk.BACKBONE["L"])
    p.add_argument("-d", "--dim", type=int, default=desk.BACKBONE["d"])
    p.add_argument("--heads", type=int, default=desk.BACKBONE["heads"])
    p.add_argument("--image-size", type=int, default=desk.BACKBONE["image_size"])
    p.add_argument("--patch-size", type=int, default=desk.BACKBONE["patch_size"])
    p.add_argument("--data", default=desk.SOURCE_SPEC)
    p.add_argument("--out", help="backbone container to write")
    p.add_argument("--metrics")
    p.add_argument("--seed", type=int, default=0)
    _add_optim(p, desk.PRETRAIN.epochs, desk.PRETRAIN.warmup_epochs)

    p = sub("train", "fine-tune a backbone (factors + head, head only, or everything)")
    p.add_argument("--mode", choices=("fact", "linear", "full"), default="fact")
    _add_factor(p)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--backbone")
    p.add_argument("--data", default=desk.TARGET_SPEC)
    p.add_argument("--out", help="factor checkpoint to write (a backbone for --mode full)")
    p.add_argument("--metrics")
    p.add_argument("--seed", type=int, default=0)
    _add_optim(p, 100, 10)

    p = sub("sweep", "grid over rank and scale, select on val, retrain on train+val")
    _add_factor(p)
    p.add_argument("--ranks", type=_int_list, default=[1, 2, 4, 8, 16])
    p.add_argument("--scales", type=_float_list, default=[0.01, 0.1, 1.0, 10.0, 100.0])
    p.add_argument("--backbone")
    p.add_argument("--data", default=desk.TARGET_SPEC)
    p.add_argument("--out", help="factor checkpoint of the winner")
    p.add_argument("--metrics")
    p.add_argument("--seed", type=int, default=0)
    _add_optim(p, 100, 10)

    p = sub("eval", "accuracy of a backbone, optionally with a factor checkpoint, on one split")
    p.add_argument("--backbone")
    p.add_argument("--factors")
    p.add_argument("--data", default=desk.TARGET_SPEC)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub("merge", "absorb a factor checkpoint into a dense backbone")
    p.add_argument("--backbone")
    p.add_argument("--factors")
    p.add_argument("--out")

    p = sub("count-params", "trainable parameter counts per format and rank")
    p.add_argument("--format", type=_format_list, default=list(fz.FORMATS))
    p.add_argument("--rank", type=_int_list, default=[1, 2, 4, 8, 16])
    p.add_argument("-L", "--layers", type=int, default=12)
    p.add_argument("-d", "--dim", type=int, default=768)
    p.add_argument("--strategy", choices=vit.STRATEGIES, default="all")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--csv", action="store_true")

    p = sub("export-plots", "accuracy-vs-rank and params-vs-rank CSV + SVG from a metrics file")
    p.add_argument("--metrics")
    p.add_argument("--out", default="plots")
    return parser, parsers


def _apply_config_file(sub, path):
    values = cfgfile.read_config(path)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown key(s) in {path}: {', '.join(unknown)}")
    for key, raw in values.items():
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise CliError(EXIT_CONFIG, f"{path}: {key} must be a boolean, got {raw!r}")
            values[key] = raw.lower() in ("true", "1", "yes")
        elif action.choices is not None and raw not in action.choices:
            raise CliError(EXIT_CONFIG, f"{path}: {key}={raw!r} not in {list(action.choices)}")
    sub.set_defaults(**values)


def parse_args(argv):
    parser, parsers = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise CliError(EXIT_CONFIG, f"missing command; choose from {', '.join(parsers)}")
    if args.config:
        _apply_config_file(parsers[args.command], args.config)
        args = parser.parse_args(argv)
    return args


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _echo_config(args):
    resolved = {k: v for k, v in sorted(vars(args).items())}
    print("fact: config " + json.dumps(resolved, sort_keys=True), file=sys.stderr)


def _emit(payload):
    print(json.dumps(payload, sort_keys=True))


def _require(args, *names):
    for name in names:
        if getattr(args, name) in (None, ""):
            raise CliError(EXIT_CONFIG, f"--{name.replace('_', '-')} is required for {args.command}")


def _load_backbone(path):
    if not Path(path).is_file():
        raise CliError(EXIT_DATA, f"backbone not found: {path}")
    return ck.load_backbone(path)


def _load_factors(path):
    if not Path(path).is_file():
        raise CliError(EXIT_DATA, f"factor checkpoint not found: {path}")
    return ck.load_checkpoint(path)


def _load_data(spec, config=None):
    ds = data.load_dataset(spec)
    if config is not None:
        want = (config.channels, config.image_size, config.image_size)
        if ds.train.x.shape[1:] != want:
            raise CliError(EXIT_DATA, f"data images are {ds.train.x.shape[1:]}, backbone expects {want}")
    return ds


def _train_config(args, mode, **extra):
    return training.TrainConfig(mode=mode, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                                weight_decay=args.weight_decay, warmup_epochs=args.warmup_epochs,
                                seed=args.seed, eval_every=1, **extra)


def _attach(model, ckpt):
    """Backbone plus the checkpoint's head, with compatibility checks."""
    vit._adapters_for(model.config, ckpt.partition)
    h_in, h_out = ckpt.head_weight.shape
    if h_in != model.config.stages[-1].dim:
        raise ShapeError(f"checkpoint head expects {h_in} features, backbone produces "
                         f"{model.config.stages[-1].dim}")
    model = model.with_head(h_out)
    model["head.weight"].data[...] = ckpt.head_weight
    model["head.bias"].data[...] = ckpt.head_bias
    return model


def _report_payload(report):
    out = report.to_dict()
    out.pop("epochs")
    out.pop("wall_time")
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_pretrain(args):
    _require(args, "out")
    if args.dim % args.heads:
        raise CliError(EXIT_CONFIG, f"-d {args.dim} is not divisible by --heads {args.heads}")
    ds = _load_data(args.data)
    if ds.train.x.shape[2:] != (args.image_size, args.image_size):
        raise CliError(EXIT_DATA, f"data images are {ds.train.x.shape[2:]}, --image-size is {args.image_size}")
    config = vit.vit_config(args.layers, args.dim, args.heads, args.image_size, args.patch_size,
                            channels=ds.train.x.shape[1], num_classes=ds.num_classes)
    res = training.pretrain(config, ds, _train_config(args, "full"), args.metrics, init_seed=args.seed)
    ck.save_backbone(res.model, args.out)
    _emit({"command": "pretrain", "out": args.out, **_report_payload(res.report)})


def cmd_train(args):
    _require(args, "backbone")
    backbone = _load_backbone(args.backbone)
    ds = _load_data(args.data, backbone.config)
    mode = f"fact-{args.format}" if args.mode == "fact" else args.mode
    cfg = _train_config(args, mode, rank=args.rank, scale_s=args.scale, strategy=args.strategy)
    writer = training.MetricsWriter(args.metrics)
    try:
        res = training.train(backbone, ds, cfg, writer)
        rep = res.report
        writer.write(record="run", mode=mode, format=cfg.fmt or args.mode, rank=args.rank, scale=args.scale,
                     strategy=args.strategy, params=rep.factor_param_count, val_acc=rep.final_val_acc,
                     test_acc=rep.test_acc)
    finally:
        writer.close()
    if args.out:
        if mode == "full":
            ck.save_backbone(res.model, args.out)
        else:
            ck.save_checkpoint(res.checkpoint, args.out)
    _emit({"command": "train", "out": args.out, **_report_payload(rep)})


def cmd_sweep(args):
    _require(args, "backbone")
    backbone = _load_backbone(args.backbone)
    ds = _load_data(args.data, backbone.config)
    cfg = _train_config(args, f"fact-{args.format}", strategy=args.strategy,
                        rank_candidates=args.ranks, s_candidates=args.scales)
    result, cells = training.sweep(backbone, ds, cfg, args.metrics)
    if args.out:
        ck.save_checkpoint(result.checkpoint, args.out)
    _emit({"command": "sweep", "out": args.out, "selected": list(result.report.selected),
           "val_acc": result.report.final_val_acc, "test_acc": result.report.test_acc,
           "cells": [{"rank": r, "scale": s, "params": p, "val_acc": a} for a, p, s, r in cells]})


def cmd_eval(args):
    _require(args, "backbone")
    model = _load_backbone(args.backbone)
    partition = None
    if args.factors:
        ckpt = _load_factors(args.factors)
        model, partition = _attach(model, ckpt), ckpt.partition
    ds = _load_data(args.data, model.config)
    split = getattr(ds, args.split)
    loss, acc = training.evaluate(model, split, partition)
    _emit({"command": "eval", "split": args.split, "n": len(split), "loss": loss, "acc": acc})


def cmd_merge(args):
    _require(args, "backbone", "factors", "out")
    model = _load_backbone(args.backbone)
    ckpt = _load_factors(args.factors)
    model = _attach(model, ckpt)
    merged = vit.merge_partition(model, ckpt.partition)
    ck.save_backbone(merged, args.out)
    _emit({"command": "merge", "out": args.out,
           "stages": 0 if ckpt.partition is None else len(ckpt.partition.adapters)})


def count_rows(formats, ranks, layers, dim, strategy):
    stages = [(layers, dim)]
    M = vit.partition_shapes(stages, strategy)[0][0]
    rows = []
    for fmt in formats:
        for r in ranks:
            count = vit.partition_param_count(stages, fmt, r, strategy)
            rows.append({"format": fmt, "strategy": strategy, "L": layers, "d": dim, "M": M,
                         "rank": r, "params": count, "params_M": f"{count / 1e6:.3f}"})
    return rows


def cmd_count_params(args):
    if args.layers < 1 or args.dim < 2:
        raise CliError(EXIT_CONFIG, "need -L >= 1 and -d >= 2")
    bad = [r for r in args.rank if not 1 <= r < args.dim]
    if bad:
        raise CliError(EXIT_CONFIG, f"ranks must lie in [1, {args.dim}), got {bad}")
    rows = count_rows(args.format, args.rank, args.layers, args.dim, args.strategy)
    cols = ["format", "strategy", "L", "d", "M", "rank", "params", "params_M"]
    if args.csv:
        print(",".join(cols))
        for row in rows:
            print(",".join(str(row[c]) for c in cols))
        return
    print(f"{'format':<7}{'strategy':<9}{'L':>4}{'d':>6}{'M':>6}{'rank':>6}{'params':>12}{'(M)':>9}")
    for row in rows:
        print(f"{row['format']:<7}{row['strategy']:<9}{row['L']:>4}{row['d']:>6}{row['M']:>6}"
              f"{row['rank']:>6}{row['params']:>12}{row['params_M']:>9}")
    if args.image_size % args.patch_size == 0:
        dense = vit.dense_param_count(vit.vit_config(args.layers, args.dim, 1, args.image_size,
                                                     args.patch_size))
        print(f"dense backbone ({args.image_size}px, patch {args.patch_size}, no head): "
              f"{dense} ({dense / 1e6:.1f} M)")


def cmd_export_plots(args):
    _require(args, "metrics")
    path = Path(args.metrics)
    if not path.is_file():
        raise CliError(EXIT_DATA, f"metrics file not found: {path}")
    try:
        records = training.read_metrics(path)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_DATA, f"cannot parse {path}: {exc}") from exc
    if not records:
        raise CliError(EXIT_DATA, f"metrics file is empty: {path}")
    written = plots.export_plots(records, args.out)
    _emit({"command": "export-plots", "written": [str(p) for p in written]})


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "merge": cmd_merge,
    "count-params": cmd_count_params,
    "export-plots": cmd_export_plots,
}


def run(argv):
    args = parse_args(argv)
    _echo_config(args)
    COMMANDS[args.command](args)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        run(argv)
        return EXIT_OK
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except (data.DataError, ck.CheckpointError, plots.MetricsFormatError, cfgfile.ConfigFileError) as exc:
        code = EXIT_CONFIG if isinstance(exc, cfgfile.ConfigFileError) else EXIT_DATA
        msg = str(exc)
    except OSError as exc:
        code, msg = EXIT_DATA, f"{exc.strerror}: {exc.filename}"
    except training.DivergenceError as exc:
        code, msg = EXIT_DIVERGENCE, str(exc)
    except (ShapeError, fz.ConfigError, ValueError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    print(f"fact: error[{_KINDS[code]}]: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
