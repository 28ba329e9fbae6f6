"""Command-line entry points.

Verbs:
  gen-data          write a synthetic train/test pair to disk
  train             optimize a model and write checkpoint + reports
  eval              score a checkpoint against a dataset
  export-attention  dump one class's map and attention columns as PGM
  gradcheck         run the finite-difference suite (nonzero exit on fail)

Every train flag mirrors a TrainConfig field; a flag given on the
command line overrides the same key from --config. The effective config
is echoed at the top of the run log.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields, replace

from .data import (SyntheticConfig, generate, load_dataset, save_dataset,
                   stats, write_manifest)
from .head import load_checkpoint
from .metrics import format_report, report_entries, write_predictions
from .training import (TrainConfig, config_from_file, evaluate,
                       export_attention, preset, synthetic_config, train)


def _flag(name):
    return "--" + name.replace("_", "-")


def _add_config_flags(parser, config_cls):
    """One optional flag per dataclass field, default None (= not given)."""
    for f in fields(config_cls):
        default = f.default
        if isinstance(default, bool):
            parser.add_argument(_flag(f.name), dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction)
        else:
            parser.add_argument(_flag(f.name), dest=f.name, default=None,
                                type=type(default))


def _apply_flags(cfg, args, config_cls):
    updates = {}
    for f in fields(config_cls):
        value = getattr(args, f.name, None)
        if value is not None:
            updates[f.name] = value
    return replace(cfg, **updates) if updates else cfg


def _check_dataset(ds, cfg: TrainConfig, name):
    if ds.kind != "images":
        raise SystemExit(f"{name}: expected an image dataset, got {ds.kind}")
    n, h, w, c = ds.payload.shape
    if ds.num_classes != cfg.num_classes or h != cfg.image_size \
            or w != cfg.image_size or c != cfg.channels:
        raise SystemExit(
            f"{name}: dataset is {h}x{w}x{c} with {ds.num_classes} classes, "
            f"config wants {cfg.image_size}x{cfg.image_size}x{cfg.channels} "
            f"with {cfg.num_classes}")


def cmd_gen_data(args):
    cfg = SyntheticConfig()
    updates = {f.name: getattr(args, f.name)
               for f in fields(SyntheticConfig)
               if getattr(args, f.name, None) is not None}
    cfg = replace(cfg, **updates)
    train_ds, test_ds = generate(cfg)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(os.path.join(args.out, "train.bin"), train_ds)
    save_dataset(os.path.join(args.out, "test.bin"), test_ds)
    entries = {f.name: getattr(cfg, f.name) for f in fields(SyntheticConfig)}
    write_manifest(os.path.join(args.out, "data.cfg"), entries)
    for tag, ds in (("train", train_ds), ("test", test_ds)):
        st = stats(ds)
        print(f"{tag}: {st.n_samples} samples, {st.num_classes} classes, "
              f"cardinality {st.cardinality:.3f}")
    return 0


def cmd_train(args):
    cfg = TrainConfig() if args.preset is None else preset(args.preset)
    if args.config is not None:
        cfg = config_from_file(args.config, base=cfg)
    cfg = _apply_flags(cfg, args, TrainConfig)

    if (args.train_data is None) != (args.test_data is None):
        raise SystemExit("give both --train-data and --test-data, or neither")
    if args.train_data is not None:
        train_ds = load_dataset(args.train_data)
        test_ds = load_dataset(args.test_data)
        _check_dataset(train_ds, cfg, args.train_data)
        _check_dataset(test_ds, cfg, args.test_data)
    else:
        train_ds, test_ds = generate(synthetic_config(cfg))

    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "run.log")
    with open(log_path, "w") as fh:
        def say(line):
            fh.write(line + "\n")
            if not args.quiet:
                print(line)
        train(cfg, train_ds, test_ds, log=say, out_dir=args.out)
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    report, preds = evaluate(model, ds)
    if args.threshold != 0.5 or args.top_k != 3:
        from .metrics import compute_report
        report = compute_report(preds, threshold=args.threshold,
                                top_k=args.top_k)
    print(format_report(report))
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        write_predictions(os.path.join(args.out, "predictions.txt"), preds)
        write_manifest(os.path.join(args.out, "metrics.txt"),
                       report_entries(report))
    return 0


def cmd_export_attention(args):
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if not 0 <= args.index < len(ds):
        raise SystemExit(f"sample index {args.index} outside dataset "
                         f"of {len(ds)}")
    export_attention(model, ds.payload[args.index], args.class_id,
                     args.out_map, args.out_attn)
    print(f"wrote {args.out_map} and {args.out_attn}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_suite
    ok = run_suite(verbose=not args.quiet)
    if not ok:
        print("gradcheck FAILED", file=sys.stderr)
        return 1
    print("gradcheck ok")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sarl",
        description="semantic-aware representation learning trainer")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset pair")
    p.add_argument("--out", required=True)
    _add_config_flags(p, SyntheticConfig)
    p.set_defaults(run=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--preset", choices=("voc2007", "ms-coco"))
    p.add_argument("--train-data", help="dataset file (default: synthetic)")
    p.add_argument("--test-data")
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p, TrainConfig)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="where to write predictions and metrics")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--top-k", type=int, default=3)
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("export-attention",
                       help="write class map and attention as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--class-id", type=int, required=True)
    p.add_argument("--out-map", required=True)
    p.add_argument("--out-attn", required=True)
    p.set_defaults(run=cmd_export_attention)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(run=cmd_gradcheck)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.run(args)


if __name__ == "__main__":
    sys.exit(main())
