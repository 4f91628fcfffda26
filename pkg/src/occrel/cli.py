"""Command-line entry point: ``occrel <command> [flags]``.

Commands::

    gen-scenes  --config --seed --out
    train       --data --mode --epochs --seed --out-model --out-dump
    predict     --model --data --mode --seed --out
    eval        --dump --uncertainty {conf,sigma} --out-dir
    calibrate   --kind --fit-dump --apply-dump --out-params --out-dir
    perturb     --dump --kind --magnitude --seed --out
    report      --dump --out-dir

Exit codes: 0 success, 1 runtime error, 2 usage error, 10-13 dump errors.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import calib
from .config import REFERENCE_SEED, TrainConfig, dump_scene_config, load_scene_config
from .dump import DumpError, read_dump, write_dump
from .metrics import MetricUndefined, evaluate
from .report import emit_reports, format_table, num

SPLITS = ("train", "val", "test")


def _toynet():
    # imported lazily so metric-only commands stay light
    from . import toynet
    return toynet


def cmd_gen_scenes(args) -> int:
    cfg = load_scene_config(args.config)
    ds = _toynet().generate_scenes(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        write_dump(ds.split(name), out / f"{name}.occd")
    (out / "scene.toml").write_text(dump_scene_config(cfg))
    print(f"wrote {', '.join(f'{s}.occd' for s in SPLITS)} to {out}")
    return 0


def _split_path(data, name):
    return Path(data) / f"{name}.occd"


def write_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "L_occ", "L_au", "L_ru", "total"))
        for row in curve:
            w.writerow((row["epoch"], num(row["occ"]), num(row["au"]), num(row["ru"]), num(row["total"])))


def cmd_train(args) -> int:
    tn = _toynet()
    train_batch = read_dump(_split_path(args.data, "train"))
    defaults = TrainConfig()
    cfg = TrainConfig(batch_size=args.batch_size or defaults.batch_size)
    net = tn.ToyNet(train_batch.feature_dim, train_batch.num_classes, cfg.hidden, cfg.dropout,
                    seed=args.seed, with_dul=args.mode == "dul")
    result = tn.train(net, train_batch, args.epochs, args.mode, args.seed, cfg)
    if args.out_model:
        net.save(args.out_model)
    test = read_dump(_split_path(args.data, "test"))
    write_dump(tn.predict_dump(net, test, args.mode, args.seed, cfg.mc_samples), args.out_dump)
    if args.out_val_dump:
        val = read_dump(_split_path(args.data, "val"))
        write_dump(tn.predict_dump(net, val, args.mode, args.seed, cfg.mc_samples), args.out_val_dump)
    if args.out_curve:
        write_curve(result.curve, args.out_curve)
    last = result.curve[-1] if result.curve else {}
    print(f"trained {args.mode} for {args.epochs} epochs, final loss {last.get('total', float('nan')):.6f}")
    return 0


def cmd_predict(args) -> int:
    tn = _toynet()
    net = tn.ToyNet.load(args.model)
    batch = read_dump(args.data)
    write_dump(tn.predict_dump(net, batch, args.mode, args.seed, TrainConfig().mc_samples), args.out)
    return 0


def _evaluate_to(batch, out_dir, source, probs=None):
    report = evaluate(batch, source, probs=probs)
    emit_reports(report, out_dir)
    print(format_table([(Path(out_dir).name or "dump", report)]))
    return report


def cmd_eval(args) -> int:
    batch = read_dump(args.dump)
    if args.uncertainty == "sigma" and batch.sigmas is None:
        print("error: --uncertainty sigma needs a dump with sigmas", file=sys.stderr)
        return 1
    source = "explicit_sigma" if args.uncertainty == "sigma" else "one_minus_confidence"
    _evaluate_to(batch, args.out_dir, source)
    return 0


def cmd_calibrate(args) -> int:
    fit = read_dump(args.fit_dump)
    target = read_dump(args.apply_dump)
    params = calib.fit_calibrator(args.kind, fit)
    if args.out_params:
        calib.save_params(params, args.out_params)
    _evaluate_to(target, args.out_dir, "one_minus_confidence",
                 probs=calib.apply_calibrator(params, target))
    return 0


def cmd_perturb(args) -> int:
    batch = read_dump(args.dump)
    write_dump(_toynet().perturb(batch, args.kind, args.magnitude, args.seed), args.out)
    return 0


def cmd_report(args) -> int:
    _evaluate_to(read_dump(args.dump), args.out_dir, "one_minus_confidence")
    return 0


def build_parser() -> argparse.ArgumentParser:
    modes = ("baseline", "hau", "dul", "mcd", "reliocc")
    p = argparse.ArgumentParser(prog="occrel", description="Voxel occupancy reliability toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scenes", help="generate seeded synthetic train/val/test dumps")
    s.add_argument("--config", help="TOML scene config (all keys optional)")
    s.add_argument("--seed", type=int, default=REFERENCE_SEED)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_gen_scenes)

    s = sub.add_parser("train", help="train the toy network and dump test predictions")
    s.add_argument("--data", required=True, help="directory written by gen-scenes")
    s.add_argument("--mode", choices=modes, default="baseline")
    s.add_argument("--epochs", type=int, default=TrainConfig().epochs)
    s.add_argument("--seed", type=int, default=REFERENCE_SEED)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--out-model", help="network weights (JSON)")
    s.add_argument("--out-dump", required=True, help="test-split prediction dump")
    s.add_argument("--out-val-dump", help="also dump val-split predictions")
    s.add_argument("--out-curve", help="per-epoch loss curve CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="run a saved network on a scene dump")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="scene dump with input features")
    s.add_argument("--mode", choices=modes, default="baseline")
    s.add_argument("--seed", type=int, default=REFERENCE_SEED)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="metrics, reliability diagrams and rejection curves")
    s.add_argument("--dump", required=True)
    s.add_argument("--uncertainty", choices=("conf", "sigma"), default="conf")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("calibrate", help="fit a calibrator on one dump and evaluate on another")
    s.add_argument("--kind", choices=calib.KINDS, required=True)
    s.add_argument("--fit-dump", required=True)
    s.add_argument("--apply-dump", required=True)
    s.add_argument("--out-params")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("perturb", help="corrupt a dump")
    s.add_argument("--dump", required=True)
    s.add_argument("--kind", choices=_perturb_kinds(), required=True)
    s.add_argument("--magnitude", type=float, required=True)
    s.add_argument("--seed", type=int, default=REFERENCE_SEED)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("report", help="write CSV and SVG reports for a dump")
    s.add_argument("--dump", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_report)
    return p


def _perturb_kinds():
    from .toynet.perturb import PERTURB_KINDS
    return PERTURB_KINDS


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DumpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, RuntimeError, OSError, MetricUndefined) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
