"""Command line entry point: ``mtseg {synth,train,sweep,evaluate,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import config as cfgmod
from .dataio import SynthConfig, load_dataset, save_dataset, synth_generate
from .experiments import (
    LABELLED_FRACTIONS,
    UNLABELLED_FRACTIONS,
    Cell,
    evaluate_network,
    load_sweep,
    make_folds,
    make_grid,
    report,
    run_fold,
    run_sweep,
)
from .metrics import write_records
from .segnet import load_checkpoint

log = logging.getLogger("mtseg")


def _size(raw: str | None):
    if not raw:
        return None
    w, h = (int(x) for x in raw.split(","))
    return (w, h)


def _load(args) -> tuple[dict, object]:
    values = cfgmod.read_config(args.config) if args.config else {}
    cfg = cfgmod.apply_config(cfgmod.desk_profile(), values)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "iterations", None) is not None:
        cfg = replace(cfg, iterations=args.iterations)
    return values, cfg


def _data_root(args, values) -> Path:
    root = args.data or values.get("data.root")
    if not root:
        raise ValueError("no dataset given: pass --data or set data.root in the config")
    return Path(root)


def cmd_synth(args) -> None:
    values = cfgmod.read_config(args.config) if args.config else {}
    sc = cfgmod.apply_fields(SynthConfig(), cfgmod.section(values, "synth"), "synth.")
    overrides = {k: v for k, v in (("groups", args.groups), ("frames", args.frames), ("labelled", args.labelled),
                                   ("height", args.height), ("width", args.width)) if v is not None}
    sc = replace(sc, **overrides)
    ds = synth_generate(sc, seed=args.seed or 0)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} frames in {len(ds.group_ids)} groups to {args.out}")


def cmd_train(args) -> None:
    values, cfg = _load(args)
    ds = load_dataset(_data_root(args, values))
    plans = make_folds(ds)
    if not 0 <= args.fold < len(plans):
        raise ValueError(f"fold {args.fold} out of range (dataset has {len(plans)} folds)")
    cell = Cell(args.mode, args.labelled_frac, args.unlabelled_frac)
    run_dir = Path(args.out) / cell.cell_id / f"fold{args.fold}"
    (run_dir.parent).mkdir(parents=True, exist_ok=True)
    (run_dir.parent / "cell.json").write_text(json.dumps(asdict(cell), sort_keys=True))
    target = _size(args.target_size or values.get("eval.target_size"))
    recs = run_fold(ds, plans[args.fold], cell, cfg, run_dir, target)
    write_records(recs, run_dir / "metrics.csv")
    print(f"{cell.cell_id} fold {args.fold}: {len(recs)} test frames -> {run_dir}")


def cmd_sweep(args) -> None:
    values, cfg = _load(args)
    ds = load_dataset(_data_root(args, values))
    sweep = cfgmod.section(values, "sweep")
    labelled = cfgmod.float_list(sweep["labelled_fractions"]) if "labelled_fractions" in sweep else LABELLED_FRACTIONS
    unlabelled = (
        cfgmod.float_list(sweep["unlabelled_fractions"]) if "unlabelled_fractions" in sweep else UNLABELLED_FRACTIONS
    )
    include_sl = cfgmod.convert_value(sweep.get("include_sl", "true"), True)
    folds_raw = args.folds or sweep.get("folds")
    folds = [int(x) for x in folds_raw.split(",")] if folds_raw else None
    workers = args.workers or int(sweep.get("workers", 1))
    out = args.out or sweep.get("out", "runs")
    res = run_sweep(
        ds, make_grid(labelled, unlabelled, include_sl), cfg, out, folds, workers,
        _size(values.get("eval.target_size")),
    )
    n = sum(len(v) for v in res.records.values())
    print(f"sweep: {len(res.cells)} cells, {n} records, {len(res.failures)} failures -> {out}")
    if res.failures:
        for cell_id, fold, msg in res.failures:
            print(f"  failed {cell_id} fold {fold}: {msg}", file=sys.stderr)


def cmd_evaluate(args) -> None:
    values, _ = _load(args)
    ds = load_dataset(_data_root(args, values))
    net, header = load_checkpoint(args.checkpoint)
    plan = make_folds(ds)[args.fold]
    recs = evaluate_network(
        net, ds.group(plan.test_group), args.run_id, plan.fold, _size(args.target_size or values.get("eval.target_size"))
    )
    write_records(recs, args.out)
    print(f"evaluated {len(recs)} frames of {plan.test_group} (checkpoint step {header['step']}) -> {args.out}")


def cmd_report(args) -> None:
    written = report(load_sweep(args.input), args.out, args.pairing)
    for p in written:
        print(p)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="base random seed")

    p = argparse.ArgumentParser(prog="mtseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic grouped dataset")
    s.add_argument("--groups", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--labelled", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train and evaluate one cell on one fold")
    s.add_argument("--data")
    s.add_argument("--mode", choices=["SL", "MT"], default="MT")
    s.add_argument("--labelled-frac", type=float, default=1.0)
    s.add_argument("--unlabelled-frac", type=float, default=1.0)
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--iterations", type=int)
    s.add_argument("--target-size", help="evaluation size as WIDTH,HEIGHT")
    s.add_argument("--out", default="runs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", parents=[common], help="run the labelled x unlabelled grid over all folds")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--folds", help="comma-separated fold ids (default: all)")
    s.add_argument("--workers", type=int)
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a fold's test group")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--run-id", default="eval")
    s.add_argument("--target-size", help="evaluation size as WIDTH,HEIGHT")
    s.add_argument("--out", default="metrics.csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", parents=[common], help="aggregate a runs directory into tables and figures")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", default="figs")
    s.add_argument("--pairing", choices=["frame", "fold"], default="frame", help="Wilcoxon pairing unit")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"mtseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
