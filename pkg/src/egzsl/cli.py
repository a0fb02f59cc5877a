"""Command line entry point: ``egzsl {synth,base-train,evolve,ablate,report}``.

Exit codes: 0 success, 1 runtime or protocol error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import harness
from .data import SynthConfig, load_bundle, load_checkpoint, save_bundle, save_checkpoint, synth_generate
from .errors import EGZSLError
from .evolver import AblationFlags, EvolverConfig
from .model import BaseTrainConfig, CompatibilityModel, predict_batch, train_base


def _int_at_least(lo):
    def parse(text):
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
        if value < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}, got {value}")
        return value
    return parse


def _float_in(lo, hi, lo_open=False, hi_open=False):
    def parse(text):
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
        ok_lo = value > lo if lo_open else value >= lo
        ok_hi = value < hi if hi_open else value <= hi
        if not (ok_lo and ok_hi):
            lb, rb = "(" if lo_open else "[", ")" if hi_open else "]"
            raise argparse.ArgumentTypeError(f"must lie in {lb}{lo}, {hi}{rb}, got {value}")
        return value
    return parse


positive_int = _int_at_least(1)
nonneg_int = _int_at_least(0)
nonneg_float = _float_in(0.0, float("inf"))
positive_float = _float_in(0.0, float("inf"), lo_open=True)
unit_open_right = _float_in(0.0, 1.0, hi_open=True)
unit_open_left = _float_in(0.0, 1.0, lo_open=True)


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_synth(args) -> int:
    config = SynthConfig(
        num_seen=args.num_seen, num_unseen=args.num_unseen, d_x=args.dx, d_a=args.da,
        base_per_class=args.base_per_class, test_per_class=args.test_per_class,
        cluster_spread=args.spread, attribute_map_noise=args.map_noise,
        map_scale=args.map_scale, attribute_rank=args.attr_rank, seed=args.seed,
    )
    bundle = synth_generate(config)
    save_bundle(bundle, args.out)
    _print_json({"bundle": str(args.out), "n_samples": int(bundle.features.shape[0]),
                 "config": asdict(config)})
    return 0


def cmd_base_train(args) -> int:
    bundle = load_bundle(args.bundle)
    config = BaseTrainConfig(epochs=args.epochs, minibatch=args.minibatch,
                             learning_rate=args.lr, weight_decay=args.weight_decay, seed=args.seed)
    model = train_base(bundle.base_features, bundle.base_labels, bundle.attribute_table(),
                       bundle.seen_classes, config)
    save_checkpoint(model, args.out)
    acc = float(np.mean(predict_batch(model, bundle.base_features) == bundle.base_labels))
    _print_json({"checkpoint": str(args.out), "seen_train_accuracy": acc, "config": asdict(config)})
    return 0


def _evolver_config(args) -> EvolverConfig:
    return EvolverConfig(lam=args.lam, tau=args.tau, m1=args.m1, m2=args.m2,
                         learning_rate=args.lr, epochs_per_stage=args.epochs_per_stage,
                         threshold_timing=args.threshold_timing)


def _flags(args) -> AblationFlags:
    if args.erm:
        return AblationFlags.erm()
    return AblationFlags(
        disable_momentum_model=args.no_momentum,
        disable_class_selection=args.no_class_sel,
        disable_data_selection=args.no_data_sel,
        fixed_threshold=args.fixed_threshold is not None,
        fixed_threshold_value=0.8 if args.fixed_threshold is None else args.fixed_threshold,
    )


def cmd_evolve(args) -> int:
    bundle = load_bundle(args.bundle)
    base = load_checkpoint(args.checkpoint)
    if base.class_count != bundle.n_classes or base.feature_dim != bundle.feature_dim:
        raise EGZSLError(
            f"checkpoint is {base.class_count}x{base.feature_dim}, bundle needs "
            f"{bundle.n_classes}x{bundle.feature_dim}"
        )
    config, flags = _evolver_config(args), _flags(args)
    result = harness.run_protocol(bundle, base, config, flags, args.seeds, args.stage_size,
                                  erm=args.erm, jobs=args.jobs, snapshot_stride=args.curve_stride)
    static = harness.evaluate_model(base, bundle.test_features, bundle.test_labels,
                                    bundle.seen_classes, bundle.unseen_classes)
    extra = {"base_model": static.metrics(),
             "inputs": {"bundle": Path(args.bundle).name, "checkpoint": Path(args.checkpoint).name}}
    doc = harness.report_document(result, args.stage_size, config, flags, extra=extra)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(harness.dumps_report(doc))
    (out / "stages.csv").write_text(harness.stage_csv(result))
    if args.curve_stride:
        curves = {}
        for seed, run in zip(result.seeds, result.runs):
            curves[seed] = harness.evolution_curve(run.snapshots, bundle.test_features, bundle.test_labels,
                                                   bundle.seen_classes, bundle.unseen_classes)
            if args.snapshots:
                snap_dir = out / "snapshots"
                snap_dir.mkdir(exist_ok=True)
                for t, W in run.snapshots.items():
                    save_checkpoint(CompatibilityModel(W), snap_dir / f"seed{seed}_t{t:05d}.ckpt")
        (out / "curve.csv").write_text(harness.curve_csv(curves))
    _print_json({"mean": result.mean, "std": result.std, "seeds": result.seeds,
                 "stage_size": args.stage_size, "out": str(out)})
    return 0


def cmd_ablate(args) -> int:
    bundle = load_bundle(args.bundle)
    base = load_checkpoint(args.checkpoint)
    config = _evolver_config(args)
    table = harness.run_ablation_suite(bundle, base, config, args.seeds, args.stage_size,
                                       include_erm=args.include_erm, jobs=args.jobs)
    doc = {
        "schema_version": harness.REPORT_SCHEMA_VERSION,
        "prng": harness.PRNG_ID,
        "seeds": [int(s) for s in args.seeds],
        "stage_size": args.stage_size,
        "config": asdict(config),
        "rows": {name: {"mean": rep.mean, "std": rep.std,
                        "per_seed": [dict(seed=s, **m) for s, m in zip(rep.seeds, rep.per_seed)]}
                 for name, rep in table.items()},
    }
    if args.out:
        Path(args.out).write_text(harness.dumps_report(doc))
    print(harness.format_table(table))
    return 0


def _load_rows(paths, merge: bool) -> dict:
    rows = {}
    merged = []
    for p in paths:
        doc = json.loads(Path(p).read_text())
        if "per_seed" not in doc:
            raise EGZSLError(f"{p} is not an evolve report")
        per_seed = [{k: e[k] for k in harness.METRICS} for e in doc["per_seed"]]
        if merge:
            merged.extend(per_seed)
        else:
            rows[Path(p).stem if Path(p).name != "report.json" else Path(p).parent.name] = per_seed
    if merge:
        rows["merged"] = merged
    return rows


def cmd_report(args) -> int:
    rows = _load_rows(args.reports, args.merge)
    table = {}
    for name, per_seed in rows.items():
        mean, std = harness.aggregate(per_seed)
        table[name] = harness.ProtocolReport(list(range(len(per_seed))), per_seed, mean, std)
    if args.csv:
        cols = ["name", "n_seeds"] + [f"{k}_{s}" for k in harness.METRICS for s in ("mean", "std")]
        print(",".join(cols))
        for name, rep in table.items():
            vals = [name, str(len(rep.per_seed))]
            vals += [repr(getattr(rep, s)[k]) for k in harness.METRICS for s in ("mean", "std")]
            print(",".join(vals))
    else:
        print(harness.format_table(table))
    return 0


def _add_evolver_args(p) -> None:
    defaults = EvolverConfig()
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.add_argument("--checkpoint", required=True, help="base model checkpoint")
    p.add_argument("--stage-size", type=positive_int, default=100)
    p.add_argument("--seeds", type=nonneg_int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--lam", type=nonneg_float, default=defaults.lam)
    p.add_argument("--tau", type=unit_open_left, default=defaults.tau)
    p.add_argument("--m1", type=unit_open_right, default=defaults.m1)
    p.add_argument("--m2", type=unit_open_right, default=defaults.m2)
    p.add_argument("--lr", type=nonneg_float, default=defaults.learning_rate)
    p.add_argument("--epochs-per-stage", type=positive_int, default=defaults.epochs_per_stage)
    p.add_argument("--threshold-timing", choices=["post", "pre"], default=defaults.threshold_timing)
    p.add_argument("--jobs", type=positive_int, default=1, help="parallel seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egzsl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic bundle")
    s = SynthConfig()
    p.add_argument("--seed", type=nonneg_int, default=s.seed)
    p.add_argument("--num-seen", type=positive_int, default=s.num_seen)
    p.add_argument("--num-unseen", type=positive_int, default=s.num_unseen)
    p.add_argument("--dx", type=positive_int, default=s.d_x)
    p.add_argument("--da", type=positive_int, default=s.d_a)
    p.add_argument("--base-per-class", type=positive_int, default=s.base_per_class)
    p.add_argument("--test-per-class", type=positive_int, default=s.test_per_class)
    p.add_argument("--spread", type=positive_float, default=s.cluster_spread)
    p.add_argument("--map-noise", type=nonneg_float, default=s.attribute_map_noise)
    p.add_argument("--map-scale", type=positive_float, default=s.map_scale)
    p.add_argument("--attr-rank", type=positive_int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("base-train", help="train the base compatibility model")
    b = BaseTrainConfig()
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=positive_int, default=b.epochs)
    p.add_argument("--minibatch", type=positive_int, default=b.minibatch)
    p.add_argument("--lr", type=positive_float, default=b.learning_rate)
    p.add_argument("--weight-decay", type=nonneg_float, default=b.weight_decay)
    p.add_argument("--seed", type=nonneg_int, default=b.seed)
    p.set_defaults(func=cmd_base_train)

    p = sub.add_parser("evolve", help="run the streaming protocol")
    _add_evolver_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-momentum", action="store_true")
    p.add_argument("--no-class-sel", action="store_true")
    p.add_argument("--no-data-sel", action="store_true")
    p.add_argument("--fixed-threshold", type=unit_open_left, nargs="?", const=0.8, default=None)
    p.add_argument("--erm", action="store_true", help="plain pseudo-label ERM baseline")
    p.add_argument("--curve-stride", type=positive_int, default=None,
                   help="snapshot every N stages and write curve.csv (diagnostic)")
    p.add_argument("--snapshots", action="store_true", help="also write snapshot checkpoints")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("ablate", help="full model and the four ablations")
    _add_evolver_args(p)
    p.add_argument("--include-erm", action="store_true")
    p.add_argument("--out", default=None, help="write the table as JSON")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="mean±std table across report files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--merge", action="store_true", help="pool all per-seed rows into one")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "evolve":
        chosen = args.no_data_sel + (args.fixed_threshold is not None)
        if chosen > 1:
            parser.error("--no-data-sel and --fixed-threshold are exclusive")
    try:
        return args.func(args)
    except (EGZSLError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"egzsl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
