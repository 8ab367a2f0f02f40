"""Command-line front door: train, evaluate, sweep, extract-ldp, gen-synth.

Every run writes an effective-config echo (config.json) into its output
directory; re-feeding that file reproduces the run bit for bit. Exit
codes: 0 ok, 2 usage/config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import os

# honor the thread cap before numpy spins up its BLAS pools
_threads = os.environ.get("LSSAT_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as dt
from . import ldp as ldp_mod
from .metrics import MetricsError, aggregate_sweep
from .model import Model, ModelError
from .training import (ConfigError, ExperimentConfig, NumericFailure,
                       run_experiment, run_sweep)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path,
                        help="JSON file mirroring the experiment config")
    group = parser.add_argument_group("config overrides (win over --config)")
    group.add_argument("--triplet", help="mask:reconstruct:classify, e.g. "
                                         "rgb:ldp:rgb or rgb:rgb+ldp:rgb")
    group.add_argument("--preset")
    group.add_argument("--lambda", "--loss-lambda", dest="loss_lambda",
                       type=float, help="classification weight in the joint "
                                        "loss")
    group.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    group.add_argument("--patch-size", dest="patch_size", type=int)
    group.add_argument("--image-size", dest="image_size", type=int)
    group.add_argument("--batch-size", dest="batch_size", type=int)
    group.add_argument("--epochs", type=int)
    group.add_argument("--lr-max", dest="lr_max", type=float)
    group.add_argument("--lr-min", dest="lr_min", type=float)
    group.add_argument("--weight-decay", dest="weight_decay", type=float)
    group.add_argument("--drop-path", dest="drop_path", type=float)
    group.add_argument("--ldp-k", dest="ldp_k", type=int)
    group.add_argument("--num-classes", dest="num_classes", type=int)
    group.add_argument("--seed", type=int)
    group.add_argument("--shared-encoder", dest="shared_encoder",
                       type=lambda s: s.lower() in ("1", "true", "yes"))


_CONFIG_FIELDS = ("triplet", "preset", "loss_lambda", "mask_ratio",
                  "patch_size", "image_size", "batch_size", "epochs",
                  "lr_max", "lr_min", "weight_decay", "drop_path", "ldp_k",
                  "num_classes", "seed", "shared_encoder")


def effective_config(args) -> ExperimentConfig:
    base = {}
    if args.config:
        base = ExperimentConfig.from_json_file(args.config).to_dict()
    for name in _CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            base[name] = value
    return ExperimentConfig.from_dict(base)


def _add_dataset_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--dataset", default="synth",
                        help="'synth' or a directory with labels.csv")
    parser.add_argument("--synth-n", type=int, default=250,
                        help="samples per class for the synthetic dataset")
    parser.add_argument("--synth-families", default=None,
                        help="comma-separated texture families, e.g. "
                             "raw-noise,smooth-noise")
    parser.add_argument("--split", default="0.8,0.1,0.1",
                        help="train,val,test fractions")
    parser.add_argument("--split-seed", type=int, default=0)


def load_splits(args, config: ExperimentConfig):
    if args.dataset == "synth":
        families = tuple(args.synth_families.split(",")) \
            if args.synth_families else None
        ds = dt.generate_synthetic(args.synth_n, classes=config.num_classes,
                                   size=config.image_size, seed=args.split_seed,
                                   families=families)
    else:
        ds = dt.load_dataset(args.dataset, image_size=config.image_size,
                             num_classes=config.num_classes)
    fractions = [float(x) for x in args.split.split(",")]
    spec = dt.SplitSpec(*fractions, seed=args.split_seed)
    return dt.split(ds, spec, require_all=False)


def _write_outputs(out_dir: Path, config: ExperimentConfig, report,
                   model=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True))
    (out_dir / "report.json").write_text(report.to_json())
    if model is not None:
        model.save_checkpoint(out_dir / "model.lssat")


def cmd_train(args) -> int:
    config = effective_config(args)
    splits = load_splits(args, config)
    report, model = run_experiment(config, splits)
    _write_outputs(args.out, config, report, model)
    print(f"train: preset={config.preset} triplet={config.triplet.name} "
          f"avg_acc={report.average_accuracy:.4f} auc={report.auc:.4f} "
          f"-> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .training import evaluate_model
    model = Model.load_checkpoint(args.checkpoint)
    config = effective_config(args)
    if args.preset and args.preset != model.preset.name:
        raise ConfigError(f"checkpoint was trained with preset "
                          f"{model.preset.name!r}, not {args.preset!r}")
    overrides = dict(preset=model.preset.name,
                     image_size=model.image_size,
                     patch_size=model.patch_size,
                     num_classes=model.num_classes,
                     shared_encoder=model.shared_encoder)
    config = ExperimentConfig.from_dict({**config.to_dict(), **overrides})
    _, _, test = load_splits(args, config)
    avg, per_class, roc_points, auc_value = evaluate_model(model, test, config)
    from .metrics import RunReport
    report = RunReport(config=config.to_dict(), per_class_accuracy=per_class,
                       average_accuracy=avg,
                       roc_points=[tuple(p) for p in np.asarray(roc_points)],
                       auc=auc_value, final_losses={}, wall_clock_seconds=0.0,
                       seed=config.seed).validate()
    _write_outputs(args.out, config, report)
    print(f"evaluate: avg_acc={avg:.4f} auc={auc_value:.4f} -> {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = effective_config(args)
    presets = args.presets.split(",")
    splits = load_splits(args, config)
    jobs = args.jobs
    if _threads:
        jobs = max(1, min(jobs, int(_threads)))
    grid = run_sweep(config, presets, splits, seed=args.seed, jobs=jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(
        json.dumps({**config.to_dict(), "presets": presets,
                    "seed": args.seed}, indent=2, sort_keys=True))
    paths = aggregate_sweep(grid, args.out)
    rows = len(grid.triplets) * len(presets)
    print(f"sweep: {rows} cells -> {paths['csv']}")
    return EXIT_OK


def cmd_extract_ldp(args) -> int:
    img = dt.read_image(args.input)
    if img.ndim == 3:
        w = ldp_mod.LUMA_WEIGHTS
        gray = w[0] * img[:, :, 0] + w[1] * img[:, :, 1] + w[2] * img[:, :, 2]
        img = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    codes = ldp_mod.ldp_image(img, k=args.k).codes
    dt.write_netpbm(args.output, codes)
    print(f"extract-ldp: {args.input} -> {args.output} (k={args.k})")
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    families = tuple(args.families.split(",")) if args.families else None
    ds = dt.generate_synthetic(args.n_per_class, classes=args.classes,
                               size=args.size, seed=args.seed,
                               families=families)
    csv_path = dt.save_dataset(ds, args.out)
    print(f"gen-synth: {len(ds)} samples -> {csv_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lssat",
        description="joint classification + masked texture reconstruction "
                    "benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one experiment")
    _add_config_flags(p_train)
    _add_dataset_flags(p_train)
    p_train.add_argument("--out", type=Path, default=Path("runs/train"))
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    _add_config_flags(p_eval)
    _add_dataset_flags(p_eval)
    p_eval.add_argument("--out", type=Path, default=Path("runs/evaluate"))
    p_eval.set_defaults(fn=cmd_evaluate)

    p_sweep = sub.add_parser("sweep",
                             help="all five configuration triplets x presets")
    _add_config_flags(p_sweep)
    _add_dataset_flags(p_sweep)
    p_sweep.add_argument("--presets", default="toy-b,toy-l,toy-h")
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--out", type=Path, default=Path("runs/sweep"))
    p_sweep.set_defaults(fn=cmd_sweep)

    p_ldp = sub.add_parser("extract-ldp",
                           help="write the LDP-code image of an image file")
    p_ldp.add_argument("input", type=Path)
    p_ldp.add_argument("output", type=Path)
    p_ldp.add_argument("--k", type=int, default=3)
    p_ldp.set_defaults(fn=cmd_extract_ldp)

    p_gen = sub.add_parser("gen-synth",
                           help="write a synthetic texture dataset to disk")
    p_gen.add_argument("--out", type=Path, required=True)
    p_gen.add_argument("--n-per-class", type=int, default=50)
    p_gen.add_argument("--classes", type=int, default=2)
    p_gen.add_argument("--size", type=int, default=32)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--families", default=None)
    p_gen.set_defaults(fn=cmd_gen_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "sweep" and args.seed is None:
        parser.error("sweep requires an explicit --seed")
    try:
        return args.fn(args)
    except NumericFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (dt.DataError, ldp_mod.LdpError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ModelError, MetricsError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
