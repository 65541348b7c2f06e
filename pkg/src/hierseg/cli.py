"""Command-line entry point: dataset generation, training, evaluation,
ablations, and plotting.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
The environment variable ``HIERSEG_OUT_ROOT`` sets the default output root
(default ``runs``). Outputs are timestamp-free, so rerunning a command with
identical inputs and seeds reproduces them byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import scenegen
from .metrics import MetricsReport, evaluate
from .plots import plot_per_class_iou, plot_training_log
from .protobank import gini
from .scenegen import ImbalanceProfile, generate_scene, load_dataset, write_dataset
from .taxonomy import BUILTIN_TAXONOMIES, HierarchySpec, load_builtin
from .trainer import (
    ABLATION_SWITCHES,
    ConfigError,
    NonFiniteLossError,
    TrainConfig,
    ablate,
    fit,
    load_checkpoint,
    restore_model,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _out_root() -> Path:
    return Path(os.environ.get("HIERSEG_OUT_ROOT", "runs"))


def _resolve_out(arg: str | None, default_name: str) -> Path:
    return Path(arg) if arg else _out_root() / default_name


def _load_taxonomy(arg: str) -> HierarchySpec:
    if arg in BUILTIN_TAXONOMIES:
        return load_builtin(arg)
    path = Path(arg)
    if not path.exists():
        raise FileNotFoundError(
            f"taxonomy {arg!r} is neither a file nor a builtin name {BUILTIN_TAXONOMIES}"
        )
    return HierarchySpec.load(path)


def _parse_profile(arg: str, num_classes: int, seed: int) -> ImbalanceProfile:
    if arg == "uniform":
        return ImbalanceProfile.uniform(num_classes, seed=seed)
    if arg.startswith("long_tail"):
        head = 0.82
        if ":" in arg:
            head = float(arg.split(":", 1)[1])
        return ImbalanceProfile.long_tail(num_classes, head_mass=head, seed=seed)
    path = Path(arg)
    if not path.exists():
        raise ConfigError(
            f"profile {arg!r} is not 'uniform', 'long_tail[:head]', or a JSON file"
        )
    data = json.loads(path.read_text(encoding="utf-8"))
    try:
        return ImbalanceProfile(
            frequencies=tuple(data["frequencies"]), seed=int(data.get("seed", seed))
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"profile file must contain a 'frequencies' list: {exc}") from exc


def hash_inputs(paths: list[Path]) -> str:
    """Content hash over a set of input files; changes iff any byte changes."""
    digest = hashlib.sha256()
    for path in sorted(paths):
        digest.update(str(path.name).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _dataset_input_files(manifest_path: Path) -> list[Path]:
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    root = manifest_path.parent
    files = [manifest_path, root / manifest["taxonomy"]]
    files.extend(root / name for name in manifest["scenes"])
    return files


def cmd_generate(args: argparse.Namespace) -> int:
    if args.count < 1:
        raise ConfigError("count must be >= 1")
    spec = _load_taxonomy(args.taxonomy)
    profile = _parse_profile(args.profile, spec.class_counts[-1], args.seed)
    scenes = [
        generate_scene(
            spec, profile, args.points, seed=args.seed + i, feature_noise=args.feature_noise
        )
        for i in range(args.count)
    ]
    out_dir = _resolve_out(args.out, f"dataset-seed{args.seed}")
    frequencies = scenegen.dataset_frequencies(scenes, spec)
    gini_per_level = [gini(f) for f in frequencies]
    manifest_path = write_dataset(
        scenes,
        spec,
        out_dir,
        metadata={
            "count": args.count,
            "points": args.points,
            "seed": args.seed,
            "profile": args.profile,
            "feature_noise": args.feature_noise,
            "class_frequencies_per_level": [f.tolist() for f in frequencies],
            "gini_per_level": gini_per_level,
        },
    )
    print(f"wrote {len(scenes)} scenes to {manifest_path}")
    for level, value in enumerate(gini_per_level):
        print(f"gini level {level}: {value:.4f}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        raise FileNotFoundError(f"config file not found: {config_path}")
    config = TrainConfig.load(config_path, overrides=args.override)
    manifest_path = Path(args.dataset)
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    scenes, spec, _ = load_dataset(manifest_path)

    out_dir = _resolve_out(args.out, f"train-seed{config.seed}")
    out_dir.mkdir(parents=True, exist_ok=True)

    input_hash = hash_inputs([config_path] + _dataset_input_files(manifest_path))
    run_id = input_hash[:12]

    result = fit(scenes, spec, config, out_dir=out_dir, resume_from=args.resume)

    run_manifest = {
        "run_id": run_id,
        "input_hash": input_hash,
        "config": config.to_dict(),
        "dataset_manifest": str(manifest_path.resolve()),
        "outputs": {
            "checkpoint": str(result.checkpoint_path),
            "checkpoint_best": (
                str(result.best_checkpoint_path) if result.best_checkpoint_path else None
            ),
            "train_log": str(result.log_path),
        },
        "gates": result.gates,
        "best_avg_miou": result.best_avg_miou,
        "best_epoch": result.best_epoch,
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(run_manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"run {run_id}: best avg mIoU {100.0 * result.best_avg_miou:.2f} "
          f"at epoch {result.best_epoch}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    payload = load_checkpoint(args.checkpoint)
    model, _, _, ckpt_spec = restore_model(payload)
    scenes, spec, _ = load_dataset(Path(args.dataset))
    if ckpt_spec.class_counts != spec.class_counts:
        raise ConfigError(
            f"taxonomy mismatch: checkpoint taxonomy has class counts "
            f"{ckpt_spec.class_counts}, dataset taxonomy has {spec.class_counts}"
        )
    report = evaluate(model, scenes, spec)
    out_dir = _resolve_out(args.out, "eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "metrics_report.json"
    report.save(report_path)
    print(report.format_table())
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = TrainConfig.load(Path(args.config), overrides=args.override)
    scenes, spec, _ = load_dataset(Path(args.dataset))
    eval_scenes = None
    if args.eval_dataset:
        eval_scenes, eval_spec, _ = load_dataset(Path(args.eval_dataset))
        if eval_spec.class_counts != spec.class_counts:
            raise ConfigError(
                f"taxonomy mismatch: train dataset has class counts {spec.class_counts}, "
                f"eval dataset has {eval_spec.class_counts}"
            )
    switches = [s for s in args.switches.split(",") if s]
    report = ablate(scenes, spec, config, switches, eval_scenes=eval_scenes)

    out_dir = _resolve_out(args.out, f"ablate-seed{config.seed}")
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "ablation.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    print(f"{'variant':<12} {'avg mIoU(%)':>12} {'delta(%)':>10}")
    print(f"{'full':<12} {100.0 * report['full']['avg_miou']:>12.2f} {'':>10}")
    for name, data in report["variants"].items():
        delta = report["deltas_full_minus_variant"][name]["avg_miou"]
        print(f"{name:<12} {100.0 * data['avg_miou']:>12.2f} {100.0 * delta:>+10.2f}")
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    if not args.reports:
        raise ConfigError("at least one report file is required")
    reports = [MetricsReport.load(path) for path in args.reports]
    names = (
        args.names.split(",") if args.names
        else [Path(p).parent.name or f"report{i}" for i, p in enumerate(args.reports)]
    )
    if len(names) != len(reports):
        raise ConfigError(f"{len(reports)} reports but {len(names)} names")
    out_dir = _resolve_out(args.out, "plots")
    paths = plot_per_class_iou(reports, names, out_dir)
    if args.log:
        paths.append(plot_training_log(args.log, out_dir))
    for path in paths:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hierseg",
        description="Hierarchical point-cloud segmentation: generate, train, eval, ablate, plot.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic labeled dataset")
    p.add_argument("taxonomy", help=f"taxonomy JSON file or builtin: {', '.join(BUILTIN_TAXONOMIES)}")
    p.add_argument("--profile", default="uniform",
                   help="uniform | long_tail[:head_mass] | profile JSON file")
    p.add_argument("--count", type=int, default=8, help="number of scenes")
    p.add_argument("--points", type=int, default=2048, help="points per scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-noise", type=float, default=0.03)
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("config", help="training config JSON file")
    p.add_argument("dataset", help="dataset manifest JSON")
    p.add_argument("--out", default=None)
    p.add_argument("--override", action="append", default=[],
                   help="dotted config override, e.g. --override lambda=0")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train matched-seed variants with switches disabled")
    p.add_argument("config")
    p.add_argument("dataset")
    p.add_argument("--switches", default=",".join(ABLATION_SWITCHES),
                   help=f"comma-separated subset of {ABLATION_SWITCHES}")
    p.add_argument("--eval-dataset", default=None)
    p.add_argument("--override", action="append", default=[])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="plot per-class IoU and loss curves")
    p.add_argument("reports", nargs="+", help="metrics report JSON file(s)")
    p.add_argument("--names", default=None, help="comma-separated series names")
    p.add_argument("--log", default=None, help="train_log.jsonl for loss curves")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if exc.report is not None:
            print(json.dumps(exc.report.to_record()), file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
