"""Command line driver.

Verbs:
  run             full pipeline: data, surrogate, craft, defense, victims, report
  heatmap         single-view crafting grid over viewpoint bins
  ablate          sweep one axis (budget, epsilon, retrain, known-variants)
  proplab         numerical check of the admissible-ball guarantee
  export-poisons  craft and write the poison file plus manifest, no victims
  apply-defense   transform a binary record file with the configured defense

Exit codes: 0 success, 2 config or argument validation failure, 3 runtime
failure inside the pipeline.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import config as configmod
from . import craft, datapipe, defense, proplab, report, runner, victim
from .seeding import stage_seed

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _add_common(sub, *, config_required=True):
    sub.add_argument("--config", required=config_required,
                     help="experiment config (JSON)")
    sub.add_argument("--seed", type=int, default=None,
                     help="master seed override")
    sub.add_argument("--out", default=None, help="output directory override")
    sub.add_argument("--force", action="store_true",
                     help="overwrite an existing report for this fingerprint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poisonlab",
        description="craft and evaluate clean-label training-set poisons")
    verbs = parser.add_subparsers(dest="verb", required=True)

    p = verbs.add_parser("run", help="run one full experiment")
    _add_common(p)
    p.add_argument("--repeats", type=int, default=None,
                   help="victim trainings per experiment")
    p.add_argument("--loss", choices=craft.LOSS_TAGS, default=None,
                   help="matching loss override")

    p = verbs.add_parser("heatmap", help="single-view crafting grid")
    _add_common(p)
    p.add_argument("--bins", type=int, default=4, help="viewpoint bins")
    p.add_argument("--loss", choices=craft.LOSS_TAGS, default=None)

    p = verbs.add_parser("ablate", help="sweep one config axis")
    _add_common(p)
    p.add_argument("--axis", required=True,
                   choices=("budget", "epsilon", "retrain", "known-variants"))
    p.add_argument("--values", required=True,
                   help="comma-separated sweep values")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--loss", choices=craft.LOSS_TAGS, default=None)

    p = verbs.add_parser("proplab", help="admissible-ball numerical check")
    p.add_argument("--dimension", type=int, default=50)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--collinear", action="store_true",
                   help="also check the collinear radius simplification")
    p.add_argument("--out", default=None,
                   help="directory for the JSON summary")
    p.add_argument("--force", action="store_true")

    p = verbs.add_parser("export-poisons",
                         help="craft poisons and write the export, no victims")
    _add_common(p)
    p.add_argument("--loss", choices=craft.LOSS_TAGS, default=None)

    p = verbs.add_parser("apply-defense",
                         help="transform a record file with the config defense")
    _add_common(p)
    p.add_argument("--input", required=True, help="binary record file")
    p.add_argument("--output", required=True, help="destination record file")
    return parser


def _load_config(args) -> configmod.ExperimentConfig:
    cfg = configmod.load_config(args.config)
    raw = configmod.canonical_dict(cfg)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out_dir"] = args.out
    if getattr(args, "repeats", None) is not None:
        raw["repeats"] = args.repeats
    if getattr(args, "loss", None) is not None:
        raw["craft"]["loss"] = args.loss
    return configmod.from_dict(raw)


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    try:
        result = runner.run_pipeline(cfg)
    except runner.StageFailure as exc:
        dest = report.write_failure_manifest(cfg, cfg.seed, exc.stage, str(exc))
        print(f"error: {exc}", file=sys.stderr)
        print(f"partial-results manifest: {dest}", file=sys.stderr)
        return EXIT_RUNTIME
    paths = report.write_experiment_report(result, force=args.force)
    agg = result.aggregate
    print(f"run dir: {paths.run_dir}")
    print(f"digest: {paths.digest}")
    print(f"mean validation accuracy: {agg['mean_validation_accuracy']:.4f}")
    print(f"mean flip rate known/held-out: "
          f"{agg['mean_sr_known']:.4f}/{agg['mean_sr_heldout']:.4f}")
    return EXIT_OK


def _cmd_heatmap(args) -> int:
    cfg = _load_config(args)
    try:
        matrix, edges, columns, _ = runner.run_heatmap_matrix(cfg, args.bins)
    except runner.StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    paths = report.write_heatmap_report(matrix, edges, columns, cfg, cfg.seed,
                                        force=args.force)
    print(f"run dir: {paths.run_dir}")
    print(f"digest: {paths.digest}")
    diag = sum(int(matrix[i, i]) for i in range(matrix.shape[0]))
    print(f"heatmap {matrix.shape[0]}x{matrix.shape[1]}, diagonal total {diag}")
    return EXIT_OK


def _parse_values(text: str, axis: str):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("--values is empty")
    if axis in ("retrain", "known-variants"):
        return [int(p) for p in parts]
    return [float(p) for p in parts]


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    values = _parse_values(args.values, args.axis)
    rows = runner.run_ablation_rows(cfg, args.axis, values)
    paths = report.write_ablation_report(rows, args.axis, cfg, force=args.force)
    print(f"run dir: {paths.run_dir}")
    for row in rows:
        if "error" in row:
            print(f"  {args.axis}={row['value']}: FAILED "
                  f"({row['failed_stage']})")
        else:
            print(f"  {args.axis}={row['value']}: held-out flip rate "
                  f"{row['mean_sr_heldout']:.4f}")
    failures = sum(1 for row in rows if "error" in row)
    return EXIT_RUNTIME if failures == len(rows) else EXIT_OK


def _cmd_proplab(args) -> int:
    summary = proplab.run_trials(
        dimension=args.dimension, instances=args.instances,
        probes=args.probes, seed=args.seed, collinear=args.collinear)
    line = (f"instances {summary['instances']}, probes {summary['total_probes']}, "
            f"pass rate {summary['pass_rate']:.4f}")
    if args.out:
        dest = report.write_proplab_report(summary, args.out, force=args.force)
        print(f"summary: {dest}")
    print(line)
    return EXIT_OK if summary["pass_rate"] == 1.0 else EXIT_RUNTIME


def _cmd_export_poisons(args) -> int:
    cfg = _load_config(args)
    master = cfg.seed
    try:
        world = runner.build_world(cfg, master)
        surrogate = runner.train_surrogate(cfg, world, master)
        result = runner.craft_poisons(cfg, world, surrogate, master)
    except runner.StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    run_dir = report.run_directory(cfg, master)
    dest = os.path.join(run_dir, "poisons.bin")
    if os.path.exists(dest) and not args.force:
        print(f"error: {dest} already exists; pass --force to overwrite",
              file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(run_dir, exist_ok=True)
    craft.save_poisons(result.poison, dest,
                       config=cfg.craft.config(stage_seed(master, "craft")))
    print(f"poisons: {dest}")
    print(f"manifest: {dest}.json")
    print(f"rows: {len(result.poison.ids)}, final matching loss "
          f"{result.loss_trace[-1]:.6f}")
    return EXIT_OK


def _cmd_apply_defense(args) -> int:
    cfg = _load_config(args)
    d = cfg.data
    dataset = datapipe.load_records(args.input, d.image_size, d.image_size,
                                    d.channels, d.classes)
    transformed = defense.apply_policy(dataset, cfg.defense.policy())
    if os.path.exists(args.output) and not args.force:
        print(f"error: {args.output} already exists; pass --force to overwrite",
              file=sys.stderr)
        return EXIT_CONFIG
    datapipe.save_records(transformed, args.output)
    print(f"wrote {len(transformed.images)} records to {args.output} "
          f"(defense: {cfg.defense.kind})")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "heatmap": _cmd_heatmap,
    "ablate": _cmd_ablate,
    "proplab": _cmd_proplab,
    "export-poisons": _cmd_export_poisons,
    "apply-defense": _cmd_apply_defense,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.verb](args)
    except (ValueError, FileNotFoundError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except victim.TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except craft.CraftDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
