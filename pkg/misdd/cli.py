#!/usr/bin/env python3

import sys

# Ensure the script is run with a compatible Python version.
if sys.version_info < (3, 11):
    print("Error: misdd requires Python 3.11 or newer.", file=sys.stderr)
    sys.exit(1)

from .context import RunContext
from .data_synth import CLASS_RECIPES, DatasetSpec, generate_dataset, load_dataset
from .logger import logger, setup_logger, format_log_message as flm
from .missing_config import MissingLevel, MissingType
from .model import load_model
from .runner import (
    ABLATIONS,
    CHECKPOINT_DIR,
    CellSpec,
    ExperimentGrid,
    RunSettings,
    ablation_name,
    read_run_manifest,
    run_eval,
    run_fewshot,
    run_grid,
    run_train,
)
from .scl_training import TrainConfig
from .text_branch import TextConfig
from .tools import parse_float_list, parse_int_list, parse_proportions, resolve_seed
from .version import VERSION
from .vision_encoder import EncoderConfig, WarmupConfig
from argparse import ArgumentParser, Namespace
from pathlib import Path
from typing import Callable
import secrets

MISSING_TYPES = [t.value for t in MissingType]
MISSING_LEVELS = [level.value for level in MissingLevel]


def _classes(text: str) -> tuple[str, ...]:
    """A class count (first N known classes) or a comma-separated list of names."""
    if text.strip().isdigit():
        count = int(text)
        known = list(CLASS_RECIPES)
        if not 1 <= count <= len(known):
            raise ValueError(f"--classes must be between 1 and {len(known)}, got {count}")
        return tuple(known[:count])
    return tuple(name.strip() for name in text.split(",") if name.strip())


def _k_shots(text: str) -> list[int | None]:
    shots: list[int | None] = []
    for item in text.split(","):
        item = item.strip()
        shots.append(None if item == "full" else int(item))
    return shots


def _context(args: Namespace, cell: str) -> RunContext:
    return RunContext({"id": secrets.token_hex(3), "cell": cell}, args.verbose, args.seed)


def _settings(args: Namespace, image_size: int) -> RunSettings:
    encoder = EncoderConfig(image_size=image_size, prompt_depth=args.prompt_depth)
    train = TrainConfig(
        lr=args.lr,
        epochs=args.epochs,
        image_size=image_size,
        seed=args.seed,
        use_ccp=not args.no_ccp,
        use_msp=not args.no_msp,
        use_map=not args.no_map,
        use_scl=not args.no_scl,
        skip_missing_terms=args.skip_missing_terms,
    )
    return RunSettings(
        encoder=encoder,
        text=TextConfig(),
        warmup=WarmupConfig(epochs=args.warmup_epochs),
        train=train,
        prompt_len=args.prompt_len,
        prompt_file=args.prompt_file,
        memory_bank=getattr(args, "memory_bank", False),
        export_heatmaps=getattr(args, "export_heatmaps", False),
    )


def cmd_generate(args: Namespace) -> int:
    spec = DatasetSpec(
        classes=_classes(args.classes),
        n_train_normal=args.train_normals,
        n_test_normal=args.test_normals,
        n_test_anomalous=args.test_anomalous,
        image_size=args.image_size,
        defect_mix=(
            parse_proportions(args.defect_mix)
            if args.defect_mix
            else DatasetSpec().defect_mix
        ),
        seed=args.seed,
    )
    generate_dataset(spec, args.out, args.workers, _context(args, "generate"))
    return 0


def cmd_train(args: Namespace) -> int:
    dataset = load_dataset(args.dataset)
    settings = _settings(args, args.image_size or dataset.image_size)
    cell = CellSpec(
        args.missing_type,
        args.eta,
        ablation_name(settings.train),
        args.seed,
        args.missing_level,
    )
    run_train(dataset, cell, settings, args.out, context=_context(args, cell.name))
    return 0


def cmd_eval(args: Namespace) -> int:
    manifest = read_run_manifest(args.run)
    dataset = load_dataset(args.dataset or manifest["dataset"])
    run_eval(
        args.run,
        dataset,
        args.missing_type,
        args.eta,
        args.missing_level,
        args.memory_bank,
        args.export_heatmaps,
        _context(args, "eval"),
    )
    return 0


def cmd_grid(args: Namespace) -> int:
    dataset = load_dataset(args.dataset)
    settings = _settings(args, args.image_size or dataset.image_size)
    grid = ExperimentGrid(
        missing_types=tuple(args.missing_types.split(",")),
        etas=tuple(parse_float_list(args.etas)),
        seeds=tuple(parse_int_list(args.seeds)) if args.seeds else (args.seed,),
        ablations=tuple(args.ablations.split(",")),
    )
    run_grid(
        args.dataset,
        grid,
        settings,
        args.out,
        args.missing_level,
        args.workers,
        args.log_file,
        _context(args, "grid"),
    )
    return 0


def cmd_params(args: Namespace) -> int:
    path = Path(args.checkpoint)
    if (path / CHECKPOINT_DIR).is_dir():
        path = path / CHECKPOINT_DIR
    model, _ = load_model(path)
    rows = model.parameter_table()
    total = sum(row.count for row in rows)
    print(f"{'Component':<16} {'Parameters':>12} {'Share':>8}  Status")
    for row in rows:
        share = 100.0 * row.count / total if total else 0.0
        status = "Learnable" if row.learnable else "Frozen"
        print(f"{row.component:<16} {row.count:>12,d} {share:>7.3f}%  {status}")
    learnable = sum(row.count for row in rows if row.learnable)
    learnable_share = 100.0 * learnable / total if total else 0.0
    print(f"{'Total':<16} {total:>12,d} {100.0:>7.3f}%")
    print(f"{'Learnable':<16} {learnable:>12,d} {learnable_share:>7.3f}%")
    return 0


def cmd_fewshot(args: Namespace) -> int:
    dataset = load_dataset(args.dataset)
    settings = _settings(args, args.image_size or dataset.image_size)
    run_fewshot(
        args.dataset,
        _k_shots(args.k_shot),
        settings,
        args.out,
        args.seed,
        args.missing_type,
        args.eta,
        args.missing_level,
        _context(args, "fewshot"),
    )
    return 0


def _add_model_flags(parser: ArgumentParser) -> None:
    group = parser.add_argument_group("Model Options")
    group.add_argument(
        "--epochs",
        type=int,
        default=TrainConfig.epochs,
        help="Training epochs [default: %(default)d]",
    )
    group.add_argument(
        "--lr",
        type=float,
        default=TrainConfig.lr,
        help="SGD learning rate [default: %(default)g]",
    )
    group.add_argument(
        "--warmup-epochs",
        type=int,
        default=WarmupConfig.epochs,
        help="Encoder warmup epochs [default: %(default)d]",
    )
    group.add_argument(
        "--image-size",
        type=int,
        default=None,
        help="Image side; must match the dataset [default: the dataset's]",
    )
    group.add_argument(
        "--prompt-depth",
        type=int,
        default=EncoderConfig.prompt_depth,
        help="Layers receiving prompts [default: %(default)d]",
    )
    group.add_argument(
        "--prompt-len",
        type=int,
        default=8,
        help="Tokens per prompt kind [default: %(default)d]",
    )
    group.add_argument(
        "--prompt-file",
        default=None,
        help="JSON file of text templates, classes and states",
    )
    group.add_argument(
        "--no-ccp",
        action="store_true",
        help="Disable the cross-modal consistency prompt",
    )
    group.add_argument(
        "--no-msp",
        action="store_true",
        help="Disable the modality-specific prompts",
    )
    group.add_argument("--no-map", action="store_true", help="Disable the missing-aware prompts")
    group.add_argument("--no-scl", action="store_true", help="Skip symmetric contrastive training")
    group.add_argument(
        "--skip-missing-terms",
        action="store_true",
        help="Drop loss terms of missing modalities",
    )


def _add_missing_flags(parser: ArgumentParser, defaults: bool = True) -> None:
    group = parser.add_argument_group("Missing Modality Options")
    group.add_argument(
        "--missing-type",
        choices=MISSING_TYPES,
        default=MissingType.NONE.value if defaults else None,
        help="Modality missing in part of the samples",
    )
    group.add_argument(
        "--eta",
        type=float,
        default=0.0 if defaults else None,
        help="Missing rate in [0, 1]",
    )
    group.add_argument(
        "--missing-level",
        choices=MISSING_LEVELS,
        default=MissingLevel.INPUT.value if defaults else None,
        help="Where the missing modality is zeroed",
    )


def _add_seed_flag(parser: ArgumentParser) -> None:
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Base seed [default: $MISDD_SEED or 0]",
    )


def _add_eval_flags(parser: ArgumentParser) -> None:
    group = parser.add_argument_group("Scoring Options")
    group.add_argument(
        "--memory-bank",
        action="store_true",
        help="Fuse the visual gallery distance into the maps",
    )
    group.add_argument(
        "--export-heatmaps",
        action="store_true",
        help="Write a heatmap per test sample",
    )


def build_parser() -> ArgumentParser:
    """Builds the argument parser with one subparser per command."""
    parser = ArgumentParser(
        description=(
            f"misdd ({VERSION}): Multimodal surface defect detection "
            "with missing modalities"
        )
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Increase verbosity (-v, -vv)",
    )
    parser.add_argument("--log-file", default=None, help="Also write the log to this file")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="Generate a synthetic RGB/depth dataset")
    gen.add_argument("--out", required=True, help="Dataset directory")
    gen.add_argument(
        "--classes",
        default=str(len(DatasetSpec().classes)),
        help="Class count or comma-separated names [default: %(default)s]",
    )
    gen.add_argument(
        "--train-normals",
        type=int,
        default=DatasetSpec.n_train_normal,
        help="Training normals per class [default: %(default)d]",
    )
    gen.add_argument(
        "--test-normals",
        type=int,
        default=DatasetSpec.n_test_normal,
        help="Test normals per class [default: %(default)d]",
    )
    gen.add_argument(
        "--test-anomalous",
        type=int,
        default=DatasetSpec.n_test_anomalous,
        help="Test anomalies per class [default: %(default)d]",
    )
    gen.add_argument(
        "--image-size",
        type=int,
        default=DatasetSpec.image_size,
        help="Image side in pixels [default: %(default)d]",
    )
    gen.add_argument(
        "--defect-mix",
        default=None,
        help="Proportions, e.g. rgb_only:0.4,depth_only:0.4,combined:0.2",
    )
    gen.add_argument(
        "--workers",
        type=int,
        default=1,
        help="Generator threads [default: %(default)d]",
    )
    _add_seed_flag(gen)
    gen.set_defaults(handler=cmd_generate)

    tr = sub.add_parser("train", help="Train prompts on a dataset and write a run directory")
    tr.add_argument("--dataset", required=True, help="Dataset directory")
    tr.add_argument("--out", required=True, help="Run directory")
    _add_missing_flags(tr)
    _add_model_flags(tr)
    _add_seed_flag(tr)
    tr.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="Evaluate a run directory on the test split")
    ev.add_argument("--run", required=True, help="Run directory written by train")
    ev.add_argument("--dataset", default=None, help="Dataset directory [default: the run's]")
    _add_missing_flags(ev, defaults=False)
    _add_eval_flags(ev)
    ev.set_defaults(handler=cmd_eval)

    gr = sub.add_parser(
        "grid", help="Train and evaluate a grid of missing types, rates and ablations"
    )
    gr.add_argument("--dataset", required=True, help="Dataset directory")
    gr.add_argument("--out", required=True, help="Grid output directory")
    gr.add_argument(
        "--missing-types",
        default="rgb,3d,both",
        help="Comma-separated missing types [default: %(default)s]",
    )
    gr.add_argument(
        "--etas",
        default="0.3,0.5,0.7",
        help="Comma-separated missing rates [default: %(default)s]",
    )
    gr.add_argument("--seeds", default=None, help="Comma-separated seeds [default: --seed]")
    gr.add_argument(
        "--ablations",
        default="full",
        help=f"Comma-separated presets of {', '.join(ABLATIONS)} [default: %(default)s]",
    )
    gr.add_argument(
        "--missing-level",
        choices=MISSING_LEVELS,
        default=MissingLevel.INPUT.value,
        help="Where the missing modality is zeroed",
    )
    gr.add_argument(
        "--workers",
        type=int,
        default=1,
        help="Worker processes [default: %(default)d]",
    )
    _add_model_flags(gr)
    _add_eval_flags(gr)
    _add_seed_flag(gr)
    gr.set_defaults(handler=cmd_grid)

    pa = sub.add_parser("params", help="Print the parameter count table of a checkpoint")
    pa.add_argument("--checkpoint", required=True, help="Run directory or checkpoint directory")
    pa.set_defaults(handler=cmd_params)

    fs = sub.add_parser("fewshot", help="Train and evaluate with K training samples per class")
    fs.add_argument("--dataset", required=True, help="Dataset directory")
    fs.add_argument("--out", required=True, help="Output directory")
    fs.add_argument(
        "--k-shot",
        default="1,2,4",
        help="Comma-separated K values, 'full' for all [default: %(default)s]",
    )
    _add_missing_flags(fs)
    _add_model_flags(fs)
    _add_eval_flags(fs)
    _add_seed_flag(fs)
    fs.set_defaults(handler=cmd_fewshot)
    return parser


def _check_args(parser: ArgumentParser, args: Namespace) -> None:
    if args.eta is not None and not 0.0 <= args.eta <= 1.0:
        parser.error(f"--eta must be in [0, 1], got {args.eta}")
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    if getattr(args, "epochs", 1) < 1:
        parser.error("--epochs must be >= 1")
    if getattr(args, "prompt_len", 1) < 1:
        parser.error("--prompt-len must be >= 1")
    if args.command == "grid":
        unknown = [a for a in args.ablations.split(",") if a not in ABLATIONS]
        if unknown:
            parser.error(f"Unknown ablation preset: {unknown[0]}")
    if args.command == "fewshot":
        try:
            shots = _k_shots(args.k_shot)
        except ValueError:
            parser.error(f"--k-shot must list integers or 'full', got {args.k_shot!r}")
        if any(k is not None and k < 1 for k in shots):
            parser.error("--k-shot values must be >= 1")


def main(argv: list[str] | None = None) -> int:
    """
    Parses command-line arguments and runs the selected command.

    Returns:
        int: 0 on success, 1 on a runtime failure. Usage errors exit with status 2.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "eta"):
        args.eta = None
    try:
        args.seed = resolve_seed(getattr(args, "seed", None))
    except ValueError as e:
        parser.error(str(e))
    _check_args(parser, args)

    setup_logger(args.log_file, args.verbose)
    handler: Callable[[Namespace], int] = args.handler
    try:
        return handler(args)
    except KeyboardInterrupt:
        print("\nInterrupted by user. Exiting.")
        return 1
    except (ValueError, OSError, KeyError, FloatingPointError, RuntimeError) as e:
        if args.verbose > 1:
            logger.exception(e)
        else:
            logger.error(
                flm(
                    f"{args.command} failed: {e}",
                    {"id": "000000", "cell": args.command},
                    args.verbose,
                )
            )
        return 1


if __name__ == "__main__":
    sys.exit(main())
