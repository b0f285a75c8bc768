"""
Command-line entry point.

Stage subcommands share one run directory with fixed file names, so running
them in order reproduces ``dtskit run`` from the same config and seed.

Exit codes: 0 ok, 1 other failure, 2 usage, 3 configuration, 4 missing input,
5 divergence, 6 dataset parse error, 7 checkpoint error.
"""

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import structlog

from dtskit import __version__
from dtskit.checkpoint import (
    load_classifier,
    load_denoiser,
    save_classifier,
    save_denoiser,
)
from dtskit.config import (
    RunConfig,
    dump_config,
    load_config,
    parse_overrides,
    settings,
)
from dtskit.data import (
    DomainPair,
    LabeledDataset,
    generate_pair,
    read_dataset,
    read_pair,
    write_dataset,
    write_pair,
)
from dtskit.errors import EXIT_OK, DtsError, MissingInputError
from dtskit.log import configure_logging, timed_stage
from dtskit.metrics import adist_table, bound_report, proxy_distances, scatter_rows
from dtskit.pipeline import (
    AUGMENTED_FILE,
    GENERATED_FILE,
    PSEUDO_LABELED_FILE,
    augment_stage,
    generate_stage,
    pretrain_stage,
    pseudo_label_stage,
    retrain_stage,
    run_dts,
    run_sweep,
    stage_rng,
    train_cdpm_stage,
)
from dtskit.schedule import schedule_from_config
from dtskit.schemas import AdistRow, EvaluationReport, SweepReport
from dtskit.uda import UDAModel, accuracy

logger = structlog.get_logger(__name__)

CLASSIFIER_FILE = "classifier.json"
FINAL_CLASSIFIER_FILE = "final_classifier.json"
DENOISER_FILE = "denoiser.json"
EVALUATION_FILE = "evaluation.json"
SWEEP_FILE = "sweep.json"


def _fmt(value: Optional[float]) -> str:
    return "NA" if value is None else f"{value:.6g}"


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingInputError(f"required input not found: {path}")
    return path


def _print_adist(rows: List[AdistRow]) -> None:
    print("pairing,distance")
    for row in rows:
        print(f"{row.pairing},{_fmt(row.distance)}")


def _optional_dataset(path: Path) -> Optional[LabeledDataset]:
    return read_dataset(path) if path.is_file() else None


def cmd_gen_data(cfg: RunConfig, run_dir: Path, args: argparse.Namespace) -> None:
    with timed_stage("gen-data", family=cfg.data.family):
        pair = generate_pair(cfg.shift_spec())
        write_pair(pair, run_dir)


def cmd_pretrain(cfg: RunConfig, run_dir: Path, args: argparse.Namespace) -> None:
    pair = read_pair(_require(run_dir))
    result = pretrain_stage(pair, cfg)
    save_classifier(run_dir / CLASSIFIER_FILE, result.model)
    pseudo = pseudo_label_stage(result.model, pair.target)
    write_dataset(pseudo, run_dir / PSEUDO_LABELED_FILE)


def cmd_train_cdpm(cfg: RunConfig, run_dir: Path, args: argparse.Namespace) -> None:
    classifier = load_classifier(run_dir / CLASSIFIER_FILE)
    pseudo = read_dataset(run_dir / PSEUDO_LABELED_FILE)
    bundle, result = train_cdpm_stage(pseudo, classifier.num_classes, cfg)
    save_denoiser(run_dir / DENOISER_FILE, bundle)
    logger.info(
        "Denoiser trained", steps_run=result.steps_run, converged=result.converged
    )


def cmd_sample(cfg: RunConfig, run_dir: Path, args: argparse.Namespace) -> None:
    bundle = load_denoiser(run_dir / DENOISER_FILE)
    write_dataset(generate_stage(bundle, cfg), run_dir / GENERATED_FILE)


def cmd_augment(cfg: RunConfig, run_dir: Path, args: argparse.Namespace) -> None:
    pair = read_pair(_require(run_dir))
    pseudo = read_dataset(run_dir / PSEUDO_LABELED_FILE)
    generated = None
    if cfg.dts.ablation != "no_generation":
        generated = read_dataset(run_dir / GENERATED_FILE)
    write_dataset(
        augment_stage(pair, pseudo, generated, cfg), run_dir / AUGMENTED_FILE
    )


def cmd_retrain(cfg: RunConfig, run_dir: Path, args: argparse.Namespace) -> None:
    pair = read_pair(_require(run_dir))
    augmented = read_dataset(run_dir / AUGMENTED_FILE)
    pretrained = None
    if cfg.dts.retrain_mode == "finetune_pretrained":
        pretrained = load_classifier(run_dir / CLASSIFIER_FILE)
    result = retrain_stage(augmented, pair, cfg, pretrained=pretrained)
    save_classifier(run_dir / FINAL_CLASSIFIER_FILE, result.model)


def _evaluate(model: UDAModel, pair: DomainPair) -> EvaluationReport:
    target = None
    if pair.target_truth is not None:
        target = accuracy(model, pair.evaluation_target())
    return EvaluationReport(
        source_accuracy=accuracy(model, pair.source), target_accuracy=target
    )


def cmd_evaluate(cfg: RunConfig, run_dir: Path, args: argparse.Namespace) -> None:
    pair = read_pair(_require(run_dir))
    model = load_classifier(run_dir / args.model)
    report = _evaluate(model, pair)
    text = report.model_dump_json(indent=2)
    (run_dir / EVALUATION_FILE).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_adist(cfg: RunConfig, run_dir: Path, args: argparse.Namespace) -> None:
    pair = read_pair(_require(run_dir))
    augmented = read_dataset(run_dir / AUGMENTED_FILE)
    generated = _optional_dataset(run_dir / GENERATED_FILE)
    model: Optional[UDAModel] = None
    if cfg.metrics.adist_space == "features":
        model = load_classifier(_require(run_dir / FINAL_CLASSIFIER_FILE))
    with timed_stage("adist"):
        distances = proxy_distances(
            pair.source,
            pair.target,
            generated,
            augmented,
            stage_rng(cfg, "metrics"),
            cfg.metrics,
            model,
        )
    _print_adist(adist_table(*distances))


def cmd_report(cfg: RunConfig, run_dir: Path, args: argparse.Namespace) -> None:
    pair = read_pair(_require(run_dir))
    augmented = read_dataset(run_dir / AUGMENTED_FILE)
    generated = _optional_dataset(run_dir / GENERATED_FILE)
    model = load_classifier(run_dir / FINAL_CLASSIFIER_FILE)
    source_rows = 0 if cfg.dts.ablation == "no_original_source" else len(pair.source)
    with timed_stage("evaluate"):
        bound = bound_report(
            pair.source,
            pair.target,
            generated,
            augmented,
            model,
            stage_rng(cfg, "metrics"),
            cfg.metrics,
            source_rows=source_rows,
        )
    rows = adist_table(
        bound.d_source_target, bound.d_generated_target, bound.d_augmented_target
    )
    _print_adist(rows)
    print(f"source_risk,{_fmt(bound.source_risk)}")
    print(f"generated_risk,{_fmt(bound.generated_risk)}")
    print(f"augmented_risk,{_fmt(bound.augmented_risk)}")
    print(f"mixing_fraction,{_fmt(bound.mixing_fraction)}")
    print(f"premise_holds,{bound.premise_holds}")
    if args.scatter is not None:
        datasets: Dict[str, LabeledDataset] = {"target": pair.evaluation_target()}
        if generated is not None:
            datasets["generated"] = generated
        lines = ["domain,x,y,label"]
        for name, x, y, label in scatter_rows(datasets):
            lines.append(f"{name},{x!r},{y!r},{'' if label is None else label}")
        args.scatter.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_run(cfg: RunConfig, run_dir: Path, args: argparse.Namespace) -> None:
    pair = generate_pair(cfg.shift_spec())
    write_pair(pair, run_dir)
    result = run_dts(pair, cfg, run_dir)
    save_classifier(run_dir / CLASSIFIER_FILE, result.pretrained)
    save_classifier(run_dir / FINAL_CLASSIFIER_FILE, result.model)
    if result.denoiser is not None:
        save_denoiser(run_dir / DENOISER_FILE, result.denoiser)
    print(
        f"pretrain_target_accuracy,{_fmt(result.report.pretrain_target_accuracy)}\n"
        f"final_target_accuracy,{_fmt(result.report.final_target_accuracy)}"
    )


def _print_sweep(report: SweepReport) -> None:
    print("count,mean_accuracy,std_accuracy")
    for row in report.rows:
        print(f"{row.count},{_fmt(row.mean_accuracy)},{_fmt(row.std_accuracy)}")


def cmd_sweep(cfg: RunConfig, run_dir: Path, args: argparse.Namespace) -> None:
    workers = args.workers or settings.workers
    report = run_sweep(cfg, workers=workers, output_dir=run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    text = report.model_dump_json(indent=2)
    (run_dir / SWEEP_FILE).write_text(text + "\n", encoding="utf-8")
    _print_sweep(report)


def cmd_schedule(cfg: RunConfig, run_dir: Path, args: argparse.Namespace) -> None:
    print("t,beta,alpha,alpha_bar,ancestral_sigma,log_snr")
    for row in schedule_from_config(cfg.schedule).table():
        print(",".join([str(row[0]), *(_fmt(v) for v in row[1:])]))


Command = Callable[[RunConfig, Path, argparse.Namespace], None]

COMMANDS: Dict[str, Command] = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-cdpm": cmd_train_cdpm,
    "sample": cmd_sample,
    "augment": cmd_augment,
    "retrain": cmd_retrain,
    "evaluate": cmd_evaluate,
    "adist": cmd_adist,
    "report": cmd_report,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "schedule": cmd_schedule,
}

HELP = {
    "gen-data": "sample a synthetic source/target pair",
    "pretrain": "train the step-1 classifier and pseudo-label the target",
    "train-cdpm": "fit the class-conditional denoiser on pseudo-labeled target",
    "sample": "generate a class-balanced synthetic target domain",
    "augment": "merge the generated domain into the source",
    "retrain": "train the final classifier on the augmented source",
    "evaluate": "score a classifier checkpoint on source and target",
    "adist": "proxy A-distance table for the three domain pairings",
    "report": "bound-term report for the final classifier",
    "run": "the whole pipeline in one go",
    "sweep": "full runs over generated counts and seeds",
    "schedule": "print the noise schedule table",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtskit",
        description="Diffusion-based target sampling for domain adaptation.",
    )
    parser.add_argument("--version", action="version", version=f"dtskit {__version__}")
    parser.add_argument(
        "--config", type=Path, default=None, help="key = value config file"
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a dotted config key; may repeat",
    )
    parser.add_argument(
        "--dump-config",
        action="store_true",
        help="print the resolved config and exit",
    )
    parser.add_argument("--run-dir", type=Path, default=None)
    parser.add_argument("--log-level", default=None)

    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=HELP[name])
        if name == "evaluate":
            cmd.add_argument(
                "--model",
                default=FINAL_CLASSIFIER_FILE,
                help="classifier checkpoint inside the run directory",
            )
        elif name == "report":
            cmd.add_argument("--scatter", type=Path, default=None)
        elif name == "sweep":
            cmd.add_argument("--workers", type=int, default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level or settings.log_level, settings.log_format)

    try:
        cfg = load_config(args.config, parse_overrides(args.overrides))
        if args.dump_config:
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        run_dir = args.run_dir or Path(settings.output_dir)
        COMMANDS[args.command](cfg, run_dir, args)
    except DtsError as exc:
        logger.error(
            "Command failed",
            command=args.command,
            error=exc.message,
            stage=exc.stage,
            exit_code=exc.exit_code,
        )
        print(f"dtskit: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
