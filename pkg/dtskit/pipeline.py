"""
The three-step target-sampling procedure and its ablations.

1. pretrain a UDA classifier f* on (source, target);
2. pseudo-label the target with f* and fit the class-conditional denoiser;
3. sample a class-balanced generated domain, merge it into the source and
   retrain the classifier g* on (augmented source, target).

Each stage is a function of its inputs and one named RNG stream, so the CLI
stage subcommands reproduce ``run_dts`` exactly from intermediate files.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog

from dtskit.cdpm import (
    CdpmTrainResult,
    ConditionalDenoiser,
    ancestral_sample,
    train_cdpm,
)
from dtskit.checkpoint import DenoiserBundle
from dtskit.config import RunConfig
from dtskit.data import (
    Domain,
    DomainPair,
    LabeledDataset,
    Standardizer,
    concatenate,
    generate_pair,
    write_dataset,
)
from dtskit.errors import ArgumentError, ConfigurationError
from dtskit.log import timed_stage
from dtskit.metrics import bound_report
from dtskit.numerics import Rng
from dtskit.schedule import schedule_from_config
from dtskit.schemas import LossPoint, RunReport, SweepCell, SweepReport, SweepRow
from dtskit.solver import make_plan, multistep_sample
from dtskit.uda import TrainResult, UDAModel, accuracy, pseudo_label, train_uda

logger = structlog.get_logger(__name__)

REPORT_FILE = "report.json"
PSEUDO_LABELED_FILE = "pseudo_labeled_target.csv"
GENERATED_FILE = "generated.csv"
AUGMENTED_FILE = "augmented_source.csv"


def stage_rng(cfg: RunConfig, name: str) -> Rng:
    """The stream every stage draws from, keyed only by seed and stage name."""
    return Rng(cfg.seed, "dts").spawn(name)


def pretrain_stage(pair: DomainPair, cfg: RunConfig) -> TrainResult:
    """Step 1: f* from the labeled source and unlabeled target."""
    rng = stage_rng(cfg, "pretrain")
    with timed_stage("pretrain", n_source=len(pair.source), n_target=len(pair.target)):
        model = UDAModel.create(
            pair.source.dim, pair.num_classes, cfg.uda, rng.spawn("init")
        )
        return train_uda(
            pair.source,
            pair.target,
            model,
            cfg.uda,
            rng.spawn("train"),
            stage_name="pretrain",
        )


def pseudo_label_stage(model: UDAModel, target: LabeledDataset) -> LabeledDataset:
    with timed_stage("pseudo-label", n_target=len(target)):
        labeled = pseudo_label(model, target)
    counts = np.bincount(labeled.require_labels(), minlength=model.num_classes)
    logger.info("Pseudo-labels assigned", class_counts=counts.tolist())
    return labeled


def train_cdpm_stage(
    pseudo_labeled: LabeledDataset, num_classes: int, cfg: RunConfig
) -> Tuple[DenoiserBundle, CdpmTrainResult]:
    """Step 2: fit the conditional denoiser on the pseudo-labeled target."""
    rng = stage_rng(cfg, "train-cdpm")
    with timed_stage("train-cdpm", rows=len(pseudo_labeled)):
        sched = schedule_from_config(cfg.schedule)
        standardizer = (
            Standardizer.fit(pseudo_labeled.features)
            if cfg.cdpm.standardize
            else Standardizer.identity(pseudo_labeled.dim)
        )
        scaled = LabeledDataset(
            standardizer.transform(pseudo_labeled.features),
            pseudo_labeled.require_labels(),
            pseudo_labeled.domain,
        )
        model = ConditionalDenoiser.create(
            pseudo_labeled.dim,
            num_classes,
            cfg.denoiser.hidden,
            cfg.denoiser.time_dim,
            cfg.denoiser.activation,
            rng.spawn("init"),
        )
        result = train_cdpm(sched, model, scaled, cfg.cdpm, rng.spawn("train"))
    bundle = DenoiserBundle(result.model, sched, cfg.schedule, standardizer)
    return bundle, result


def generate_stage(bundle: DenoiserBundle, cfg: RunConfig) -> LabeledDataset:
    """Step 3a: n_generated_per_class rows for every class, labeled by condition."""
    rng = stage_rng(cfg, "generate")
    n = cfg.dts.n_generated_per_class
    model = bundle.model
    with timed_stage("generate", sampler=cfg.dts.sampler, per_class=n):
        blocks: List[np.ndarray] = []
        labels: List[np.ndarray] = []
        for label in range(model.num_classes):
            if n == 0:
                break
            class_rng = rng.spawn(f"class-{label}")
            if cfg.dts.sampler == "ancestral":
                x = ancestral_sample(bundle.schedule, model, label, n, class_rng)
            else:
                plan = make_plan(bundle.schedule, cfg.solver.steps, label)
                x = multistep_sample(
                    bundle.schedule, model, plan, n, class_rng, cfg.solver.model_form
                )
            blocks.append(bundle.standardizer.inverse(x))
            labels.append(np.full(n, label, dtype=np.int64))
    if not blocks:
        return LabeledDataset(
            np.zeros((0, model.data_dim)),
            np.zeros(0, dtype=np.int64),
            Domain.GENERATED,
        )
    return LabeledDataset(np.vstack(blocks), np.concatenate(labels), Domain.GENERATED)


def augment_source(
    source: LabeledDataset,
    generated: LabeledDataset,
    num_classes: Optional[int] = None,
) -> LabeledDataset:
    """Row-wise union of the source and a generated domain, tagged augmented."""
    if source.dim != generated.dim:
        raise ArgumentError(f"source dim {source.dim} != generated dim {generated.dim}")
    if num_classes is not None:
        for ds in (source, generated):
            labels = ds.require_labels()
            if labels.size and labels.max() >= num_classes:
                raise ArgumentError(
                    f"{ds.domain.value} label {labels.max()} >= {num_classes} classes"
                )
    return concatenate([source, generated], Domain.AUGMENTED)


def augment_stage(
    pair: DomainPair,
    pseudo_labeled: LabeledDataset,
    generated: Optional[LabeledDataset],
    cfg: RunConfig,
) -> LabeledDataset:
    ablation = cfg.dts.ablation
    with timed_stage("augment", ablation=ablation):
        if ablation == "no_generation":
            return augment_source(pair.source, pseudo_labeled, pair.num_classes)
        if generated is None:
            raise ArgumentError(f"ablation {ablation!r} needs a generated domain")
        if ablation == "no_original_source":
            return LabeledDataset(
                generated.features, generated.require_labels(), Domain.AUGMENTED
            )
        return augment_source(pair.source, generated, pair.num_classes)


def retrain_final(
    augmented: LabeledDataset,
    target: LabeledDataset,
    cfg: RunConfig,
    num_classes: int,
    pretrained: Optional[UDAModel] = None,
    steps: Optional[int] = None,
) -> TrainResult:
    """Fit g* on (augmented source, target), from scratch or from f*."""
    rng = stage_rng(cfg, "retrain")
    if cfg.dts.retrain_mode == "finetune_pretrained":
        if pretrained is None:
            raise ConfigurationError(
                "finetune_pretrained needs a pretrained classifier"
            )
        model = pretrained
    else:
        model = UDAModel.create(augmented.dim, num_classes, cfg.uda, rng.spawn("init"))
    return train_uda(
        augmented,
        target,
        model,
        cfg.uda,
        rng.spawn("train"),
        steps=steps,
        stage_name="retrain",
    )


def retrain_stage(
    augmented: LabeledDataset,
    pair: DomainPair,
    cfg: RunConfig,
    pretrained: Optional[UDAModel] = None,
) -> TrainResult:
    with timed_stage("retrain", mode=cfg.dts.retrain_mode, rows=len(augmented)):
        return retrain_final(
            augmented, pair.target, cfg, pair.num_classes, pretrained=pretrained
        )


@dataclass
class DtsResult:
    model: UDAModel
    pretrained: UDAModel
    report: RunReport
    pseudo_labeled: LabeledDataset
    generated: Optional[LabeledDataset]
    augmented: Optional[LabeledDataset]
    denoiser: Optional[DenoiserBundle]


def write_report(report: RunReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")


def _check_config(cfg: RunConfig) -> None:
    if cfg.dts.ablation == "no_original_source" and cfg.dts.n_generated_per_class == 0:
        raise ConfigurationError("no_original_source needs n_generated_per_class > 0")


def run_dts(
    pair: DomainPair, cfg: RunConfig, output_dir: Optional[Path] = None
) -> DtsResult:
    """Run every stage and assemble the run report.

    With ``n_generated_per_class = 0`` and the full pipeline the result is the
    step-1 classifier itself.
    """
    _check_config(cfg)
    truth = pair.evaluation_target()
    pretrain = pretrain_stage(pair, cfg)
    f_star = pretrain.model
    pre_source = accuracy(f_star, pair.source)
    pre_target = accuracy(f_star, truth)
    logger.info(
        "Pretrained classifier",
        source_accuracy=pre_source,
        target_accuracy=pre_target,
    )

    pseudo = pseudo_label_stage(f_star, pair.target)
    ablation = cfg.dts.ablation
    bundle: Optional[DenoiserBundle] = None
    cdpm_result: Optional[CdpmTrainResult] = None
    generated: Optional[LabeledDataset] = None
    augmented: Optional[LabeledDataset] = None
    final = f_star
    retrain_trace: List[LossPoint] = []

    degenerate = ablation == "full" and cfg.dts.n_generated_per_class == 0
    if not degenerate:
        if ablation != "no_generation":
            bundle, cdpm_result = train_cdpm_stage(pseudo, pair.num_classes, cfg)
            generated = generate_stage(bundle, cfg)
        augmented = augment_stage(pair, pseudo, generated, cfg)
        retrained = retrain_stage(augmented, pair, cfg, pretrained=f_star)
        final, retrain_trace = retrained.model, retrained.trace

    bound = None
    if augmented is not None and len(augmented) > 0:
        with timed_stage("evaluate"):
            bound = bound_report(
                pair.source,
                pair.target,
                generated,
                augmented,
                final,
                stage_rng(cfg, "metrics"),
                cfg.metrics,
                source_rows=0 if ablation == "no_original_source" else len(pair.source),
            )

    label_counts: List[int] = []
    if generated is not None:
        label_counts = np.bincount(
            generated.require_labels(), minlength=pair.num_classes
        ).tolist()
    report = RunReport(
        seed=cfg.seed,
        ablation=ablation,
        retrain_mode=cfg.dts.retrain_mode,
        sampler=cfg.dts.sampler,
        n_source=len(pair.source),
        n_target=len(pair.target),
        n_generated=0 if generated is None else len(generated),
        n_augmented=len(pair.source) if augmented is None else len(augmented),
        generated_label_counts=label_counts,
        pretrain_source_accuracy=pre_source,
        pretrain_target_accuracy=pre_target,
        final_source_accuracy=accuracy(final, pair.source),
        final_target_accuracy=accuracy(final, truth),
        cdpm_steps_run=0 if cdpm_result is None else cdpm_result.steps_run,
        bound=bound,
        pretrain_trace=pretrain.trace,
        cdpm_trace=[] if cdpm_result is None else cdpm_result.trace,
        retrain_trace=retrain_trace,
        config=cfg.model_dump(mode="json"),
    )
    logger.info(
        "DTS run finished",
        seed=cfg.seed,
        pretrain_target_accuracy=pre_target,
        final_target_accuracy=report.final_target_accuracy,
    )

    if output_dir is not None:
        write_dataset(pseudo, output_dir / PSEUDO_LABELED_FILE)
        if generated is not None:
            write_dataset(generated, output_dir / GENERATED_FILE)
        if augmented is not None:
            write_dataset(augmented, output_dir / AUGMENTED_FILE)
        write_report(report, output_dir / REPORT_FILE)

    return DtsResult(final, f_star, report, pseudo, generated, augmented, bundle)


def _run_cell(
    cfg: RunConfig, count: int, seed: int, output_dir: Optional[Path]
) -> SweepCell:
    dts = cfg.dts.model_copy(update={"n_generated_per_class": count})
    cell_cfg = cfg.model_copy(update={"seed": seed, "dts": dts})
    pair = generate_pair(cell_cfg.shift_spec())
    cell_dir = None
    if output_dir is not None:
        cell_dir = output_dir / f"count-{count}" / f"seed-{seed}"
    result = run_dts(pair, cell_cfg, cell_dir)
    return SweepCell(
        count=count, seed=seed, target_accuracy=result.report.final_target_accuracy
    )


def run_sweep(
    cfg: RunConfig, workers: int = 1, output_dir: Optional[Path] = None
) -> SweepReport:
    """Full pipeline for every (count, seed) cell; one row per count.

    Cells share nothing, so they run in a process pool when ``workers > 1``.
    """
    _check_config(cfg)
    cells = [(count, seed) for count in cfg.sweep.counts for seed in cfg.sweep.seeds]
    logger.info("Sweep started", cells=len(cells), workers=workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_cell, cfg, count, seed, output_dir)
                for count, seed in cells
            ]
            results = [future.result() for future in futures]
    else:
        results = [_run_cell(cfg, count, seed, output_dir) for count, seed in cells]

    by_count: Dict[int, List[float]] = {}
    for cell in results:
        by_count.setdefault(cell.count, []).append(cell.target_accuracy)
    rows = [
        SweepRow(
            count=count,
            mean_accuracy=float(np.mean(accs)),
            std_accuracy=float(np.std(accs)),
            accuracies=accs,
        )
        for count, accs in by_count.items()
    ]
    return SweepReport(rows=rows)
