"""
Pydantic schemas for reports written by the pipeline and the CLI.

Report floats serialise at 6 significant digits and documents carry no
wall-clock fields, so equal runs produce byte-identical files.
"""

from typing import Annotated, Any, Dict, List, Optional

from pydantic import BaseModel, Field, PlainSerializer

REPORT_FORMAT_VERSION = 1


def _six_significant(value: float) -> float:
    return float(f"{value:.6g}")


ReportFloat = Annotated[
    float, PlainSerializer(_six_significant, return_type=float, when_used="json")
]


# Training traces


class LossPoint(BaseModel):
    """One row of a classifier loss trace."""

    step: int
    task_loss: ReportFloat
    reg_loss: ReportFloat
    lambda_effective: ReportFloat


class DenoiserLossPoint(BaseModel):
    """One row of a denoiser (L_d) loss trace."""

    step: int
    loss: ReportFloat
    moving_average: ReportFloat


# Diagnostics


class VlbReport(BaseModel):
    """Variational bound split into its KL and decoder terms, in nats."""

    prior_kl: ReportFloat = Field(..., description="L_T")
    transition_kls: List[ReportFloat] = Field(..., description="L_{t-1}, t=2..T")
    decoder_nll: ReportFloat = Field(..., description="L_0")
    weights: List[ReportFloat] = Field(
        default_factory=list, description="noise-error weight per t=2..T"
    )
    total: ReportFloat


class BoundReport(BaseModel):
    """Empirical terms of the adaptation bound; distances are proxy A-distances."""

    source_risk: ReportFloat
    generated_risk: Optional[ReportFloat] = None
    augmented_risk: ReportFloat
    d_source_target: Optional[ReportFloat] = None
    d_generated_target: Optional[ReportFloat] = None
    d_augmented_target: Optional[ReportFloat] = None
    mixing_fraction: ReportFloat
    premise_holds: Optional[bool] = None
    distance_kind: str = "proxy A-distance"
    distance_space: str = "features"
    constant_c: str = "not estimated"


class AdistRow(BaseModel):
    pairing: str
    distance: Optional[ReportFloat]


# Run documents


class RunReport(BaseModel):
    format_version: int = REPORT_FORMAT_VERSION
    seed: int
    ablation: str
    retrain_mode: str
    sampler: str
    n_source: int
    n_target: int
    n_generated: int
    n_augmented: int
    generated_label_counts: List[int] = Field(default_factory=list)
    pretrain_source_accuracy: ReportFloat
    pretrain_target_accuracy: ReportFloat
    final_source_accuracy: ReportFloat
    final_target_accuracy: ReportFloat
    cdpm_steps_run: int = 0
    bound: Optional[BoundReport] = None
    pretrain_trace: List[LossPoint] = Field(default_factory=list)
    cdpm_trace: List[DenoiserLossPoint] = Field(default_factory=list)
    retrain_trace: List[LossPoint] = Field(default_factory=list)
    config: Dict[str, Any] = Field(default_factory=dict)


class SweepCell(BaseModel):
    count: int
    seed: int
    target_accuracy: ReportFloat


class SweepRow(BaseModel):
    count: int
    mean_accuracy: ReportFloat
    std_accuracy: ReportFloat
    accuracies: List[ReportFloat]


class SweepReport(BaseModel):
    format_version: int = REPORT_FORMAT_VERSION
    rows: List[SweepRow]


class EvaluationReport(BaseModel):
    source_accuracy: ReportFloat
    target_accuracy: Optional[ReportFloat] = None
