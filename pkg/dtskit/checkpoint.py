"""
JSON checkpoints for trained denoisers and classifiers.

Tensors are stored as nested float lists written with Python's repr, so a
save/load cycle reproduces every parameter bit for bit.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Type, TypeVar

import numpy as np
import structlog
from pydantic import BaseModel, ValidationError

from dtskit.cdpm import ConditionalDenoiser
from dtskit.config import ScheduleConfig
from dtskit.data import Standardizer
from dtskit.errors import CheckpointError, CheckpointVersionError, MissingInputError
from dtskit.numerics import Mlp
from dtskit.schedule import NoiseSchedule, schedule_from_config
from dtskit.uda import UDAModel

logger = structlog.get_logger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

Matrix = List[List[float]]


class MlpState(BaseModel):
    widths: List[int]
    activation: str
    weights: List[Matrix]
    biases: List[List[float]]

    @classmethod
    def from_mlp(cls, net: Mlp) -> "MlpState":
        return cls(
            widths=list(net.widths),
            activation=net.activation,
            weights=[w.tolist() for w in net.weights],
            biases=[b.tolist() for b in net.biases],
        )

    def to_mlp(self) -> Mlp:
        return Mlp(
            tuple(self.widths),
            [np.asarray(w, dtype=np.float64) for w in self.weights],
            [np.asarray(b, dtype=np.float64) for b in self.biases],
            self.activation,
        )


class DenoiserCheckpoint(BaseModel):
    format_version: int = CHECKPOINT_FORMAT_VERSION
    kind: Literal["denoiser"] = "denoiser"
    schedule: ScheduleConfig
    time_dim: int
    backbone: MlpState
    label_embedding: Matrix
    embedding_projections: List[Matrix]
    standardizer_mean: List[float]
    standardizer_scale: List[float]


class ClassifierCheckpoint(BaseModel):
    format_version: int = CHECKPOINT_FORMAT_VERSION
    kind: Literal["classifier"] = "classifier"
    regularizer: str
    trade_off: float
    transform: MlpState
    head: MlpState
    discriminator: Optional[MlpState] = None


@dataclass
class DenoiserBundle:
    """A trained denoiser with the schedule and scaling it was trained under."""

    model: ConditionalDenoiser
    schedule: NoiseSchedule
    schedule_config: ScheduleConfig
    standardizer: Standardizer


CheckpointT = TypeVar("CheckpointT", DenoiserCheckpoint, ClassifierCheckpoint)


def _write(path: Path, document: BaseModel) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    # stdlib json writes floats with repr, which round-trips exactly
    text = json.dumps(document.model_dump(), indent=1)
    path.write_text(text + "\n", encoding="utf-8")


def _read(path: Path, model: Type[CheckpointT]) -> CheckpointT:
    if not path.is_file():
        raise MissingInputError(f"checkpoint not found: {path}")
    try:
        raw: Dict[str, Any] = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise CheckpointError(f"{path} does not hold a checkpoint object")
    version = raw.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path} has format version {version}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    expected_kind = model.model_fields["kind"].default
    if raw.get("kind") != expected_kind:
        raise CheckpointError(
            f"{path} holds a {raw.get('kind')!r}, not a {expected_kind}"
        )
    try:
        return model.model_validate(raw)
    except ValidationError as exc:
        raise CheckpointError(f"{path} is malformed: {exc}") from exc


def save_denoiser(path: Path, bundle: DenoiserBundle) -> None:
    model = bundle.model
    document = DenoiserCheckpoint(
        schedule=bundle.schedule_config,
        time_dim=model.time_dim,
        backbone=MlpState.from_mlp(model.backbone),
        label_embedding=model.label_embedding.tolist(),
        embedding_projections=[p.tolist() for p in model.embedding_projections],
        standardizer_mean=bundle.standardizer.mean.tolist(),
        standardizer_scale=bundle.standardizer.scale.tolist(),
    )
    _write(path, document)
    logger.info("Denoiser checkpoint written", path=str(path))


def load_denoiser(path: Path) -> DenoiserBundle:
    document = _read(path, DenoiserCheckpoint)
    try:
        model = ConditionalDenoiser(
            document.backbone.to_mlp(),
            np.asarray(document.label_embedding, dtype=np.float64),
            [np.asarray(p, dtype=np.float64) for p in document.embedding_projections],
            document.time_dim,
        )
        standardizer = Standardizer(
            np.asarray(document.standardizer_mean, dtype=np.float64),
            np.asarray(document.standardizer_scale, dtype=np.float64),
        )
    except (ValueError, IndexError) as exc:
        raise CheckpointError(f"{path} has inconsistent tensors: {exc}") from exc
    if standardizer.mean.shape != (model.data_dim,):
        raise CheckpointError(f"{path} standardizer does not match data dim")
    return DenoiserBundle(
        model=model,
        schedule=schedule_from_config(document.schedule),
        schedule_config=document.schedule,
        standardizer=standardizer,
    )


def save_classifier(path: Path, model: UDAModel) -> None:
    document = ClassifierCheckpoint(
        regularizer=model.regularizer,
        trade_off=model.trade_off,
        transform=MlpState.from_mlp(model.transform),
        head=MlpState.from_mlp(model.head),
        discriminator=(
            None
            if model.discriminator is None
            else MlpState.from_mlp(model.discriminator)
        ),
    )
    _write(path, document)
    logger.info("Classifier checkpoint written", path=str(path))


def load_classifier(path: Path) -> UDAModel:
    document = _read(path, ClassifierCheckpoint)
    try:
        return UDAModel(
            document.transform.to_mlp(),
            document.head.to_mlp(),
            None if document.discriminator is None else document.discriminator.to_mlp(),
            document.regularizer,
            document.trade_off,
        )
    except (ValueError, IndexError) as exc:
        raise CheckpointError(f"{path} has inconsistent tensors: {exc}") from exc
