"""
Datasets, synthetic domain-shift generators and the delimited dataset format.

File format: a header line ``d=<dim>;labeled=<0|1>;domain=<tag>`` followed by
one comma-separated row per sample, with the integer label as the last field
when labeled.
"""

import csv
import io
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import numpy.typing as npt
import structlog

from dtskit.config import ShiftSpec
from dtskit.errors import (
    ArgumentError,
    ConfigurationError,
    DatasetParseError,
    DimensionError,
    LabelError,
    MissingInputError,
)
from dtskit.numerics import DenseMatrix, Rng

logger = structlog.get_logger(__name__)

Labels = npt.NDArray[np.int64]


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"
    GENERATED = "generated"
    AUGMENTED = "augmented"


@dataclass(eq=False)
class LabeledDataset:
    """Feature rows with optional integer class labels and a domain tag."""

    features: DenseMatrix
    labels: Optional[Labels]
    domain: Domain

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionError(f"features must be 2-D, got {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise DimensionError(
                    f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows"
                )
            if self.labels.size and self.labels.min() < 0:
                raise LabelError("negative class label")

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def require_labels(self) -> Labels:
        if self.labels is None:
            raise ArgumentError(f"{self.domain.value} dataset has no labels")
        return self.labels

    def unlabeled(self) -> "LabeledDataset":
        """A view with labels removed; what training code sees of the target."""
        return LabeledDataset(self.features, None, self.domain)

    def with_labels(self, labels: Labels) -> "LabeledDataset":
        return LabeledDataset(self.features, labels, self.domain)

    def equals(self, other: "LabeledDataset") -> bool:
        if self.domain != other.domain or self.features.shape != other.features.shape:
            return False
        if not np.array_equal(self.features, other.features):
            return False
        if self.labels is None or other.labels is None:
            return self.labels is None and other.labels is None
        return bool(np.array_equal(self.labels, other.labels))


@dataclass(eq=False)
class DomainPair:
    """Labeled source plus unlabeled target.

    Target ground truth lives in ``target_truth`` and is only read by
    evaluation code; ``target`` never carries labels.
    """

    source: LabeledDataset
    target: LabeledDataset
    num_classes: int
    target_truth: Optional[Labels] = None

    def __post_init__(self) -> None:
        if self.source.dim != self.target.dim:
            raise DimensionError(
                f"source dim {self.source.dim} != target dim {self.target.dim}"
            )
        labels = self.source.require_labels()
        if labels.size and labels.max() >= self.num_classes:
            raise LabelError(f"source label {labels.max()} >= {self.num_classes}")
        if self.target.labeled:
            self.target = self.target.unlabeled()

    def evaluation_target(self) -> LabeledDataset:
        """Target rows with their ground-truth labels, for scoring only."""
        if self.target_truth is None:
            raise ArgumentError("target ground truth is not available")
        return self.target.with_labels(self.target_truth)


@dataclass(frozen=True)
class Standardizer:
    """Per-feature affine map to zero mean, unit variance."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features: DenseMatrix) -> "Standardizer":
        scale = features.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return cls(features.mean(axis=0), scale)

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, features: DenseMatrix) -> DenseMatrix:
        return (features - self.mean) / self.scale

    def inverse(self, features: DenseMatrix) -> DenseMatrix:
        return features * self.scale + self.mean


def concatenate(datasets: List[LabeledDataset], domain: Domain) -> LabeledDataset:
    """Row-wise concatenation; every input must be labeled."""
    if not datasets:
        raise ArgumentError("nothing to concatenate")
    dims = {ds.dim for ds in datasets}
    if len(dims) != 1:
        raise DimensionError(f"cannot concatenate datasets of dims {sorted(dims)}")
    features = np.concatenate([ds.features for ds in datasets], axis=0)
    labels = np.concatenate([ds.require_labels() for ds in datasets])
    return LabeledDataset(features, labels, domain)


def rotation_matrix(degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    return np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])


def _balanced_labels(n: int, num_classes: int, rng: Rng) -> Labels:
    labels = np.arange(n, dtype=np.int64) % num_classes
    return labels[rng.permutation(n)]


def _sample_moons(n: int, noise: float, rng: Rng) -> Tuple[DenseMatrix, Labels]:
    """Interleaved half circles, centred on the origin."""
    labels = _balanced_labels(n, 2, rng)
    angles = rng.uniform(0.0, np.pi, (n,))
    outer = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    inner = np.stack([1.0 - np.cos(angles), 0.5 - np.sin(angles)], axis=1)
    points = np.where(labels[:, None] == 0, outer, inner)
    points = points - np.array([0.5, 0.25])
    points = points + noise * rng.normal(n, 2)
    return points, labels


def _sample_mixture(
    n: int, spec: ShiftSpec, rng: Rng
) -> Tuple[DenseMatrix, Labels]:
    means = np.asarray(spec.class_means, dtype=np.float64)
    scales = np.asarray(spec.class_scales, dtype=np.float64)
    labels = _balanced_labels(n, len(means), rng)
    points = means[labels] + scales[labels, None] * rng.normal(n, means.shape[1])
    return points, labels


def generate_pair(spec: ShiftSpec) -> DomainPair:
    """Sample a labeled source and a shifted target with hidden labels."""
    rng = Rng(spec.seed, "data")
    source_rng, target_rng = rng.spawn("source"), rng.spawn("target")

    if spec.family == "two_moons_rotation":
        if not 0.0 <= spec.rotation_deg <= 90.0:
            raise ConfigurationError(f"rotation {spec.rotation_deg} outside [0, 90]")
        xs, ys = _sample_moons(spec.n_source, spec.noise, source_rng)
        xt, yt = _sample_moons(spec.n_target, spec.noise, target_rng)
        xt = xt @ rotation_matrix(spec.rotation_deg).T
        num_classes = 2
    elif spec.family == "gaussian_mixture_affine":
        xs, ys = _sample_mixture(spec.n_source, spec, source_rng)
        xt, yt = _sample_mixture(spec.n_target, spec, target_rng)
        affine = np.asarray(spec.affine_matrix, dtype=np.float64)
        xt = xt @ affine.T + np.asarray(spec.affine_shift, dtype=np.float64)
        num_classes = len(spec.class_means)
    else:
        raise ConfigurationError(f"unknown shift family {spec.family!r}")

    logger.debug(
        "Generated domain pair",
        family=spec.family,
        n_source=spec.n_source,
        n_target=spec.n_target,
        seed=spec.seed,
    )
    return DomainPair(
        source=LabeledDataset(xs, ys, Domain.SOURCE),
        target=LabeledDataset(xt, None, Domain.TARGET),
        num_classes=num_classes,
        target_truth=yt,
    )


def write_dataset(ds: LabeledDataset, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"d={ds.dim};labeled={int(ds.labeled)};domain={ds.domain.value}\n")
        writer = csv.writer(handle, lineterminator="\n")
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.features[i]]
            if ds.labels is not None:
                row.append(str(int(ds.labels[i])))
            writer.writerow(row)


def _parse_header(line: str) -> Tuple[int, bool, Domain]:
    fields: Dict[str, str] = {}
    for part in line.strip().split(";"):
        if "=" not in part:
            raise DatasetParseError(f"malformed header field {part!r}", 1)
        key, value = part.split("=", 1)
        fields[key.strip()] = value.strip()
    if set(fields) != {"d", "labeled", "domain"}:
        raise DatasetParseError(f"header needs d, labeled, domain; got {line!r}", 1)
    try:
        dim = int(fields["d"])
        labeled = {"0": False, "1": True}[fields["labeled"]]
        domain = Domain(fields["domain"])
    except (ValueError, KeyError) as exc:
        raise DatasetParseError(f"bad header value: {exc}", 1) from exc
    if dim < 1:
        raise DatasetParseError("dimension must be positive", 1)
    return dim, labeled, domain


def _decode(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = raw.count(b"\n", 0, exc.start) + 1
        raise DatasetParseError(f"invalid UTF-8: {exc.reason}", line) from exc


def read_dataset(path: Path) -> LabeledDataset:
    if not path.is_file():
        raise MissingInputError(f"dataset not found: {path}")
    handle = io.StringIO(_decode(path.read_bytes()), newline="")
    header = handle.readline()
    if not header:
        raise DatasetParseError("empty file", 1)
    dim, labeled, domain = _parse_header(header)
    width = dim + int(labeled)
    rows: List[List[float]] = []
    labels: List[int] = []
    for offset, row in enumerate(csv.reader(handle), start=2):
        if not row:
            continue
        if len(row) != width:
            raise DatasetParseError(f"expected {width} fields, got {len(row)}", offset)
        try:
            values = [float(cell) for cell in row[:dim]]
        except ValueError as exc:
            raise DatasetParseError(f"non-numeric feature: {exc}", offset) from exc
        if not all(np.isfinite(values)):
            raise DatasetParseError("non-finite feature", offset)
        rows.append(values)
        if labeled:
            try:
                labels.append(int(row[dim]))
            except ValueError as exc:
                raise DatasetParseError(f"bad label: {exc}", offset) from exc
    features = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return LabeledDataset(
        features, np.array(labels, dtype=np.int64) if labeled else None, domain
    )


SOURCE_FILE = "source.csv"
TARGET_FILE = "target.csv"
TARGET_TRUTH_FILE = "target_truth.csv"


def write_pair(pair: DomainPair, directory: Path) -> None:
    """Source, unlabeled target and (when known) the target ground truth."""
    write_dataset(pair.source, directory / SOURCE_FILE)
    write_dataset(pair.target, directory / TARGET_FILE)
    if pair.target_truth is not None:
        write_dataset(pair.evaluation_target(), directory / TARGET_TRUTH_FILE)


def read_pair(directory: Path, num_classes: Optional[int] = None) -> DomainPair:
    """Inverse of write_pair; the class count defaults to max source label + 1."""
    source = read_dataset(directory / SOURCE_FILE)
    target = read_dataset(directory / TARGET_FILE)
    truth_path = directory / TARGET_TRUTH_FILE
    truth = read_dataset(truth_path).require_labels() if truth_path.is_file() else None
    labels = source.require_labels()
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    return DomainPair(source, target.unlabeled(), num_classes, truth)
