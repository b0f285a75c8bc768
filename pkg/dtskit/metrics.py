"""
Domain-divergence diagnostics.

The proxy A-distance stands in for the H-delta-H divergence everywhere it is
reported; nothing here claims to estimate the true divergence.
"""

from typing import Callable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy.stats import wasserstein_distance

from dtskit.config import MetricsConfig
from dtskit.data import LabeledDataset, Standardizer
from dtskit.errors import ArgumentError, DimensionError, EstimatorError
from dtskit.numerics import (
    DenseMatrix,
    Mlp,
    Rng,
    SgdMomentum,
    binary_cross_entropy_with_logits,
)
from dtskit.schemas import AdistRow, BoundReport
from dtskit.uda import UDAModel, accuracy

logger = structlog.get_logger(__name__)

__all__ = [
    "a_distance",
    "adist_table",
    "bound_report",
    "proxy_distances",
    "proxy_from_error",
    "random_directions",
    "scatter_rows",
    "sliced_wasserstein",
]

MIN_ROWS_PER_SIDE = 4


def _check_pair(a: DenseMatrix, b: DenseMatrix) -> None:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cannot compare shapes {a.shape} and {b.shape}")


def _split(n: int, rng: Rng) -> Tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    half = n // 2
    return order[:half], order[half:]


def proxy_from_error(nu: float) -> float:
    """2 (1 - 2 nu), clipped to [0, 2]."""
    return float(np.clip(2.0 * (1.0 - 2.0 * nu), 0.0, 2.0))


def a_distance(
    a: DenseMatrix,
    b: DenseMatrix,
    rng: Rng,
    steps: int = 500,
    lr: float = 0.1,
) -> float:
    """Proxy A-distance 2 (1 - 2 nu), clipped to [0, 2].

    nu is the balanced held-out error of a logistic-regression domain
    classifier trained on half of each side.
    """
    _check_pair(a, b)
    if a.shape[0] < MIN_ROWS_PER_SIDE or b.shape[0] < MIN_ROWS_PER_SIDE:
        raise EstimatorError(
            f"A-distance needs at least {MIN_ROWS_PER_SIDE} rows per side, "
            f"got {a.shape[0]} and {b.shape[0]}"
        )
    train_a, test_a = _split(a.shape[0], rng.spawn("split-a"))
    train_b, test_b = _split(b.shape[0], rng.spawn("split-b"))

    scaler = Standardizer.fit(np.vstack([a[train_a], b[train_b]]))
    xa, xb = scaler.transform(a[train_a]), scaler.transform(b[train_b])
    batch = np.vstack([xa, xb])
    na = xa.shape[0]

    net = Mlp.zeros([a.shape[1], 1])
    opt = SgdMomentum(lr, momentum=0.9)
    for step in range(steps):
        cache = net.forward_cached(batch)
        # each domain weighs half, whatever the side sizes
        _, grad_a = binary_cross_entropy_with_logits(cache.output[:na], np.ones(na))
        _, grad_b = binary_cross_entropy_with_logits(
            cache.output[na:], np.zeros(batch.shape[0] - na)
        )
        upstream = 0.5 * np.vstack([grad_a, grad_b])
        grads = net.backward(cache, upstream).flat()
        opt.step(net.parameters(), grads, step_index=step)

    err_a = float(np.mean(net.forward(scaler.transform(a[test_a]))[:, 0] <= 0.0))
    err_b = float(np.mean(net.forward(scaler.transform(b[test_b]))[:, 0] > 0.0))
    return proxy_from_error(0.5 * (err_a + err_b))


def random_directions(count: int, dim: int, rng: Rng) -> DenseMatrix:
    """Unit vectors drawn uniformly from the sphere, one per row."""
    if count < 1 or dim < 1:
        raise ArgumentError("need at least one direction in at least one dimension")
    directions = rng.normal(count, dim)
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def _wasserstein_1d(pa: DenseMatrix, pb: DenseMatrix) -> np.ndarray:
    """Column-wise W1 between empirical distributions of unequal sizes."""
    return np.array(
        [wasserstein_distance(pa[:, k], pb[:, k]) for k in range(pa.shape[1])]
    )


def sliced_wasserstein(
    a: DenseMatrix,
    b: DenseMatrix,
    projections: int,
    rng: Rng,
    directions: Optional[DenseMatrix] = None,
) -> float:
    """Mean 1-D Wasserstein-1 distance over random unit projections.

    Passing ``directions`` fixes the projections, which makes the value a
    pseudo-metric (the triangle inequality then holds exactly).
    """
    _check_pair(a, b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ArgumentError("sliced Wasserstein needs non-empty samples")
    if directions is None:
        directions = random_directions(projections, a.shape[1], rng)
    elif directions.shape[1] != a.shape[1]:
        raise DimensionError(f"directions {directions.shape} vs dim {a.shape[1]}")
    return float(np.mean(_wasserstein_1d(a @ directions.T, b @ directions.T)))


def _risk(model: UDAModel, dataset: Optional[LabeledDataset]) -> Optional[float]:
    if dataset is None or len(dataset) == 0:
        return None
    return 1.0 - accuracy(model, dataset)


def _distance(
    rows: Optional[LabeledDataset],
    target: LabeledDataset,
    embed: Callable[[DenseMatrix], DenseMatrix],
    rng: Rng,
    cfg: MetricsConfig,
) -> Optional[float]:
    if rows is None or min(len(rows), len(target)) < MIN_ROWS_PER_SIDE:
        return None
    return a_distance(
        embed(rows.features),
        embed(target.features),
        rng,
        cfg.adist_steps,
        cfg.adist_lr,
    )


def _embedding(
    model: Optional[UDAModel], cfg: MetricsConfig
) -> Callable[[DenseMatrix], DenseMatrix]:
    if cfg.adist_space == "input":
        return lambda x: x
    if model is None:
        raise ArgumentError("feature-space distances need a trained classifier")
    return model.features


def proxy_distances(
    source: LabeledDataset,
    target: LabeledDataset,
    generated: Optional[LabeledDataset],
    augmented: LabeledDataset,
    rng: Rng,
    cfg: Optional[MetricsConfig] = None,
    model: Optional[UDAModel] = None,
) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    """d_A(source, target), d_A(generated, target), d_A(augmented, target).

    Distances are measured on ``model.features`` unless ``cfg.adist_space`` is
    "input". Any pairing with fewer than four rows on a side is None.
    """
    cfg = cfg or MetricsConfig()
    embed = _embedding(model, cfg)
    d_st = _distance(source, target, embed, rng.spawn("source-target"), cfg)
    d_gt = _distance(generated, target, embed, rng.spawn("generated-target"), cfg)
    d_at = _distance(augmented, target, embed, rng.spawn("augmented-target"), cfg)
    return d_st, d_gt, d_at


def bound_report(
    source: LabeledDataset,
    target: LabeledDataset,
    generated: Optional[LabeledDataset],
    augmented: LabeledDataset,
    model: UDAModel,
    rng: Rng,
    cfg: Optional[MetricsConfig] = None,
    source_rows: Optional[int] = None,
) -> BoundReport:
    """Empirical terms of the augmented-source adaptation bound.

    Generated-domain risk is measured against the labels the samples were
    conditioned on. ``source_rows`` is how many rows of ``augmented`` came from
    the original source; it defaults to ``len(source)``.
    """
    if len(augmented) == 0:
        raise ArgumentError("augmented source is empty")
    n_source = len(source) if source_rows is None else source_rows
    d_st, d_gt, d_at = proxy_distances(
        source, target, generated, augmented, rng, cfg, model
    )
    premise = None if d_gt is None or d_st is None else d_gt < d_st
    report = BoundReport(
        source_risk=1.0 - accuracy(model, source),
        generated_risk=_risk(model, generated),
        augmented_risk=1.0 - accuracy(model, augmented),
        d_source_target=d_st,
        d_generated_target=d_gt,
        d_augmented_target=d_at,
        mixing_fraction=min(n_source / len(augmented), 1.0),
        premise_holds=premise,
        distance_space=(cfg or MetricsConfig()).adist_space,
    )
    logger.info(
        "Bound terms estimated",
        d_source_target=d_st,
        d_generated_target=d_gt,
        d_augmented_target=d_at,
        premise_holds=report.premise_holds,
    )
    return report


def adist_table(
    d_source: Optional[float],
    d_generated: Optional[float],
    d_augmented: Optional[float],
) -> List[AdistRow]:
    """The three proxy distances as (pairing, distance) rows."""
    return [
        AdistRow(pairing="source<->target", distance=d_source),
        AdistRow(pairing="generated<->target", distance=d_generated),
        AdistRow(pairing="augmented<->target", distance=d_augmented),
    ]


def scatter_rows(
    datasets: Mapping[str, LabeledDataset], dims: Sequence[int] = (0, 1)
) -> List[Tuple[str, float, float, Optional[int]]]:
    """Flatten named datasets into (name, x, y, label) rows for plotting."""
    rows: List[Tuple[str, float, float, Optional[int]]] = []
    i, j = dims
    for name, ds in datasets.items():
        if max(i, j) >= ds.dim:
            raise DimensionError(f"{name} has dim {ds.dim}, cannot take {tuple(dims)}")
        for k in range(len(ds)):
            label = None if ds.labels is None else int(ds.labels[k])
            x, y = float(ds.features[k, i]), float(ds.features[k, j])
            rows.append((name, x, y, label))
    return rows
