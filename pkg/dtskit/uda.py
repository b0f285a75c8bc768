"""
Unsupervised domain adaptation: source cross-entropy plus a transfer
regulariser on transformed features, either a multi-kernel MMD or an
adversarial domain discriminator behind gradient reversal.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog

from dtskit.config import UdaConfig
from dtskit.data import LabeledDataset, Labels
from dtskit.errors import (
    ArgumentError,
    ConfigurationError,
    DimensionError,
    EstimatorError,
    LabelError,
    TrainingDivergedError,
)
from dtskit.numerics import (
    DenseMatrix,
    Mlp,
    Rng,
    SgdMomentum,
    annealed_lr,
    binary_cross_entropy_with_logits,
    log_softmax,
    softmax,
)
from dtskit.schemas import LossPoint

logger = structlog.get_logger(__name__)

REGULARIZERS = ("mmd", "adversarial")


@dataclass
class UDAModel:
    """Feature transform T, classifier head and optional domain discriminator."""

    transform: Mlp
    head: Mlp
    discriminator: Optional[Mlp]
    regularizer: str = "mmd"
    trade_off: float = 1.0

    def __post_init__(self) -> None:
        if self.head.input_width != self.transform.output_width:
            raise DimensionError(
                f"head input {self.head.input_width} != transform output "
                f"{self.transform.output_width}"
            )
        if self.discriminator is not None and (
            self.discriminator.input_width != self.transform.output_width
            or self.discriminator.output_width != 1
        ):
            raise DimensionError("discriminator must map features to one logit")
        if self.regularizer not in REGULARIZERS:
            raise ConfigurationError(f"unknown regularizer {self.regularizer!r}")
        if self.trade_off < 0.0:
            raise ConfigurationError("trade-off weight must be non-negative")

    @classmethod
    def create(
        cls, input_dim: int, num_classes: int, cfg: UdaConfig, rng: Rng
    ) -> "UDAModel":
        transform = Mlp.create(
            [input_dim, *cfg.transform_hidden, cfg.feature_dim],
            cfg.activation,
            rng.spawn("transform"),
        )
        head = Mlp.create(
            [cfg.feature_dim, *cfg.head_hidden, num_classes],
            cfg.activation,
            rng.spawn("head"),
        )
        discriminator = None
        if cfg.regularizer == "adversarial":
            discriminator = Mlp.create(
                [cfg.feature_dim, *cfg.discriminator_hidden, 1],
                cfg.activation,
                rng.spawn("discriminator"),
            )
        return cls(transform, head, discriminator, cfg.regularizer, cfg.trade_off)

    @property
    def num_classes(self) -> int:
        return self.head.output_width

    @property
    def input_dim(self) -> int:
        return self.transform.input_width

    def parameters(self) -> List[np.ndarray]:
        params = [*self.transform.parameters(), *self.head.parameters()]
        if self.discriminator is not None:
            params.extend(self.discriminator.parameters())
        return params

    def copy(self) -> "UDAModel":
        return UDAModel(
            self.transform.copy(),
            self.head.copy(),
            None if self.discriminator is None else self.discriminator.copy(),
            self.regularizer,
            self.trade_off,
        )

    def features(self, x: DenseMatrix) -> DenseMatrix:
        return self.transform.forward(x)

    def logits(self, x: DenseMatrix) -> DenseMatrix:
        return self.head.forward(self.transform.forward(x))

    def probabilities(self, x: DenseMatrix) -> DenseMatrix:
        return softmax(self.logits(x))

    def predict(self, x: DenseMatrix) -> Labels:
        return np.argmax(self.logits(x), axis=1).astype(np.int64)


def cross_entropy(logits: DenseMatrix, labels: Labels) -> Tuple[float, DenseMatrix]:
    """Mean negative log-softmax of the true class, with its gradient."""
    n = logits.shape[0]
    if n == 0:
        raise ArgumentError("cross-entropy of an empty batch")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape} labels for {n} logits")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise LabelError(f"labels must lie in [0, {logits.shape[1]})")
    rows = np.arange(n)
    loss = -float(log_softmax(logits)[rows, labels].mean())
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def _pairwise_sq_dists(x: DenseMatrix, y: DenseMatrix) -> DenseMatrix:
    xx = np.sum(x * x, axis=1, keepdims=True)
    yy = np.sum(y * y, axis=1, keepdims=True)
    return np.maximum(xx + yy.T - 2.0 * x @ y.T, 0.0)


def median_heuristic(a: DenseMatrix, b: DenseMatrix) -> float:
    """Square root of the median positive pairwise squared distance of a ∪ b."""
    pooled = np.vstack([a, b])
    d2 = _pairwise_sq_dists(pooled, pooled)
    upper = d2[np.triu_indices(pooled.shape[0], k=1)]
    upper = upper[upper > 0.0]
    if upper.size == 0:
        return 1.0
    return float(np.sqrt(np.median(upper)))


def multi_kernel_bandwidths(
    a: DenseMatrix, b: DenseMatrix, multipliers: Sequence[float]
) -> List[float]:
    base = median_heuristic(a, b)
    return [base * m for m in multipliers]


@dataclass
class MmdResult:
    value: float  # clipped at 0, for reporting
    raw: float
    grad_a: DenseMatrix
    grad_b: DenseMatrix


def mmd(
    a: DenseMatrix,
    b: DenseMatrix,
    bandwidths: Sequence[float],
    unbiased: bool = True,
) -> MmdResult:
    """Multi-kernel RBF MMD^2 and its gradient with bandwidths held fixed."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cannot compare shapes {a.shape} and {b.shape}")
    m, n = a.shape[0], b.shape[0]
    if m == 0 or n == 0:
        raise EstimatorError("MMD needs non-empty samples")
    if unbiased and (m < 2 or n < 2):
        raise EstimatorError("unbiased MMD needs at least two rows per sample")
    if not bandwidths:
        raise ArgumentError("at least one bandwidth required")

    d_aa = _pairwise_sq_dists(a, a)
    d_bb = _pairwise_sq_dists(b, b)
    d_ab = _pairwise_sq_dists(a, b)
    k_aa, k_bb, k_ab = np.zeros_like(d_aa), np.zeros_like(d_bb), np.zeros_like(d_ab)
    # kernel sums weighted by 1/gamma^2, for gradients
    g_aa, g_bb, g_ab = np.zeros_like(d_aa), np.zeros_like(d_bb), np.zeros_like(d_ab)
    for gamma in bandwidths:
        inv = 1.0 / (2.0 * gamma * gamma)
        e_aa = np.exp(-d_aa * inv)
        e_bb = np.exp(-d_bb * inv)
        e_ab = np.exp(-d_ab * inv)
        k_aa += e_aa
        k_bb += e_bb
        k_ab += e_ab
        g_aa += e_aa / gamma**2
        g_bb += e_bb / gamma**2
        g_ab += e_ab / gamma**2

    if unbiased:
        c_aa, c_bb = 1.0 / (m * (m - 1)), 1.0 / (n * (n - 1))
        sum_aa = k_aa.sum() - np.trace(k_aa)
        sum_bb = k_bb.sum() - np.trace(k_bb)
    else:
        c_aa, c_bb = 1.0 / (m * m), 1.0 / (n * n)
        sum_aa, sum_bb = k_aa.sum(), k_bb.sum()
    c_ab = 1.0 / (m * n)
    raw = float(c_aa * sum_aa + c_bb * sum_bb - 2.0 * c_ab * k_ab.sum())

    # d/dx exp(-|x-y|^2 / 2g^2) = -exp(.) (x - y) / g^2; diagonal pairs contribute 0.
    grad_a = -2.0 * c_aa * (a * g_aa.sum(axis=1, keepdims=True) - g_aa @ a)
    grad_a += 2.0 * c_ab * (a * g_ab.sum(axis=1, keepdims=True) - g_ab @ b)
    grad_b = -2.0 * c_bb * (b * g_bb.sum(axis=1, keepdims=True) - g_bb @ b)
    grad_b += 2.0 * c_ab * (b * g_ab.sum(axis=0)[:, None] - g_ab.T @ a)
    return MmdResult(max(raw, 0.0), raw, grad_a, grad_b)


@dataclass
class AdversarialResult:
    loss: float
    discriminator_grads: List[np.ndarray]
    grad_source: DenseMatrix  # already sign-reversed
    grad_target: DenseMatrix  # already sign-reversed
    discriminator_accuracy: float


def adversarial_reg(
    model: UDAModel, src_feats: DenseMatrix, tgt_feats: DenseMatrix
) -> AdversarialResult:
    """Domain BCE (source = 1, target = 0).

    The discriminator gradients descend the BCE; the feature gradients are
    returned reversed, so the transform ascends it.
    """
    if model.discriminator is None:
        raise ConfigurationError("adversarial regulariser needs a discriminator")
    feats = np.vstack([src_feats, tgt_feats])
    ns, nt = src_feats.shape[0], tgt_feats.shape[0]
    targets = np.concatenate([np.ones(ns), np.zeros(nt)])
    cache = model.discriminator.forward_cached(feats)
    loss, d_logits = binary_cross_entropy_with_logits(cache.output, targets)
    grads = model.discriminator.backward(cache, d_logits)
    reversed_input = -grads.input
    accuracy = float(np.mean((cache.output[:, 0] > 0.0) == (targets > 0.5)))
    return AdversarialResult(
        loss, grads.flat(), reversed_input[:ns], reversed_input[ns:], accuracy
    )


def trade_off_schedule(progress: float) -> float:
    """Warm-up ramp 2 / (1 + exp(-10 p)) - 1, from 0 to ~1."""
    return float(2.0 / (1.0 + np.exp(-10.0 * progress)) - 1.0)


@dataclass
class TrainResult:
    model: UDAModel
    trace: List[LossPoint]
    discriminator_accuracy: List[float]


def _fit(
    source: LabeledDataset,
    target: Optional[LabeledDataset],
    model: UDAModel,
    cfg: UdaConfig,
    rng: Rng,
    steps: int,
    stage_name: str,
) -> TrainResult:
    labels = source.require_labels()
    if len(source) == 0:
        raise ArgumentError("cannot train on an empty source domain")
    if source.dim != model.input_dim:
        raise DimensionError(
            f"source dim {source.dim} != model input {model.input_dim}"
        )
    regularize = target is not None and model.trade_off > 0.0
    if regularize and target is not None and len(target) < 2:
        raise ArgumentError("the target domain needs at least two rows")

    model = model.copy()
    params = model.parameters()
    n_transform = len(model.transform.parameters())
    n_head = len(model.head.parameters())
    opt = SgdMomentum(cfg.lr, cfg.momentum)
    source_rng = rng.spawn("source-batches")
    target_rng = rng.spawn("target-batches")

    trace: List[LossPoint] = []
    disc_accuracy: List[float] = []
    for step in range(steps):
        progress = step / steps
        lr = annealed_lr(cfg.lr, progress)
        lam = model.trade_off * (trade_off_schedule(progress) if cfg.warmup else 1.0)

        idx = source_rng.integers(0, len(source), cfg.batch_size)
        fs_cache = model.transform.forward_cached(source.features[idx])
        head_cache = model.head.forward_cached(fs_cache.output)
        task_loss, d_logits = cross_entropy(head_cache.output, labels[idx])
        head_grads = model.head.backward(head_cache, d_logits)
        d_fs = head_grads.input

        reg_loss = 0.0
        disc_grads = [np.zeros_like(p) for p in params[n_transform + n_head :]]
        transform_grads = None
        if regularize and target is not None:
            t_idx = target_rng.integers(0, len(target), cfg.batch_size)
            ft_cache = model.transform.forward_cached(target.features[t_idx])
            fs, ft = fs_cache.output, ft_cache.output
            if model.regularizer == "mmd":
                bandwidths = multi_kernel_bandwidths(fs, ft, cfg.bandwidth_multipliers)
                result = mmd(fs, ft, bandwidths)
                reg_loss = result.raw
                d_fs = d_fs + lam * result.grad_a
                d_ft = lam * result.grad_b
            else:
                adv = adversarial_reg(model, fs, ft)
                reg_loss = adv.loss
                d_fs = d_fs + lam * adv.grad_source
                d_ft = lam * adv.grad_target
                disc_grads = adv.discriminator_grads
                disc_accuracy.append(adv.discriminator_accuracy)
            transform_grads = model.transform.backward(ft_cache, d_ft).flat()

        source_grads = model.transform.backward(fs_cache, d_fs).flat()
        if transform_grads is not None:
            source_grads = [g1 + g2 for g1, g2 in zip(source_grads, transform_grads)]

        total = task_loss + lam * reg_loss
        if not np.isfinite(total):
            logger.error("Classifier training diverged", stage=stage_name, step=step)
            raise TrainingDivergedError("non-finite classifier loss", step)
        opt.step(params, [*source_grads, *head_grads.flat(), *disc_grads], lr, step)

        if step % cfg.log_every == 0 or step == steps - 1:
            trace.append(
                LossPoint(
                    step=step,
                    task_loss=task_loss,
                    reg_loss=reg_loss,
                    lambda_effective=lam,
                )
            )
            logger.info(
                "Classifier training",
                stage=stage_name,
                step=step,
                task_loss=task_loss,
                reg_loss=reg_loss,
                lambda_effective=lam,
                lr=lr,
            )
    return TrainResult(model, trace, disc_accuracy)


def train_uda(
    source: LabeledDataset,
    target: LabeledDataset,
    model: UDAModel,
    cfg: UdaConfig,
    rng: Rng,
    steps: Optional[int] = None,
    stage_name: str = "train-uda",
) -> TrainResult:
    """Minimise mean source cross-entropy + lambda R(T(source), T(target)).

    Target labels, if any, are ignored.
    """
    return _fit(
        source,
        target.unlabeled(),
        model,
        cfg,
        rng,
        cfg.steps if steps is None else steps,
        stage_name,
    )


def train_source_only(
    source: LabeledDataset,
    model: UDAModel,
    cfg: UdaConfig,
    rng: Rng,
    steps: Optional[int] = None,
) -> TrainResult:
    """Plain empirical risk minimisation on the source domain."""
    return _fit(
        source, None, model, cfg, rng, cfg.steps if steps is None else steps, "erm"
    )


def pseudo_label(model: UDAModel, target: LabeledDataset) -> LabeledDataset:
    """Assign every target row the classifier's argmax class."""
    labels = model.predict(target.features)
    return LabeledDataset(target.features, labels, target.domain)


def accuracy(model: UDAModel, labeled: LabeledDataset) -> float:
    labels = labeled.require_labels()
    if len(labeled) == 0:
        raise ArgumentError("accuracy of an empty dataset")
    return float(np.mean(model.predict(labeled.features) == labels))
