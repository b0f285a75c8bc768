"""
Class-conditional denoising diffusion model.

The denoiser predicts the injected noise from (x_t, label, t). Timestep and
label are embedded into the same space and summed; the combined embedding is
concatenated to x_t and also added to every hidden pre-activation.
"""

from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import structlog

from dtskit.config import CdpmConfig
from dtskit.data import LabeledDataset, Labels
from dtskit.errors import (
    ArgumentError,
    DimensionError,
    LabelError,
    SamplingDivergedError,
    TrainingDivergedError,
)
from dtskit.numerics import (
    DenseMatrix,
    Mlp,
    MlpCache,
    Rng,
    SgdMomentum,
    all_finite,
    annealed_lr,
)
from dtskit.schedule import NoiseSchedule
from dtskit.schemas import DenoiserLossPoint, VlbReport

logger = structlog.get_logger(__name__)

Steps = Union[int, np.ndarray]


class NoisePredictor(Protocol):
    """Anything that maps (x_t, labels, t) to a noise estimate."""

    def predict_noise(self, x_t: DenseMatrix, labels: Labels, t: Steps) -> DenseMatrix:
        ...


def timestep_embedding(t: np.ndarray, dim: int) -> DenseMatrix:
    """Sinusoidal embedding with dim/2 geometric frequencies from 1 to 1e-4."""
    half = dim // 2
    exponents = np.arange(half) / max(half - 1, 1)
    freqs = 10000.0 ** (-exponents)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _per_row_steps(t: Steps, n: int) -> np.ndarray:
    steps = np.asarray(t, dtype=np.int64)
    if steps.ndim == 0:
        return np.full(n, int(steps), dtype=np.int64)
    if steps.shape != (n,):
        raise DimensionError(f"{steps.shape[0]} steps for {n} rows")
    return steps


@dataclass
class DenoiserCache:
    mlp: MlpCache
    embedding: DenseMatrix
    labels: Labels


@dataclass
class ConditionalDenoiser:
    backbone: Mlp
    label_embedding: DenseMatrix  # C x d_e
    embedding_projections: List[DenseMatrix]  # d_e x hidden width, per hidden layer
    time_dim: int

    def __post_init__(self) -> None:
        if self.label_embedding.shape[1] != self.time_dim:
            raise DimensionError("label embedding width must equal the time embedding")
        hidden = self.backbone.hidden_widths
        if len(self.embedding_projections) != len(hidden):
            raise DimensionError("one embedding projection per hidden layer required")
        for proj, width in zip(self.embedding_projections, hidden):
            if proj.shape != (self.time_dim, width):
                raise DimensionError(f"projection {proj.shape} vs hidden width {width}")
        if self.backbone.input_width != self.data_dim + self.time_dim:
            raise DimensionError("backbone input must be data dim + embedding dim")

    @classmethod
    def create(
        cls,
        data_dim: int,
        num_classes: int,
        hidden: Sequence[int],
        time_dim: int,
        activation: str,
        rng: Rng,
    ) -> "ConditionalDenoiser":
        widths = [data_dim + time_dim, *hidden, data_dim]
        backbone = Mlp.create(widths, activation, rng.spawn("backbone"))
        proj_rng = rng.spawn("projections")
        projections = []
        for width in hidden:
            limit = np.sqrt(6.0 / (time_dim + width))
            projections.append(proj_rng.uniform(-limit, limit, (time_dim, width)))
        label_embedding = rng.spawn("labels").normal(num_classes, time_dim)
        return cls(backbone, label_embedding, projections, time_dim)

    @property
    def data_dim(self) -> int:
        return self.backbone.output_width

    @property
    def num_classes(self) -> int:
        return int(self.label_embedding.shape[0])

    def parameters(self) -> List[np.ndarray]:
        return [
            *self.backbone.parameters(),
            *self.embedding_projections,
            self.label_embedding,
        ]

    def copy(self) -> "ConditionalDenoiser":
        return ConditionalDenoiser(
            self.backbone.copy(),
            self.label_embedding.copy(),
            [p.copy() for p in self.embedding_projections],
            self.time_dim,
        )

    def check_labels(self, labels: np.ndarray) -> None:
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise LabelError(
                f"labels must lie in [0, {self.num_classes}), "
                f"got range [{labels.min()}, {labels.max()}]"
            )

    def embed(self, labels: Labels, t: np.ndarray) -> DenseMatrix:
        return timestep_embedding(t, self.time_dim) + self.label_embedding[labels]

    def forward_cached(
        self, x_t: DenseMatrix, labels: Labels, t: Steps
    ) -> DenoiserCache:
        if x_t.ndim != 2 or x_t.shape[1] != self.data_dim:
            raise DimensionError(f"x_t shape {x_t.shape}, data dim {self.data_dim}")
        n = x_t.shape[0]
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.shape == (1,) and n != 1:
            labels = np.full(n, labels[0], dtype=np.int64)
        if labels.shape != (n,):
            raise DimensionError(f"{labels.shape[0]} labels for {n} rows")
        self.check_labels(labels)
        embedding = self.embed(labels, _per_row_steps(t, n))
        shifts = [embedding @ proj for proj in self.embedding_projections]
        cache = self.backbone.forward_cached(np.hstack([x_t, embedding]), shifts)
        return DenoiserCache(cache, embedding, labels)

    def predict_noise(self, x_t: DenseMatrix, labels: Labels, t: Steps) -> DenseMatrix:
        return self.forward_cached(x_t, labels, t).mlp.output

    def backward(self, cache: DenoiserCache, upstream: DenseMatrix) -> List[np.ndarray]:
        """Gradients of sum(upstream * output), ordered as parameters()."""
        grads = self.backbone.backward(cache.mlp, upstream)
        d_embedding = grads.input[:, self.data_dim :].copy()
        proj_grads = []
        for proj, g_shift in zip(self.embedding_projections, grads.hidden_shifts):
            proj_grads.append(cache.embedding.T @ g_shift)
            d_embedding += g_shift @ proj.T
        label_grad = np.zeros_like(self.label_embedding)
        np.add.at(label_grad, cache.labels, d_embedding)
        return [*grads.flat(), *proj_grads, label_grad]


def q_sample(
    sched: NoiseSchedule, x0: DenseMatrix, t: Steps, eps: DenseMatrix
) -> DenseMatrix:
    """Closed-form forward marginal sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ")
    steps = np.asarray(t, dtype=np.int64)
    if steps.ndim == 0:
        alpha_bar = sched.alpha_bar(sched.check_step(int(steps)))
        return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps
    steps = _per_row_steps(steps, x0.shape[0])
    for step in (steps.min(), steps.max()):
        sched.check_step(int(step))
    alpha_bar = sched.alpha_bars[steps][:, None]
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps


def q_step(
    sched: NoiseSchedule, x_prev: DenseMatrix, t: int, eps: DenseMatrix
) -> DenseMatrix:
    """One forward transition q(x_t | x_{t-1}) = N(sqrt(1 - b_t) x_{t-1}, b_t I)."""
    if x_prev.shape != eps.shape:
        raise DimensionError(f"x_prev {x_prev.shape} and eps {eps.shape} differ")
    beta = sched.beta(t)
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * eps


def noise_prediction_loss(
    predicted: DenseMatrix, eps: DenseMatrix
) -> Tuple[float, DenseMatrix]:
    """Mean over rows of ||eps - predicted||^2, with gradient w.r.t. predicted."""
    diff = predicted - eps
    n = diff.shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


@dataclass
class DenoiserLoss:
    loss: float
    grads: List[np.ndarray]
    timesteps: np.ndarray
    noise: DenseMatrix


def ddpm_loss(
    sched: NoiseSchedule,
    model: ConditionalDenoiser,
    x0_batch: DenseMatrix,
    labels: Labels,
    rng: Rng,
) -> DenoiserLoss:
    """Conditional noise-prediction loss with t ~ U{1..T}, eps ~ N(0, I)."""
    n = x0_batch.shape[0]
    if n == 0:
        raise ArgumentError("denoiser loss of an empty batch")
    model.check_labels(np.asarray(labels))
    t = rng.integers(1, sched.steps + 1, n)
    eps = rng.normal(n, x0_batch.shape[1])
    x_t = q_sample(sched, x0_batch, t, eps)
    cache = model.forward_cached(x_t, labels, t)
    loss, d_pred = noise_prediction_loss(cache.mlp.output, eps)
    return DenoiserLoss(loss, model.backward(cache, d_pred), t, eps)


def posterior_mean_variance(
    sched: NoiseSchedule, x0: DenseMatrix, x_t: DenseMatrix, t: int
) -> Tuple[DenseMatrix, float]:
    """Mean and variance of q(x_{t-1} | x_t, x0)."""
    beta = sched.beta(t)
    ab_t, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t - 1)
    coef_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    coef_xt = np.sqrt(sched.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab_t)
    return coef_x0 * x0 + coef_xt * x_t, sched.ancestral_sigma(t) ** 2


def model_mean(
    sched: NoiseSchedule, x_t: DenseMatrix, t: int, eps_hat: DenseMatrix
) -> DenseMatrix:
    """Mean of p_theta(x_{t-1} | x_t) given the predicted noise."""
    coef = sched.beta(t) / np.sqrt(1.0 - sched.alpha_bar(t))
    return (x_t - coef * eps_hat) / np.sqrt(sched.alpha(t))


def gaussian_kl(
    mean1: DenseMatrix, var1: float, mean2: DenseMatrix, var2: float
) -> np.ndarray:
    """Per-row KL(N(mean1, var1 I) || N(mean2, var2 I))."""
    d = mean1.shape[1]
    sq = np.sum((mean1 - mean2) ** 2, axis=1)
    return 0.5 * (d * (np.log(var2 / var1) + var1 / var2 - 1.0) + sq / var2)


def vlb_weight(sched: NoiseSchedule, t: int) -> float:
    """beta_t^2 / (2 sigma_t^2 alpha_t (1 - ab_t)); defined for t >= 2."""
    sigma2 = sched.ancestral_sigma(t) ** 2
    return sched.beta(t) ** 2 / (
        2.0 * sigma2 * sched.alpha(t) * (1.0 - sched.alpha_bar(t))
    )


def weighted_noise_error(
    sched: NoiseSchedule, t: int, eps: DenseMatrix, eps_hat: DenseMatrix
) -> np.ndarray:
    """Per-row transition KL written as a weighted noise error.

    With p_theta sharing the posterior variance, the additive constant is 0.
    """
    return vlb_weight(sched, t) * np.sum((eps - eps_hat) ** 2, axis=1)


def vlb(
    sched: NoiseSchedule,
    model: NoisePredictor,
    x0: DenseMatrix,
    label: int,
    rng: Rng,
    mc_samples: int,
) -> VlbReport:
    """Monte-Carlo estimate of every term of the variational bound for one row."""
    if mc_samples < 1:
        raise ArgumentError("mc_samples must be at least 1")
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, -1)
    d = x0.shape[1]
    labels = np.full(mc_samples, label, dtype=np.int64)
    rows = np.repeat(x0, mc_samples, axis=0)

    ab_T = sched.alpha_bar(sched.steps)
    prior_kl = gaussian_kl(np.sqrt(ab_T) * x0, 1.0 - ab_T, np.zeros_like(x0), 1.0)
    prior = float(prior_kl[0])

    transitions: List[float] = []
    weights: List[float] = []
    for t in range(2, sched.steps + 1):
        eps = rng.normal(mc_samples, d)
        x_t = q_sample(sched, rows, t, eps)
        eps_hat = model.predict_noise(x_t, labels, t)
        post_mean, post_var = posterior_mean_variance(sched, rows, x_t, t)
        p_mean = model_mean(sched, x_t, t, eps_hat)
        kl = gaussian_kl(post_mean, post_var, p_mean, post_var)
        transitions.append(float(kl.mean()))
        weights.append(vlb_weight(sched, t))

    # Decoder variance at t=1 is beta_1; the ancestral sigma_1 is 0.
    eps = rng.normal(mc_samples, d)
    x_1 = q_sample(sched, rows, 1, eps)
    mean = model_mean(sched, x_1, 1, model.predict_noise(x_1, labels, 1))
    var = sched.beta(1)
    sq = np.sum((rows - mean) ** 2, axis=1)
    nll = 0.5 * (sq / var + d * np.log(2.0 * np.pi * var))
    decoder = float(nll.mean())

    return VlbReport(
        prior_kl=prior,
        transition_kls=transitions,
        decoder_nll=decoder,
        weights=weights,
        total=prior + float(np.sum(transitions)) + decoder,
    )


def ancestral_sample(
    sched: NoiseSchedule,
    model: NoisePredictor,
    label: int,
    n: int,
    rng: Rng,
    add_noise: bool = True,
    x_init: Optional[DenseMatrix] = None,
) -> DenseMatrix:
    """Run the T-step stochastic reverse chain from x_T ~ N(0, I)."""
    if n < 1:
        raise ArgumentError("need at least one chain")
    labels = np.full(n, label, dtype=np.int64)
    if x_init is None:
        x = rng.normal(n, infer_data_dim(model, x_init))
    else:
        x = x_init.copy()
    if x.shape[0] != n:
        raise DimensionError(f"x_init has {x.shape[0]} rows, expected {n}")
    for t in range(sched.steps, 0, -1):
        x = model_mean(sched, x, t, model.predict_noise(x, labels, t))
        if t > 1 and add_noise:
            x = x + sched.ancestral_sigma(t) * rng.normal(*x.shape)
        if not all_finite(x):
            raise SamplingDivergedError("non-finite state in ancestral sampling", t)
    return x


def infer_data_dim(model: NoisePredictor, x_init: Optional[DenseMatrix]) -> int:
    if x_init is not None:
        return int(x_init.shape[1])
    dim = getattr(model, "data_dim", None)
    if dim is None:
        raise ArgumentError("model has no data_dim; pass x_init")
    return int(dim)


@dataclass
class CdpmTrainResult:
    model: ConditionalDenoiser
    trace: List[DenoiserLossPoint]
    steps_run: int
    converged: bool


def train_cdpm(
    sched: NoiseSchedule,
    model: ConditionalDenoiser,
    dataset: LabeledDataset,
    cfg: CdpmConfig,
    rng: Rng,
) -> CdpmTrainResult:
    """Minimise the noise-prediction loss until its moving average plateaus.

    Stops early once the moving average has not improved by a relative
    ``min_improvement`` for ``patience`` steps.
    """
    labels = dataset.require_labels()
    n = len(dataset)
    if n == 0:
        raise ArgumentError("cannot train a denoiser on an empty dataset")
    model = model.copy()
    params = model.parameters()
    opt = SgdMomentum(cfg.lr, cfg.momentum, cfg.clip_norm)
    batch_rng, noise_rng = rng.spawn("batches"), rng.spawn("noise")

    window: List[float] = []
    trace: List[DenoiserLossPoint] = []
    best, best_step = np.inf, 0
    converged = False
    step = 0
    moving = float("nan")
    for step in range(cfg.steps):
        idx = batch_rng.integers(0, n, min(cfg.batch_size, n))
        result = ddpm_loss(sched, model, dataset.features[idx], labels[idx], noise_rng)
        if not np.isfinite(result.loss):
            logger.error("Denoiser training diverged", stage="train-cdpm", step=step)
            raise TrainingDivergedError("non-finite denoiser loss", step)
        lr = annealed_lr(cfg.lr, step / max(cfg.steps, 1))
        opt.step(params, result.grads, lr=lr, step_index=step)

        window.append(result.loss)
        if len(window) > cfg.average_window:
            window.pop(0)
        moving = float(np.mean(window))
        if step % cfg.log_every == 0:
            trace.append(
                DenoiserLossPoint(step=step, loss=result.loss, moving_average=moving)
            )
            logger.info(
                "Denoiser training",
                stage="train-cdpm",
                step=step,
                loss=result.loss,
                moving_average=moving,
                lr=lr,
            )
        if len(window) == cfg.average_window:
            if moving < best * (1.0 - cfg.min_improvement):
                best, best_step = moving, step
            elif step - best_step >= cfg.patience:
                converged = True
                break

    steps_run = step + 1 if cfg.steps else 0
    if cfg.steps and (not trace or trace[-1].step != step):
        trace.append(
            DenoiserLossPoint(step=step, loss=result.loss, moving_average=moving)
        )
    logger.info(
        "Denoiser training finished",
        stage="train-cdpm",
        steps_run=steps_run,
        converged=converged,
    )
    return CdpmTrainResult(model, trace, steps_run, converged)
