"""
Multistep second-order fast sampler over a log-SNR-uniform time grid.

Each transition from t_{i-1} to t_i, with h_i = lambda(t_i) - lambda(t_{i-1}):

    W_i   = (1 + 1/(2 r_i)) m(x_{t_{i-1}}) - h_i / (2 h_{i-1}) m(x_{t_{i-2}})
    x_t_i = (sigma_t_i / sigma_t_{i-1}) x_t_{i-1} - alpha_t_i (exp(-h_i) - 1) W_i

with r_i = h_{i-1} / h_i, alpha = sqrt(ab), sigma = sqrt(1 - ab), and the first
transition taking W_1 = m(x_{t_0}). The model output m is either the data
estimate (x - sigma eps_hat) / alpha ("data_prediction") or eps_hat itself
("as_printed").
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import structlog

from dtskit.cdpm import NoisePredictor, infer_data_dim
from dtskit.errors import ArgumentError, PlanError, SamplingDivergedError
from dtskit.numerics import DenseMatrix, Rng, all_finite
from dtskit.schedule import NoiseSchedule

logger = structlog.get_logger(__name__)

MODEL_FORMS = ("data_prediction", "as_printed")


@dataclass(frozen=True)
class SamplerPlan:
    timesteps: Tuple[int, ...]  # t_0 = T (noisiest) down to t_M
    lambdas: Tuple[float, ...]
    label: int

    @property
    def steps(self) -> int:
        return len(self.timesteps) - 1

    @property
    def step_sizes(self) -> Tuple[float, ...]:
        """h_1..h_M."""
        return tuple(b - a for a, b in zip(self.lambdas[:-1], self.lambdas[1:]))


def make_plan(sched: NoiseSchedule, steps: int, label: int) -> SamplerPlan:
    """Time grid uniform in log-SNR between step T and step 1.

    Each interior target is snapped to the nearest discrete step that keeps
    the grid strictly decreasing and leaves room for the remaining points, so
    the plan always has exactly ``steps`` transitions. ``steps >= T - 1``
    uses every step.
    """
    if not 2 <= steps <= sched.steps:
        raise PlanError(f"solver steps must be in [2, {sched.steps}], got {steps}")
    table = sched.log_snrs[1:]  # table[k] is step k + 1, strictly decreasing

    if steps >= sched.steps - 1:
        grid = list(range(sched.steps, 0, -1))
    else:
        targets = np.linspace(table[-1], table[0], steps + 1)
        grid = [sched.steps]
        for k in range(1, steps):
            nearest = int(np.argmin(np.abs(table - targets[k]))) + 1
            grid.append(min(max(nearest, steps - k + 1), grid[-1] - 1))
        grid.append(1)
    if len(grid) < 3:
        raise PlanError(f"only {len(grid)} distinct grid points for {steps} steps")

    lambdas = tuple(sched.log_snr(t) for t in grid)
    return SamplerPlan(tuple(grid), lambdas, int(label))


def _model_output(
    model: NoisePredictor,
    sched: NoiseSchedule,
    x: DenseMatrix,
    labels: np.ndarray,
    t: int,
    model_form: str,
) -> DenseMatrix:
    eps_hat = model.predict_noise(x, labels, t)
    if model_form == "as_printed":
        return eps_hat
    return (x - sched.solver_sigma(t) * eps_hat) / sched.solver_alpha(t)


def multistep_sample(
    sched: NoiseSchedule,
    model: NoisePredictor,
    plan: SamplerPlan,
    n: int,
    rng: Rng,
    model_form: str = "data_prediction",
    x_init: Optional[DenseMatrix] = None,
) -> DenseMatrix:
    """Deterministic given the initial noise; returns x at the last grid step."""
    if model_form not in MODEL_FORMS:
        raise ArgumentError(f"unknown model form {model_form!r}")
    if n < 1:
        raise ArgumentError("need at least one chain")
    if plan.steps < 2:
        raise PlanError("the second-order solver needs at least 2 steps")
    num_classes = getattr(model, "num_classes", None)
    if num_classes is not None and not 0 <= plan.label < num_classes:
        raise PlanError(f"plan label {plan.label} outside [0, {num_classes})")

    labels = np.full(n, plan.label, dtype=np.int64)
    if x_init is None:
        x = rng.normal(n, infer_data_dim(model, x_init))
    else:
        x = x_init.copy()

    previous: Optional[DenseMatrix] = None
    h_prev = 0.0
    for i in range(1, plan.steps + 1):
        t_prev, t_cur = plan.timesteps[i - 1], plan.timesteps[i]
        h = plan.lambdas[i] - plan.lambdas[i - 1]
        current = _model_output(model, sched, x, labels, t_prev, model_form)
        if previous is None:
            w = current
        else:
            r = h_prev / h
            c_cur = 1.0 + 1.0 / (2.0 * r)
            c_prev = -h / (2.0 * h_prev)
            if abs(c_cur + c_prev - 1.0) > 1e-9:
                raise PlanError(f"extrapolation weights do not sum to 1 at step {i}")
            w = c_cur * current + c_prev * previous
        ratio = sched.solver_sigma(t_cur) / sched.solver_sigma(t_prev)
        x = ratio * x - sched.solver_alpha(t_cur) * np.expm1(-h) * w
        if not all_finite(x):
            raise SamplingDivergedError("non-finite state in multistep solver", i)
        previous, h_prev = current, h
    return x
