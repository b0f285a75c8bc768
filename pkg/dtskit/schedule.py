"""
Diffusion noise schedule: betas, cumulative alphas, ancestral sigmas and
log-SNR, all precomputed once.

Tables are indexed by step t in 1..T; alpha_bars additionally stores
alpha_bar_0 = 1 at index 0. Two sigma conventions live side by side:
ancestral_sigma(t) is the reverse-chain noise scale, solver_sigma(t) is
sqrt(1 - alpha_bar_t) as used by the fast solver.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from dtskit.config import ScheduleConfig
from dtskit.errors import ConfigurationError, StepIndexError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray  # index 0 unused
    alphas: np.ndarray  # index 0 unused
    alpha_bars: np.ndarray  # alpha_bars[0] == 1
    ancestral_sigmas: np.ndarray  # index 0 unused
    log_snrs: np.ndarray  # index 0 unused

    def check_step(self, t: int) -> int:
        if not 1 <= t <= self.steps:
            raise StepIndexError(f"step {t} outside 1..{self.steps}")
        return int(t)

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_step(t)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self.check_step(t)])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bars[self.check_step(t)])

    def ancestral_sigma(self, t: int) -> float:
        return float(self.ancestral_sigmas[self.check_step(t)])

    def solver_alpha(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bars[self.check_step(t)]))

    def solver_sigma(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bars[self.check_step(t)]))

    def log_snr(self, t: int) -> float:
        return float(self.log_snrs[self.check_step(t)])

    def table(self) -> List[Tuple[int, float, float, float, float, float]]:
        """Rows of (t, beta, alpha, alpha_bar, ancestral sigma, log-SNR)."""
        return [
            (
                t,
                float(self.betas[t]),
                float(self.alphas[t]),
                float(self.alpha_bars[t]),
                float(self.ancestral_sigmas[t]),
                float(self.log_snrs[t]),
            )
            for t in range(1, self.steps + 1)
        ]


def linear_schedule(steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Betas linearly spaced from beta_start to beta_end inclusive."""
    if steps < 2:
        raise ConfigurationError(f"schedule needs at least 2 steps, got {steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )

    betas = np.concatenate(([0.0], np.linspace(beta_start, beta_end, steps)))
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)  # alphas[0] == 1 so alpha_bars[0] == 1

    ancestral = np.zeros(steps + 1)
    ancestral[1:] = np.sqrt(
        (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
    )

    log_snrs = np.zeros(steps + 1)
    log_snrs[1:] = 0.5 * (np.log(alpha_bars[1:]) - np.log1p(-alpha_bars[1:]))

    return NoiseSchedule(
        steps=steps,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        ancestral_sigmas=ancestral,
        log_snrs=log_snrs,
    )


def log_snr(sched: NoiseSchedule, t: int) -> float:
    return sched.log_snr(t)


def schedule_table(
    sched: NoiseSchedule,
) -> List[Tuple[int, float, float, float, float, float]]:
    return sched.table()


def schedule_from_config(cfg: ScheduleConfig) -> NoiseSchedule:
    return linear_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
