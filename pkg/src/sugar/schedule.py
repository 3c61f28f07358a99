"""Forward noising process and reverse sampling steps (noise-prediction form).

Timesteps are 0-indexed: level t carries signal sqrt(alpha_bar[t]). The
deterministic sampler may target the virtual level -1, meaning alpha_bar = 1
(fully clean), which makes oracle inversion exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule: betas in (0,1), alphas = 1-betas, cumulative products."""

    timesteps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at level t; t == -1 denotes the clean state (1.0)."""
        if t == -1:
            return 1.0
        return float(self.alpha_bars[t])


def make_linear_schedule(timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linearly spaced betas with consistent derived arrays."""
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(timesteps=timesteps, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _check_t(sched: NoiseSchedule, t: int, low: int = 0) -> None:
    if not (low <= t < sched.timesteps):
        raise ValueError(f"t={t} outside [{low}, {sched.timesteps})")


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noise x0 to level t: sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps."""
    _check_t(sched, t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"q_sample shapes {x0.shape} vs {eps.shape}")
    ab = sched.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Algebraic inversion of q_sample given a noise estimate."""
    _check_t(sched, t)
    ab = sched.alpha_bar(t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddpm_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule, rng: Rng) -> np.ndarray:
    """Ancestral reverse step t -> t-1; the t=1 step adds no noise."""
    _check_t(sched, t, low=1)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"ddpm_step shapes {x_t.shape} vs {eps_hat.shape}")
    beta = float(sched.betas[t])
    alpha = float(sched.alphas[t])
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t - 1)
    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    mean = (np.sqrt(ab_prev) * beta * x0_hat + np.sqrt(alpha) * (1.0 - ab_prev) * x_t) / (1.0 - ab_t)
    if t == 1:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + np.sqrt(var) * rng.normal(x_t.shape)


def ddim_step(x_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta=0) jump from level t to level t_prev (-1 = clean)."""
    _check_t(sched, t)
    if not (-1 <= t_prev < t):
        raise ValueError(f"ddim_step needs -1 <= t_prev < t, got t={t}, t_prev={t_prev}")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"ddim_step shapes {x_t.shape} vs {eps_hat.shape}")
    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    ab_prev = sched.alpha_bar(t_prev)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def ddim_timesteps(timesteps: int, steps: int) -> list[tuple[int, int]]:
    """Uniform (t, t_prev) pairs from level timesteps-1 down to the clean state."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    steps = min(steps, timesteps)
    grid = np.linspace(timesteps - 1, -1, steps + 1)
    levels = np.rint(grid).astype(int).tolist()
    return [(int(a), int(b)) for a, b in zip(levels[:-1], levels[1:])]
