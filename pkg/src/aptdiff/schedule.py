"""Discrete-time diffusion math.

Closed-form noising, x0 prediction, ancestral (DDPM) reverse steps and
classifier-free guidance. Epsilon parameterization throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from aptdiff.constants import BETA_END, BETA_START, NUM_TIMESTEPS


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance increments and their cumulative signal products.

    Tensors are float64; coefficients are cast to the input dtype when used.
    """

    T: int
    betas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def alphas(self) -> torch.Tensor:
        return 1.0 - self.betas

    def signal_coef(self, t: int | torch.Tensor) -> torch.Tensor:
        """sqrt(alpha_bar_t)."""
        return self.alpha_bars[_as_index(t, self.T)].sqrt()

    def noise_coef(self, t: int | torch.Tensor) -> torch.Tensor:
        """sigma_t = sqrt(1 - alpha_bar_t)."""
        return (1.0 - self.alpha_bars[_as_index(t, self.T)]).sqrt()


def make_schedule(
    T: int = NUM_TIMESTEPS,
    beta_start: float = BETA_START,
    beta_end: float = BETA_END,
) -> NoiseSchedule:
    """Build a linear beta schedule.

    Raises:
        ValueError: If ``T < 2`` or the betas are outside ``0 < start <= end < 1``.
    """
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"Need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    betas = torch.linspace(beta_start, beta_end, int(T), dtype=torch.float64)
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(T=int(T), betas=betas, alpha_bars=alpha_bars)


def _as_index(t: int | torch.Tensor, T: int) -> torch.Tensor:
    idx = torch.as_tensor(t, dtype=torch.long)
    if idx.numel() == 0:
        raise ValueError("Timestep tensor must not be empty")
    if bool((idx < 0).any()) or bool((idx >= T).any()):
        raise ValueError(f"Timestep out of range [0, {T}): {t}")
    return idx


def _broadcast(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Reshape a scalar or per-sample coefficient to broadcast against ``like``."""
    coef = coef.to(dtype=like.dtype, device=like.device)
    if coef.ndim == 0:
        return coef
    if coef.shape[0] != like.shape[0]:
        raise ValueError(
            f"Per-sample timesteps ({coef.shape[0]}) do not match "
            f"batch size ({like.shape[0]})"
        )
    return coef.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(
    x0: torch.Tensor,
    eps: torch.Tensor,
    t: int | torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Jump straight to step ``t``: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"Shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    a = _broadcast(schedule.signal_coef(t), x0)
    s = _broadcast(schedule.noise_coef(t), x0)
    return a * x0 + s * eps


def predict_x0(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int | torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Invert the noising equation given a noise estimate."""
    if x_t.shape != eps_hat.shape:
        raise ValueError(
            f"Shape mismatch: x_t {tuple(x_t.shape)} vs eps_hat {tuple(eps_hat.shape)}"
        )
    a = _broadcast(schedule.signal_coef(t), x_t)
    s = _broadcast(schedule.noise_coef(t), x_t)
    return (x_t - s * eps_hat) / a


def posterior_mean(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Mean of p(x_{t-1} | x_t) under the epsilon parameterization."""
    idx = _as_index(t, schedule.T)
    beta = schedule.betas[idx]
    alpha = 1.0 - beta
    sigma = (1.0 - schedule.alpha_bars[idx]).sqrt()
    coef_eps = _broadcast(beta / sigma, x_t)
    scale = _broadcast(1.0 / alpha.sqrt(), x_t)
    return scale * (x_t - coef_eps * eps_hat)


def posterior_variance(t: int, schedule: NoiseSchedule) -> torch.Tensor:
    """beta_tilde_t = beta_t * (1 - ab_{t-1}) / (1 - ab_t); zero at t = 0."""
    idx = int(_as_index(t, schedule.T))
    if idx == 0:
        return torch.zeros((), dtype=torch.float64)
    ab = schedule.alpha_bars
    return schedule.betas[idx] * (1.0 - ab[idx - 1]) / (1.0 - ab[idx])


def sample_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """One ancestral reverse step x_t -> x_{t-1}.

    The last step (t = 0) returns the posterior mean and draws no noise.
    """
    if x_t.shape != eps_hat.shape:
        raise ValueError(
            f"Shape mismatch: x_t {tuple(x_t.shape)} vs eps_hat {tuple(eps_hat.shape)}"
        )
    if not isinstance(t, int) and torch.as_tensor(t).numel() != 1:
        raise ValueError("sample_step takes a single timestep shared by the batch")
    t = int(t)
    mean = posterior_mean(x_t, eps_hat, t, schedule)
    if t == 0:
        return mean
    z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype, device=x_t.device)
    std = posterior_variance(t, schedule).sqrt().to(dtype=x_t.dtype)
    return mean + std * z


def cfg_combine(
    eps_uncond: torch.Tensor, eps_cond: torch.Tensor, w: float
) -> torch.Tensor:
    """Classifier-free guidance: eps_u + w * (eps_c - eps_u)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(
            f"Shape mismatch: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}"
        )
    return eps_uncond + w * (eps_cond - eps_uncond)


def denoising_loss(
    eps: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int | torch.Tensor | None = None,
    omega: torch.Tensor | None = None,
) -> torch.Tensor:
    """Per-sample weighted denoising loss omega(t) * mean((eps - eps_hat)^2).

    Returns a tensor of shape (batch,). ``omega`` is an optional vector of
    length T of per-timestep weights; it defaults to 1 everywhere.
    """
    if eps.shape != eps_hat.shape:
        raise ValueError(
            f"Shape mismatch: eps {tuple(eps.shape)} vs eps_hat {tuple(eps_hat.shape)}"
        )
    per_sample = (eps - eps_hat).pow(2).flatten(1).mean(dim=1)
    if omega is None:
        return per_sample
    if t is None:
        raise ValueError("Timesteps are required when omega weights are given")
    idx = _as_index(t, omega.shape[0])
    w = omega[idx].to(dtype=per_sample.dtype, device=per_sample.device)
    return per_sample * w
