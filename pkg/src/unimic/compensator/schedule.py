"""Linear-beta noise schedule, forward diffusion and the DDIM update."""

from __future__ import annotations

import numpy as np
import torch


class NoiseSchedule:
    """``alphas_cumprod[t]`` for t in 0..T, with ``alphas_cumprod[0] == 1``."""

    def __init__(self, num_timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if num_timesteps < 1:
            raise ValueError("need at least one timestep")
        self.num_timesteps = num_timesteps
        self.betas = torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64)
        if not bool(((self.betas > 0) & (self.betas < 1)).all()):
            raise ValueError("betas must lie in (0, 1)")
        cumprod = torch.cumprod(1.0 - self.betas, dim=0)
        self.alphas_cumprod = torch.cat([torch.ones(1, dtype=torch.float64), cumprod])

    @property
    def T(self) -> int:
        return self.num_timesteps

    def alpha_bar(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if bool(((t < 0) | (t > self.num_timesteps)).any()):
            raise ValueError(f"timestep out of range [0, {self.num_timesteps}]: {t.tolist()}")
        return self.alphas_cumprod[t]


def _bcast(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(like.dtype)
    return coef.view(-1, *([1] * (like.dim() - 1))) if coef.dim() else coef


def forward_diffuse(schedule: NoiseSchedule, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps; ``t`` scalar or one per batch item."""
    abar = schedule.alpha_bar(t)
    return _bcast(abar.sqrt(), z0) * z0 + _bcast((1.0 - abar).sqrt(), z0) * eps


def predict_z0(schedule: NoiseSchedule, z_t: torch.Tensor, t: int, eps_hat: torch.Tensor) -> torch.Tensor:
    abar = schedule.alpha_bar(t)
    if float(abar) <= 0.0:
        raise ZeroDivisionError(f"alpha_bar at t={t} is zero")
    return (z_t - (1.0 - abar).sqrt().to(z_t.dtype) * eps_hat) / abar.sqrt().to(z_t.dtype)


def ddim_step(
    schedule: NoiseSchedule,
    z_t: torch.Tensor,
    t: int,
    t_prev: int,
    eps_hat: torch.Tensor,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """One DDIM update from t to t_prev; eta=0 is fully deterministic."""
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    z0_hat = predict_z0(schedule, z_t, t, eps_hat)
    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t_prev)
    if t_prev == 0:
        # abar_0 = 1: the last step lands on the clean estimate
        return z0_hat
    sigma = eta * torch.sqrt((1 - abar_prev) / (1 - abar_t)) * torch.sqrt(1 - abar_t / abar_prev)
    direction = torch.sqrt((1 - abar_prev - sigma**2).clamp_min(0.0))
    z_prev = abar_prev.sqrt().to(z_t.dtype) * z0_hat + direction.to(z_t.dtype) * eps_hat
    if eta > 0:
        noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
        z_prev = z_prev + sigma.to(z_t.dtype) * noise
    return z_prev


def ddim_timesteps(num_timesteps: int, steps: int) -> list[int]:
    """Descending timesteps T = t_0 > ... > t_steps = 0, evenly spaced."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ts = np.round(np.linspace(num_timesteps, 0, steps + 1)).astype(int)
    if len(set(ts.tolist())) != len(ts):
        raise ValueError(f"{steps} steps do not fit in {num_timesteps} timesteps")
    return ts.tolist()
