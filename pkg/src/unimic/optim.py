"""Learning-rate schedules, applied per step so resumed runs replay them exactly."""

from __future__ import annotations

import math

import torch


def cosine_lr(base: float, step: int, steps: int) -> float:
    """Half-cosine decay from ``base`` at step 0 towards 0 at ``steps``."""
    return base * 0.5 * (1.0 + math.cos(math.pi * step / max(steps, 1)))


def scheduled_lr(schedule: str, base: float, step: int, steps: int) -> float:
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return cosine_lr(base, step, steps)
    raise ValueError(f"unknown learning-rate schedule {schedule!r}")


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr
