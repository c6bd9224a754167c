"""Distortion-perception dial between the basic decode and the compensated image."""

from __future__ import annotations

import numpy as np


def dp_interpolate(x_v: np.ndarray, x_hat: np.ndarray, beta: float) -> np.ndarray:
    """clip((1 - beta) * x_v + beta * x_hat, 0, 1); beta 0 and 1 return the inputs exactly."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    x_v = np.asarray(x_v)
    x_hat = np.asarray(x_hat)
    if x_v.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x_v.shape} vs {x_hat.shape}")
    if beta == 0.0:
        return x_v.copy()
    if beta == 1.0:
        return x_hat.copy()
    dtype = np.result_type(x_v, x_hat)
    out = (1.0 - beta) * x_v.astype(np.float64) + beta * x_hat.astype(np.float64)
    return np.clip(out, 0.0, 1.0).astype(dtype)
