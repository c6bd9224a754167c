"""Pixel-fidelity metrics: PSNR and MS-SSIM."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """PSNR in dB for images in [0, data_range]; identical images give ``PSNR_CAP``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def ms_ssim_scales(min_dim: int, max_scales: int = len(MS_SSIM_WEIGHTS)) -> int:
    """Number of scales whose smallest level keeps at least ``WIN_SIZE`` pixels.

    Downsampling rounds up (pad-then-pool), so 161 px is the smallest size
    that supports all five scales.
    """
    if min_dim < WIN_SIZE:
        raise ValueError(f"image too small for MS-SSIM: min dimension {min_dim} < {WIN_SIZE}")
    scales, size = 1, min_dim
    while scales < max_scales and math.ceil(size / 2) >= WIN_SIZE:
        size = math.ceil(size / 2)
        scales += 1
    return scales


def _gaussian_window(dtype: torch.dtype, device) -> torch.Tensor:
    coords = torch.arange(WIN_SIZE, dtype=dtype, device=device) - WIN_SIZE // 2
    g = torch.exp(-(coords**2) / (2 * WIN_SIGMA**2))
    return g / g.sum()


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    x = F.conv2d(x, win.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, win.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _ssim_cs(x: torch.Tensor, y: torch.Tensor, win: torch.Tensor, data_range: float):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x, mu_y = _blur(x, win), _blur(y, win)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = _blur(x * x, win) - mu_xx
    s_yy = _blur(y * y, win) - mu_yy
    s_xy = _blur(x * y, win) - mu_xy
    cs_map = (2 * s_xy + c2) / (s_xx + s_yy + c2)
    ssim_map = ((2 * mu_xy + c1) / (mu_xx + mu_yy + c1)) * cs_map
    return ssim_map.flatten(2).mean(-1), cs_map.flatten(2).mean(-1)


def ms_ssim_torch(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Differentiable MS-SSIM for (N, C, H, W) batches; returns shape (N,)."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    levels = ms_ssim_scales(min(x.shape[-2:]))
    weights = torch.tensor(MS_SSIM_WEIGHTS[:levels], dtype=x.dtype, device=x.device)
    weights = weights / weights.sum()
    win = _gaussian_window(x.dtype, x.device)
    values = []
    for i in range(levels):
        ssim, cs = _ssim_cs(x, y, win, data_range)
        if i < levels - 1:
            values.append(torch.relu(cs))
            pad = [s % 2 for s in x.shape[2:]]
            x = F.avg_pool2d(x, 2, padding=pad)
            y = F.avg_pool2d(y, 2, padding=pad)
    values.append(torch.relu(ssim))
    stacked = torch.stack(values, dim=0)  # (levels, N, C)
    return torch.prod(stacked ** weights.view(-1, 1, 1), dim=0).mean(dim=1)


def ms_ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """MS-SSIM of two (H, W, 3) images, computed in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ta = torch.from_numpy(a).permute(2, 0, 1).unsqueeze(0)
    tb = torch.from_numpy(b).permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        return float(ms_ssim_torch(ta, tb, data_range)[0])
