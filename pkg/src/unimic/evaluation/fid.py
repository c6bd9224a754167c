"""Fréchet distance and patched FID with a pluggable feature extractor."""

from __future__ import annotations

import warnings
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F

COV_EPS = 1e-6


class FeatureExtractor(Protocol):
    dim: int

    def __call__(self, patches: np.ndarray) -> np.ndarray:
        """(M, P, P, 3) images in [0, 1] -> (M, dim) float64 features."""


class CovarianceRegularizedWarning(UserWarning):
    pass


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu_a, sigma_a, mu_b, sigma_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the matrix square root is taken from the eigenvalues of the
    symmetric product S_a^(1/2) S_b S_a^(1/2), which shares them with S_a S_b.
    """
    mu_a, mu_b = np.asarray(mu_a, np.float64), np.asarray(mu_b, np.float64)
    sigma_a, sigma_b = np.atleast_2d(sigma_a).astype(np.float64), np.atleast_2d(sigma_b).astype(np.float64)
    if mu_a.shape != mu_b.shape or sigma_a.shape != sigma_b.shape:
        raise ValueError("Gaussian parameters have mismatched shapes")
    root_a = _sqrt_psd(sigma_a)
    eig = np.linalg.eigvalsh(root_a @ sigma_b @ root_a)
    tr_covmean = float(np.sqrt(np.clip(eig, 0.0, None)).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * tr_covmean)
    return max(value, 0.0)


def feature_statistics(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance; regularized with a warning when samples <= dimension."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("need at least two feature vectors")
    n, d = features.shape
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False).reshape(d, d)
    if n <= d:
        warnings.warn(
            f"{n} feature vectors for dimension {d}: adding {COV_EPS:g} * I to the covariance",
            CovarianceRegularizedWarning,
            stacklevel=2,
        )
        sigma = sigma + COV_EPS * np.eye(d)
    return mu, sigma


def patch_grid(height: int, width: int, patch: int) -> tuple[int, int]:
    return height // patch, width // patch


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping ``patch`` tiles from (N, H, W, 3) images; remainders are dropped."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    n, h, w, c = images.shape
    rows, cols = patch_grid(h, w, patch)
    if rows == 0 or cols == 0:
        raise ValueError(f"images of {h}x{w} are smaller than the {patch}px patch")
    tiles = images[:, : rows * patch, : cols * patch]
    tiles = tiles.reshape(n, rows, patch, cols, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return tiles.reshape(n * rows * cols, patch, patch, c)


class RandomProjectionExtractor:
    """Training-free conv stack with fixed random weights, run in float64.

    Three 3x3 conv + ReLU layers (the last two strided); the feature vector
    concatenates the spatial means of the last two layers' activations.
    """

    def __init__(self, width: int = 32, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)

        def conv(cin, cout):
            w = torch.randn(cout, cin, 3, 3, generator=gen, dtype=torch.float64)
            return w / np.sqrt(cin * 9)

        self.weights = [conv(3, width // 2), conv(width // 2, width), conv(width, width)]
        self.dim = 2 * width

    @torch.no_grad()
    def __call__(self, patches: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.asarray(patches, dtype=np.float64)).permute(0, 3, 1, 2) * 2.0 - 1.0
        h1 = F.relu(F.conv2d(x, self.weights[0], padding=1))
        h2 = F.relu(F.conv2d(h1, self.weights[1], stride=2, padding=1))
        h3 = F.relu(F.conv2d(h2, self.weights[2], stride=2, padding=1))
        return torch.cat([h2.mean(dim=(2, 3)), h3.mean(dim=(2, 3))], dim=1).numpy()


def extract_features(images: np.ndarray, fx: FeatureExtractor, patch: int, batch: int = 512) -> np.ndarray:
    tiles = extract_patches(images, patch)
    return np.concatenate([fx(tiles[i:i + batch]) for i in range(0, len(tiles), batch)])


def patched_fid(set_a: np.ndarray, set_b: np.ndarray, fx: FeatureExtractor | None = None, patch: int = 256) -> float:
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("both image sets must be non-empty")
    fx = fx or RandomProjectionExtractor()
    mu_a, s_a = feature_statistics(extract_features(set_a, fx, patch))
    mu_b, s_b = feature_statistics(extract_features(set_b, fx, patch))
    return frechet_distance(mu_a, s_a, mu_b, s_b)
