"""Codec descriptors, image buffers and visual payloads."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class CodecCategory(str, enum.Enum):
    TRADITIONAL = "traditional"
    NEURAL = "neural"


class OptimizationMetric(str, enum.Enum):
    PSNR = "PSNR"
    MS_SSIM = "MS-SSIM"
    GAN = "GAN"


class CodecError(Exception):
    """Base class for codec repository failures."""


class DuplicateCodecError(CodecError):
    pass


class UnknownCodecError(CodecError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class DecodeError(CodecError):
    pass


class ExternalCodecError(CodecError):
    def __init__(self, message: str, returncode: int | None = None, stderr: str = ""):
        super().__init__(f"{message} (exit code {returncode}): {stderr.strip()}")
        self.returncode = returncode
        self.stderr = stderr


@dataclass(frozen=True)
class CodecDescriptor:
    """Identity and compression syntax of one basic-codec operating point."""

    category: CodecCategory
    name: str
    optimization_metric: OptimizationMetric
    quality: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "category", CodecCategory(self.category))
        object.__setattr__(self, "optimization_metric", OptimizationMetric(self.optimization_metric))
        object.__setattr__(self, "quality", float(self.quality))
        if not self.name or any(c in self.name for c in "|:\n"):
            raise ValueError(f"invalid codec name {self.name!r}")
        if not np.isfinite(self.quality):
            raise ValueError("quality indicator must be finite")
        if self.category is CodecCategory.TRADITIONAL and self.optimization_metric is not OptimizationMetric.PSNR:
            raise ValueError("traditional codecs are always PSNR-optimized")

    @property
    def key(self) -> tuple[str, float]:
        return (self.name, self.quality)


@dataclass(frozen=True)
class VisualPayload:
    data: bytes

    @property
    def byte_count(self) -> int:
        return len(self.data)


def as_image(values, *, copy: bool = False) -> np.ndarray:
    """Validate and return an (H, W, 3) float32 image in [0, 1]."""
    arr = np.array(values, dtype=np.float32, copy=copy) if copy else np.asarray(values, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def reflect_pad(image: np.ndarray, multiple: int) -> np.ndarray:
    """Reflect-pad height and width up to a multiple of ``multiple``."""
    h, w = image.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    # numpy's reflect mode needs pad < dim; symmetric handles tiny images
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode=mode)
