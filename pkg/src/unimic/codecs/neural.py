"""Toy neural codec: 4-layer conv autoencoder with a factorized entropy model.

Training uses additive uniform noise as the quantization proxy and the
factorized per-channel logistic likelihood as the rate term, minimizing
``R + lambda * D``.  Distortion follows the usual conventions of learned
codecs: ``255**2 * MSE`` for MSE models, ``1 - MS-SSIM`` for MS-SSIM models.
At test time latents are rounded and the integer symbols are DEFLATE-coded.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .. import checkpoint
from ..evaluation.metrics import ms_ssim_torch
from .descriptor import (
    CodecCategory,
    CodecDescriptor,
    DecodeError,
    OptimizationMetric,
    as_image,
    from_uint8,
    reflect_pad,
    to_uint8,
)
from .registry import BasicCodec, CodecRegistry

log = logging.getLogger(__name__)

MAGIC = b"UMTC1"
STREAM_MAGIC = b"TNC1"
STRIDE = 4
_HEADER = struct.Struct(">4sHHBHHI")

_METRICS = {"MSE": OptimizationMetric.PSNR, "MS-SSIM": OptimizationMetric.MS_SSIM}


class TrainingDiverged(RuntimeError):
    pass


class FactorizedLogistic(nn.Module):
    """Per-channel logistic density, integrated over unit quantization bins."""

    def __init__(self, channels: int):
        super().__init__()
        self.loc = nn.Parameter(torch.zeros(channels))
        self.log_scale = nn.Parameter(torch.zeros(channels))

    def likelihood(self, y: torch.Tensor) -> torch.Tensor:
        loc = self.loc.view(1, -1, 1, 1)
        scale = self.log_scale.exp().view(1, -1, 1, 1)
        upper = torch.sigmoid((y + 0.5 - loc) / scale)
        lower = torch.sigmoid((y - 0.5 - loc) / scale)
        return (upper - lower).clamp_min(1e-9)


class ToyAutoencoder(nn.Module):
    def __init__(self, hidden: int = 32, latent: int = 16):
        super().__init__()
        self.hidden, self.latent = hidden, latent
        self.enc1 = nn.Conv2d(3, hidden, 5, stride=2, padding=2)
        self.enc2 = nn.Conv2d(hidden, latent, 5, stride=2, padding=2)
        self.dec1 = nn.ConvTranspose2d(latent, hidden, 5, stride=2, padding=2, output_padding=1)
        self.dec2 = nn.ConvTranspose2d(hidden, 3, 5, stride=2, padding=2, output_padding=1)
        self.entropy = FactorizedLogistic(latent)

    def analysis(self, x: torch.Tensor) -> torch.Tensor:
        return self.enc2(F.leaky_relu(self.enc1(x), 0.1))

    def synthesis(self, y: torch.Tensor) -> torch.Tensor:
        return self.dec2(F.leaky_relu(self.dec1(y), 0.1))

    def forward(self, x: torch.Tensor, noise: torch.Tensor | None = None):
        y = self.analysis(x)
        y_hat = y + noise if noise is not None else torch.round(y)
        return self.synthesis(y_hat), self.entropy.likelihood(y_hat)


def _distortion(metric: str, x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if metric == "MSE":
        return 255.0**2 * F.mse_loss(x_hat, x)
    return 1.0 - ms_ssim_torch(x_hat, x).mean()


@dataclass
class ToyNeuralCodec(BasicCodec):
    model: ToyAutoencoder
    metric: str
    lmbda: float
    losses: list[float] = field(default_factory=list)

    @property
    def descriptor(self) -> CodecDescriptor:
        name = "toy-ae-mse" if self.metric == "MSE" else "toy-ae-msssim"
        return CodecDescriptor(CodecCategory.NEURAL, name, _METRICS[self.metric], self.lmbda)

    def _check_quality(self, quality: float) -> None:
        if float(quality) != float(self.lmbda):
            raise ValueError(f"this checkpoint was trained at lambda={self.lmbda}, not {quality}")

    def encode(self, image: np.ndarray, quality: float) -> bytes:
        self._check_quality(quality)
        image = as_image(image)
        h, w = image.shape[:2]
        padded = reflect_pad(from_uint8(to_uint8(image)), STRIDE)
        x = torch.from_numpy(np.ascontiguousarray(padded)).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            y = torch.round(self.model.analysis(x))[0]
        symbols = y.clamp(-32768, 32767).to(torch.int16).numpy().astype(">i2")
        body = zlib.compress(symbols.tobytes(), 9)
        fields = (STREAM_MAGIC, h, w, symbols.shape[0], symbols.shape[1], symbols.shape[2])
        crc = zlib.crc32(struct.pack(">4sHHBHH", *fields) + body)
        return _HEADER.pack(*fields, crc) + body

    def decode(self, data: bytes, quality: float) -> np.ndarray:
        self._check_quality(quality)
        if len(data) < _HEADER.size:
            raise DecodeError("toy neural payload truncated before end of header")
        magic, h, w, c, lh, lw, crc = _HEADER.unpack_from(data)
        if magic != STREAM_MAGIC:
            raise DecodeError("not a toy neural payload (bad magic)")
        body = data[_HEADER.size:]
        if zlib.crc32(data[: _HEADER.size - 4] + body) != crc:
            raise DecodeError("toy neural payload failed CRC check")
        if c != self.model.latent or lh * STRIDE < h or lw * STRIDE < w:
            raise DecodeError("payload geometry does not match this checkpoint")
        try:
            raw = zlib.decompress(body)
        except zlib.error as exc:
            raise DecodeError(f"toy neural body is not a valid zlib stream: {exc}") from exc
        if len(raw) != 2 * c * lh * lw:
            raise DecodeError("toy neural body has the wrong symbol count")
        y = np.frombuffer(raw, dtype=">i2").astype(np.float32).reshape(1, c, lh, lw)
        with torch.no_grad():
            x_hat = self.model.synthesis(torch.from_numpy(y))[0].permute(1, 2, 0).numpy()
        return from_uint8(to_uint8(np.clip(x_hat[:h, :w], 0.0, 1.0)))

    def estimate_bpp(self, image: np.ndarray) -> float:
        return 8.0 * len(self.encode(image, self.lmbda)) / (image.shape[0] * image.shape[1])

    def save(self, path: str | Path) -> bytes:
        meta = {
            "kind": "toy-neural-codec",
            "metric": self.metric,
            "lambda": self.lmbda,
            "hidden": self.model.hidden,
            "latent": self.model.latent,
            "losses": self.losses,
        }
        return checkpoint.save(path, MAGIC, meta, {"model": self.model.state_dict()})

    @classmethod
    def load(cls, path: str | Path) -> "ToyNeuralCodec":
        meta, sections = checkpoint.load(path, MAGIC)
        model = ToyAutoencoder(meta["hidden"], meta["latent"])
        model.load_state_dict(sections["model"])
        model.eval()
        return cls(model, meta["metric"], meta["lambda"], list(meta["losses"]))


def train_toy_neural_codec(
    images: np.ndarray,
    metric: str = "MSE",
    lmbda: float = 0.01,
    *,
    steps: int = 400,
    batch_size: int = 16,
    lr: float = 1e-3,
    hidden: int = 32,
    latent: int = 16,
    seed: int = 0,
    registry: CodecRegistry | None = None,
) -> ToyNeuralCodec:
    """Train a toy codec on an (N, H, W, 3) image array in [0, 1]."""
    metric = metric.upper()
    if metric not in _METRICS:
        raise ValueError(f"metric must be MSE or MS-SSIM, got {metric!r}")
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("dataset must be a non-empty (N, H, W, 3) array")
    if images.shape[1] % STRIDE or images.shape[2] % STRIDE:
        raise ValueError(f"training images must have sides divisible by {STRIDE}")

    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = ToyAutoencoder(hidden, latent)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    data = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
    num_pixels = data.shape[2] * data.shape[3]
    losses = []
    for step in range(steps):
        idx = torch.randint(len(data), (min(batch_size, len(data)),), generator=gen)
        x = data[idx]
        y = model.analysis(x)
        noise = torch.rand(y.shape, generator=gen) - 0.5
        x_hat = model.synthesis(y + noise)
        bpp = -torch.log2(model.entropy.likelihood(y + noise)).sum() / (len(x) * num_pixels)
        loss = bpp + lmbda * _distortion(metric, x_hat, x)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"toy codec loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    model.eval()
    log.info("toy codec %s lambda=%g: loss %.4f -> %.4f", metric, lmbda, losses[0], losses[-1])
    codec = ToyNeuralCodec(model, metric, float(lmbda), losses)
    if registry is not None:
        registry.register(codec.descriptor, codec)
    return codec

