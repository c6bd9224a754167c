"""Toy KL autoencoder mapping images to a 4x-downsampled latent space."""

from __future__ import annotations

import torch
import torch.nn as nn

from ..config import ModelConfig
from .layers import Downsample, ResBlock, Upsample, norm


class VAE(nn.Module):
    """Encoder and decoder share level indices: level i runs at 1/2**i resolution.

    ``encode_features`` exposes the encoder feature at every level, and
    ``decode`` accepts a ``refiner`` that is handed each decoder feature with
    its level index, which is how the stage-2 decoder refiner taps in.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.vae_channels
        g = cfg.norm_groups
        self.levels = len(ch)
        self.latent_channels = cfg.latent_channels
        self.factor = cfg.downsample

        self.enc_in = nn.Conv2d(3, ch[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList(
            ResBlock(ch[max(i - 1, 0)], ch[i], groups=g) for i in range(self.levels)
        )
        self.enc_down = nn.ModuleList(Downsample(ch[i]) for i in range(self.levels - 1))
        self.enc_norm = norm(ch[-1], g)
        self.enc_out = nn.Conv2d(ch[-1], 2 * cfg.latent_channels, 3, padding=1)

        self.dec_in = nn.Conv2d(cfg.latent_channels, ch[-1], 3, padding=1)
        self.dec_blocks = nn.ModuleList(
            ResBlock(ch[min(i + 1, self.levels - 1)], ch[i], groups=g) for i in range(self.levels)
        )
        self.dec_up = nn.ModuleList(Upsample(ch[i]) for i in range(1, self.levels))
        self.dec_norm = norm(ch[0], g)
        self.dec_out = nn.Conv2d(ch[0], 3, 3, padding=1)
        # latent rescaling to unit variance, fixed after stage-0 training
        self.register_buffer("scale_factor", torch.ones(()))

    def check_size(self, x: torch.Tensor) -> None:
        if x.shape[-2] % self.factor or x.shape[-1] % self.factor:
            raise ValueError(
                f"image size {tuple(x.shape[-2:])} is not a multiple of {self.factor}; pad it first"
            )

    def encode_features(self, x: torch.Tensor):
        """Return (mean, logvar, per-level encoder features) for images in [0, 1]."""
        self.check_size(x)
        h = self.enc_in(x * 2.0 - 1.0)
        feats = []
        for i, block in enumerate(self.enc_blocks):
            h = block(h)
            feats.append(h)
            if i < self.levels - 1:
                h = self.enc_down[i](h)
        mean, logvar = self.enc_out(torch.nn.functional.silu(self.enc_norm(h))).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0), feats

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Scaled posterior mean (deterministic)."""
        mean, _, _ = self.encode_features(x)
        return mean * self.scale_factor

    def decode(self, z: torch.Tensor, refiner=None, enc_feats=None) -> torch.Tensor:
        h = self.dec_in(z / self.scale_factor)
        for i in reversed(range(self.levels)):
            h = self.dec_blocks[i](h)
            if refiner is not None:
                h = refiner(i, h, enc_feats[i])
            if i > 0:
                h = self.dec_up[i - 1](h)
        return (self.dec_out(torch.nn.functional.silu(self.dec_norm(h))) + 1.0) / 2.0
