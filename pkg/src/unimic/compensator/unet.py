"""Latent denoiser and the universal visual adapter."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import ModelConfig
from .layers import CrossAttention, Downsample, ResBlock, Upsample, norm, timestep_embedding, zero_module


@dataclass
class AdapterState:
    """Per-level (gamma, shift) maps that SPADE-modulate UNet encoder outputs."""

    modulations: list[tuple[torch.Tensor, torch.Tensor]]


def spade(h: torch.Tensor, gamma: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    if gamma.shape != h.shape or shift.shape != h.shape:
        raise ValueError(f"modulation shape {tuple(gamma.shape)} does not match feature {tuple(h.shape)}")
    return h * (1.0 + gamma) + shift


class UNet(nn.Module):
    """One ResBlock per level; cross-attention to the ConP sequence on ``attn_levels``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.unet_channels
        g = cfg.norm_groups
        self.levels = len(ch)
        self.base = ch[0]
        emb = 4 * ch[0]
        self.time_mlp = nn.Sequential(nn.Linear(ch[0], emb), nn.SiLU(), nn.Linear(emb, emb))
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch[0], 3, padding=1)

        def attn(i):
            if i in cfg.attn_levels:
                return CrossAttention(ch[i], cfg.text_dim, cfg.attn_heads, g)
            return None

        self.down = nn.ModuleList(ResBlock(ch[max(i - 1, 0)], ch[i], emb, g) for i in range(self.levels))
        self.down_attn = nn.ModuleList(attn(i) or nn.Identity() for i in range(self.levels))
        self.downsample = nn.ModuleList(Downsample(ch[i]) for i in range(self.levels - 1))
        self.mid1 = ResBlock(ch[-1], ch[-1], emb, g)
        self.mid_attn = CrossAttention(ch[-1], cfg.text_dim, cfg.attn_heads, g)
        self.mid2 = ResBlock(ch[-1], ch[-1], emb, g)
        self.up = nn.ModuleList(
            ResBlock(ch[min(i + 1, self.levels - 1)] + ch[i], ch[i], emb, g) for i in range(self.levels)
        )
        self.up_attn = nn.ModuleList(attn(i) or nn.Identity() for i in range(self.levels))
        self.upsample = nn.ModuleList(Upsample(ch[i]) for i in range(1, self.levels))
        self.norm_out = norm(ch[0], g)
        self.conv_out = nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1)
        self.attn_levels = set(cfg.attn_levels)

    def cross_attention_modules(self):
        mods = [self.mid_attn]
        mods += [m for m in self.down_attn if isinstance(m, CrossAttention)]
        mods += [m for m in self.up_attn if isinstance(m, CrossAttention)]
        return mods

    def forward(self, z, t, context, context_mask, adapter: AdapterState | None = None):
        temb = self.time_mlp(timestep_embedding(t, self.base).to(z.dtype))
        h = self.conv_in(z)
        skips = []
        for i in range(self.levels):
            h = self.down[i](h, temb)
            if i in self.attn_levels:
                h = self.down_attn[i](h, context, context_mask)
            if adapter is not None:
                h = spade(h, *adapter.modulations[i])
            skips.append(h)
            if i < self.levels - 1:
                h = self.downsample[i](h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb), context, context_mask), temb)
        for i in reversed(range(self.levels)):
            h = self.up[i](torch.cat([h, skips[i]], dim=1), temb)
            if i in self.attn_levels:
                h = self.up_attn[i](h, context, context_mask)
            if i > 0:
                h = self.upsample[i - 1](h)
        return self.conv_out(F.silu(self.norm_out(h)))


class VisualAdapter(nn.Module):
    """Side network over the decoded image x_v.

    The ComP sequence is average-pooled over its tokens, passed through a
    2-layer SiLU MLP, added to the adapter's timestep embedding and fed to
    every adapter ResBlock.  Zero-initialized heads emit (gamma, shift) at
    each UNet level, so a fresh adapter leaves the UNet untouched.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.unet_channels
        g = cfg.norm_groups
        width = cfg.comp_mlp_width
        self.factor = cfg.downsample
        self.base = ch[0]
        self.levels = len(ch)
        self.time_mlp = nn.Sequential(nn.Linear(ch[0], width), nn.SiLU(), nn.Linear(width, width))
        self.comp_mlp = nn.Sequential(nn.Linear(cfg.text_dim, width), nn.SiLU(), nn.Linear(width, width))
        self.conv_in = nn.Conv2d(3 * self.factor**2, ch[0], 3, padding=1)
        self.blocks = nn.ModuleList(ResBlock(ch[max(i - 1, 0)], ch[i], width, g) for i in range(self.levels))
        self.downsample = nn.ModuleList(Downsample(ch[i]) for i in range(self.levels - 1))
        self.to_gamma = nn.ModuleList(zero_module(nn.Conv2d(ch[i], ch[i], 3, padding=1)) for i in range(self.levels))
        self.to_shift = nn.ModuleList(zero_module(nn.Conv2d(ch[i], ch[i], 3, padding=1)) for i in range(self.levels))

    @staticmethod
    def pool(comp: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        weights = mask.to(comp.dtype).unsqueeze(-1)
        return (comp * weights).sum(dim=1) / weights.sum(dim=1).clamp_min(1.0)

    def forward(self, x_v: torch.Tensor, t: torch.Tensor, comp: torch.Tensor, comp_mask: torch.Tensor) -> AdapterState:
        emb = self.time_mlp(timestep_embedding(t, self.base).to(x_v.dtype))
        emb = emb + self.comp_mlp(self.pool(comp, comp_mask))
        h = self.conv_in(F.pixel_unshuffle(x_v * 2.0 - 1.0, self.factor))
        out = []
        for i in range(self.levels):
            h = self.blocks[i](h, emb)
            out.append((self.to_gamma[i](h), self.to_shift[i](h)))
            if i < self.levels - 1:
                h = self.downsample[i](h)
        return AdapterState(out)
