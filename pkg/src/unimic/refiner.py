"""Stage-2 decoder refiner.

At each tapped decoder level the decoder feature f_in is concatenated with
the VAE-encoder feature f_e of the decoded image x_v, processed by ResBlocks
and a self-attention block, and merged back residually:
``f_in + branch(concat(f_in, f_e))``.  The branch's last convolution starts
at zero so a fresh refiner reproduces plain VAE decoding exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import tensor_digest
from .compensator.layers import ResBlock, SelfAttention, zero_module
from .compensator.model import Compensator
from .config import ModelConfig
from .optim import scheduled_lr, set_lr

log = logging.getLogger(__name__)


class FrozenWeightDrift(RuntimeError):
    pass


@dataclass
class RefinerConfig:
    tapped_levels: tuple[int, ...]
    resblocks: int = 2
    attention: bool = True
    lambda_l1: float = 1.0
    lambda_perc: float = 1.0
    lambda_adv: float = 0.1

    def __post_init__(self) -> None:
        if min(self.lambda_l1, self.lambda_perc, self.lambda_adv) < 0:
            raise ValueError("loss weights must be >= 0")

    @classmethod
    def from_model_config(cls, cfg: ModelConfig, **weights) -> "RefinerConfig":
        levels = len(cfg.vae_channels)
        tapped = tuple(range(levels - cfg.refiner_levels, levels))
        return cls(tapped, cfg.refiner_resblocks, cfg.refiner_attention, **weights)


class RefineBranch(nn.Module):
    def __init__(self, channels: int, resblocks: int, attention: bool, groups: int):
        super().__init__()
        self.fuse = nn.Conv2d(2 * channels, channels, 1)
        self.blocks = nn.ModuleList(ResBlock(channels, channels, groups=groups) for _ in range(resblocks))
        self.attn = SelfAttention(channels, groups) if attention else None
        self.out = zero_module(nn.Conv2d(channels, channels, 3, padding=1))

    def forward(self, f_in: torch.Tensor, f_e: torch.Tensor) -> torch.Tensor:
        h = self.fuse(torch.cat([f_in, f_e], dim=1))
        for block in self.blocks:
            h = block(h)
        if self.attn is not None:
            h = self.attn(h)
        return self.out(h)


class DecoderRefiner(nn.Module):
    def __init__(self, model_cfg: ModelConfig, cfg: RefinerConfig | None = None):
        super().__init__()
        self.cfg = cfg or RefinerConfig.from_model_config(model_cfg)
        self.branches = nn.ModuleDict(
            {
                str(i): RefineBranch(model_cfg.vae_channels[i], self.cfg.resblocks, self.cfg.attention, model_cfg.norm_groups)
                for i in self.cfg.tapped_levels
            }
        )

    def forward(self, level: int, f_in: torch.Tensor, f_e: torch.Tensor) -> torch.Tensor:
        key = str(level)
        if key not in self.branches:
            return f_in
        if f_in.shape != f_e.shape:
            raise ValueError(f"level {level}: decoder feature {tuple(f_in.shape)} vs encoder feature {tuple(f_e.shape)}")
        return f_in + self.branches[key](f_in, f_e)


def refine_decode(model: Compensator, refiner: DecoderRefiner | None, z0: torch.Tensor, x_v: torch.Tensor) -> torch.Tensor:
    """Decode z0 with encoder features of x_v injected at the tapped levels."""
    if refiner is None:
        return model.vae.decode(z0)
    _, _, feats = model.vae.encode_features(x_v)
    return model.vae.decode(z0, refiner=refiner, enc_feats=feats)


class PatchDiscriminator(nn.Module):
    """Small PatchGAN: one realism logit per receptive-field patch."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, channels, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, 2 * channels, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * channels, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x * 2.0 - 1.0)


class EncoderFeatureDistance(nn.Module):
    """Perceptual distance port; default uses the frozen VAE encoder's features.

    Features are unit-normalized across channels per position (as LPIPS
    does) and compared with a mean squared difference, averaged over levels.
    """

    def __init__(self, vae):
        super().__init__()
        self.vae = vae

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        _, _, fa = self.vae.encode_features(a)
        _, _, fb = self.vae.encode_features(b)
        total = a.new_zeros(())
        for x, y in zip(fa, fb):
            x = x / (x.pow(2).sum(dim=1, keepdim=True) + 1e-10).sqrt()
            y = y / (y.pow(2).sum(dim=1, keepdim=True) + 1e-10).sqrt()
            total = total + (x - y).pow(2).sum(dim=1).mean()
        return total / len(fa)


def hinge_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


def stage2_loss(
    x_hat: torch.Tensor,
    x: torch.Tensor,
    disc: nn.Module | None,
    perceptual: nn.Module | None,
    cfg: RefinerConfig,
    adv_active: bool = True,
) -> tuple[torch.Tensor, dict[str, float]]:
    """lambda_l1 * L1 + lambda_perc * perceptual + lambda_adv * (-mean D(x_hat))."""
    if x_hat.shape != x.shape:
        raise ValueError("x_hat and x differ in shape")
    l1 = (x_hat - x).abs().mean()
    total = cfg.lambda_l1 * l1
    parts = {"l1": l1.item()}
    if cfg.lambda_perc > 0 and perceptual is not None:
        perc = perceptual(x_hat, x)
        total = total + cfg.lambda_perc * perc
        parts["perceptual"] = perc.item()
    else:
        parts["perceptual"] = 0.0
    if cfg.lambda_adv > 0 and disc is not None and adv_active:
        g = -disc(x_hat).mean()
        total = total + cfg.lambda_adv * g
        parts["adversarial"] = g.item()
    else:
        parts["adversarial"] = 0.0
    parts["total"] = total.item()
    return total, parts


def frozen_digest(model: Compensator) -> str:
    return tensor_digest(dict(model.state_dict()))


def train_refiner(
    model: Compensator,
    refiner: DecoderRefiner,
    disc: PatchDiscriminator | None,
    latents: torch.Tensor,
    x_v: torch.Tensor,
    x: torch.Tensor,
    *,
    steps: int,
    batch_size: int = 8,
    lr: float = 5e-5,
    disc_lr: float = 5e-5,
    disc_start: int = 500,
    seed: int = 42,
    start_step: int = 0,
    optimizers: tuple | None = None,
    callback=None,
    lr_schedule: str = "constant",
) -> dict[str, list[float]]:
    """Train only the refiner (and discriminator); every compensator tensor stays frozen.

    Returns per-step loss components.  Raises ``FrozenWeightDrift`` if any
    frozen tensor changed.
    """
    scheduled_lr(lr_schedule, lr, 0, steps)
    cfg = refiner.cfg
    use_disc = cfg.lambda_adv > 0 and disc is not None
    model.requires_grad_(False)
    model.eval()
    refiner.train()
    before = frozen_digest(model)
    perceptual = EncoderFeatureDistance(model.vae) if cfg.lambda_perc > 0 else None
    if optimizers is None:
        opt_g = torch.optim.Adam(refiner.parameters(), lr=lr)
        opt_d = torch.optim.Adam(disc.parameters(), lr=disc_lr, betas=(0.5, 0.9)) if use_disc else None
    else:
        opt_g, opt_d = optimizers
    history: dict[str, list[float]] = {"l1": [], "perceptual": [], "adversarial": [], "total": [], "disc": []}
    n = latents.shape[0]
    for step in range(start_step, steps):
        set_lr(opt_g, scheduled_lr(lr_schedule, lr, step, steps))
        if opt_d is not None:
            set_lr(opt_d, scheduled_lr(lr_schedule, disc_lr, step, steps))
        rng = np.random.default_rng([seed, 2, step])
        idx = torch.from_numpy(rng.choice(n, size=min(batch_size, n), replace=False))
        z, xv, xt = latents[idx], x_v[idx], x[idx]
        adv_active = use_disc and step >= disc_start
        x_hat = refine_decode(model, refiner, z, xv)
        loss, parts = stage2_loss(x_hat, xt, disc if adv_active else None, perceptual, cfg, adv_active)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"stage-2 loss became {loss.item()} at step {step}")
        opt_g.zero_grad()
        loss.backward()
        opt_g.step()
        d_loss = 0.0
        if adv_active:
            disc.requires_grad_(True)
            d = hinge_d_loss(disc(xt), disc(x_hat.detach()))
            opt_d.zero_grad()
            d.backward()
            opt_d.step()
            d_loss = d.item()
        for k, v in parts.items():
            history[k].append(v)
        history["disc"].append(d_loss)
        if callback is not None:
            callback(step, parts)
    if frozen_digest(model) != before:
        raise FrozenWeightDrift("a frozen compensator tensor changed during refiner training")
    refiner.eval()
    return history
