from .model import (
    Compensator,
    ConditionSet,
    GuidanceConfig,
    cfg_combine,
    default_guidance_weight,
    interpolate_comp_embeddings,
    quality_to_alpha,
)
from .schedule import NoiseSchedule, ddim_step, ddim_timesteps, forward_diffuse, predict_z0
from .text import HashedTransformerEmbedder, TextEmbedder, tokenize
from .unet import AdapterState, UNet, VisualAdapter, spade
from .vae import VAE

__all__ = [
    "AdapterState",
    "Compensator",
    "ConditionSet",
    "GuidanceConfig",
    "HashedTransformerEmbedder",
    "NoiseSchedule",
    "TextEmbedder",
    "UNet",
    "VAE",
    "VisualAdapter",
    "cfg_combine",
    "ddim_step",
    "ddim_timesteps",
    "default_guidance_weight",
    "forward_diffuse",
    "interpolate_comp_embeddings",
    "predict_z0",
    "quality_to_alpha",
    "spade",
    "tokenize",
]
