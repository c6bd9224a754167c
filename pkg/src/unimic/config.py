"""Hyperparameters and the ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints


@dataclass
class ModelConfig:
    latent_channels: int = 4
    vae_channels: tuple[int, ...] = (32, 64, 64)
    unet_channels: tuple[int, ...] = (64, 128, 128)
    attn_levels: tuple[int, ...] = (1, 2)
    attn_heads: int = 4
    text_dim: int = 256
    text_vocab: int = 4096
    text_layers: int = 2
    text_heads: int = 4
    max_tokens: int = 96
    comp_mlp_width: int = 256
    norm_groups: int = 8
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    refiner_levels: int = 2
    refiner_resblocks: int = 2
    refiner_attention: bool = True
    disc_channels: int = 32

    @property
    def downsample(self) -> int:
        return 2 ** (len(self.vae_channels) - 1)

    @property
    def latent_multiple(self) -> int:
        """Pixel sizes must be multiples of this for the VAE and UNet to line up."""
        return self.downsample * 2 ** (len(self.unet_channels) - 1)


@dataclass
class TrainConfig:
    seed: int = 42
    image_size: int = 32
    batch_size: int = 8
    lr: float = 5e-5
    lr_schedule: str = "constant"  # stages 1 and 2: constant or cosine
    # stage 0: VAE and text-to-image prior (stand-in for the pretrained base model)
    vae_steps: int = 6000
    vae_lr: float = 1e-3
    vae_batch_size: int = 16
    vae_kl_weight: float = 1e-6
    prior_steps: int = 3000
    prior_lr: float = 2e-4
    # stage 1: adapter + condition pathway
    stage1_steps: int = 2000
    stage1_trainable: str = "adapter+cross_attn"
    p_comp: float = 0.1
    p_conp: float = 0.1
    # stage 2: decoder refiner
    num_latents: int = 1000
    latent_sample_steps: int = 20
    stage2_steps: int = 2000
    refiner_lr: float = 5e-5
    disc_lr: float = 5e-5
    lambda_l1: float = 1.0
    lambda_perc: float = 1.0
    lambda_adv: float = 0.1
    disc_start: int = 500
    # data
    dct_qualities: tuple[float, ...] = (5.0, 20.0)
    log_every: int = 100


@dataclass
class SampleConfig:
    w: float | None = None  # None: per-operating-point default
    eta: float = 0.0
    steps: int = 50
    seed: int = 42
    beta: float = 1.0


class ConfigError(ValueError):
    pass


def _coerce(kind, raw: str):
    raw = raw.strip()
    origin = get_origin(kind)
    if origin is tuple:
        inner = get_args(kind)[0]
        return tuple(_coerce(inner, p) for p in raw.replace(",", " ").split())
    if origin is not None and type(None) in get_args(kind):  # Optional[X]
        if raw.lower() in ("", "none", "auto"):
            return None
        return _coerce(next(a for a in get_args(kind) if a is not type(None)), raw)
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def apply_overrides(objs, values: dict[str, Any], *, strict: bool = True):
    """Set fields on whichever dataclass in ``objs`` declares each key."""
    unknown = []
    for key, raw in values.items():
        for obj in objs:
            hints = get_type_hints(type(obj))
            if key in {f.name for f in fields(obj)}:
                try:
                    value = _coerce(hints[key], raw) if isinstance(raw, str) else raw
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
                setattr(obj, key, value)
                break
        else:
            unknown.append(key)
    if strict and unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return objs


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None):
    model, train, sample = ModelConfig(), TrainConfig(), SampleConfig()
    values = {}
    if path is not None:
        values.update(parse_key_values(Path(path).read_text(encoding="utf-8")))
    values.update(overrides or {})
    apply_overrides((model, train, sample), values)
    return model, train, sample


def to_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def from_dict(cls, data: dict):
    hints = get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            v = data[f.name]
            kwargs[f.name] = tuple(v) if get_origin(hints[f.name]) is tuple else v
    return cls(**kwargs)


def config_hash(*objs) -> str:
    blob = json.dumps([to_dict(o) for o in objs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
