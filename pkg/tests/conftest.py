import numpy as np
import pytest
import torch

from unimic.codecs import default_registry
from unimic.config import ModelConfig
from unimic.toydata import make_toy_set

torch.set_num_threads(1)


def micro_config(**overrides) -> ModelConfig:
    """A few-thousand-parameter model that still exercises every pathway."""
    kw = dict(
        latent_channels=4,
        vae_channels=(2, 2),
        unet_channels=(2, 4),
        attn_levels=(1,),
        attn_heads=1,
        text_dim=4,
        text_vocab=16,
        text_layers=1,
        text_heads=1,
        max_tokens=12,
        comp_mlp_width=4,
        norm_groups=2,
        refiner_resblocks=1,
        disc_channels=2,
        num_timesteps=50,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def small_config(**overrides) -> ModelConfig:
    """Small but realistic widths for fast training-loop tests."""
    kw = dict(
        vae_channels=(8, 16, 16),
        unet_channels=(16, 32, 32),
        text_dim=32,
        text_vocab=256,
        text_layers=1,
        text_heads=2,
        attn_heads=2,
        comp_mlp_width=32,
        norm_groups=4,
        refiner_resblocks=1,
        disc_channels=8,
        num_timesteps=100,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture(scope="session")
def toy_set():
    return make_toy_set(24, 32, seed=7)


@pytest.fixture(scope="session")
def gradient_image():
    """Deterministic 64x64 natural-ish test image: smooth gradients plus an edge."""
    yy, xx = np.mgrid[0:64, 0:64] / 63.0
    img = np.stack([0.2 + 0.6 * xx, 0.3 + 0.4 * yy, 0.5 + 0.3 * np.sin(6 * xx * yy)], axis=-1)
    img[20:44, 20:44] = [0.9, 0.2, 0.1]
    return np.clip(img, 0, 1).astype(np.float32)


@pytest.fixture
def registry():
    return default_registry()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title, elapsed = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title} ({elapsed:.1f}s)")
