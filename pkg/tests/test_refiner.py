import pytest
import torch

from conftest import micro_config
from fdcheck import fd_compare
from unimic.compensator import Compensator
from unimic.refiner import (
    DecoderRefiner,
    EncoderFeatureDistance,
    FrozenWeightDrift,
    PatchDiscriminator,
    RefinerConfig,
    frozen_digest,
    hinge_d_loss,
    refine_decode,
    stage2_loss,
    train_refiner,
)


def _setup(seed=0, **weights):
    torch.manual_seed(seed)
    cfg = micro_config()
    model = Compensator(cfg).eval()
    refiner = DecoderRefiner(cfg, RefinerConfig.from_model_config(cfg, **weights))
    disc = PatchDiscriminator(cfg.disc_channels)
    return cfg, model, refiner, disc


def _perturb(module, scale=0.2, seed=5):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


def test_taps_the_lowest_resolution_levels():
    cfg = micro_config(vae_channels=(2, 2, 2))
    assert RefinerConfig.from_model_config(cfg).tapped_levels == (1, 2)
    assert set(DecoderRefiner(cfg).branches) == {"1", "2"}


def test_zero_init_is_bitwise_plain_decode():
    _, model, refiner, _ = _setup()
    g = torch.Generator().manual_seed(1)
    z = torch.randn(3, 4, 4, 4, generator=g)
    x_v = torch.rand(3, 3, 8, 8, generator=g)
    with torch.no_grad():
        assert torch.equal(refine_decode(model, refiner, z, x_v), model.vae_decode(z))
        assert torch.equal(refine_decode(model, None, z, x_v), model.vae_decode(z))


def test_trained_branch_uses_encoder_features():
    _, model, refiner, _ = _setup()
    _perturb(refiner)
    z = torch.randn(1, 4, 4, 4)
    with torch.no_grad():
        a = refine_decode(model, refiner, z, torch.rand(1, 3, 8, 8))
        b = refine_decode(model, refiner, z, torch.rand(1, 3, 8, 8))
    assert not torch.equal(a, b)


def test_shape_mismatch_and_untapped_levels():
    cfg, _, refiner, _ = _setup()
    f = torch.randn(1, 2, 4, 4)
    with pytest.raises(ValueError):
        refiner(0, f, torch.randn(1, 2, 2, 2))
    assert refiner(7, f, f) is f


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        RefinerConfig((0,), lambda_adv=-0.1)


def test_loss_decomposition():
    _, model, refiner, disc = _setup(lambda_l1=1.0, lambda_perc=0.5, lambda_adv=0.1)
    g = torch.Generator().manual_seed(2)
    x_hat, x = torch.rand(2, 3, 8, 8, generator=g), torch.rand(2, 3, 8, 8, generator=g)
    perc = EncoderFeatureDistance(model.vae)
    total, parts = stage2_loss(x_hat, x, disc, perc, refiner.cfg)
    assert parts["l1"] == pytest.approx(float((x_hat - x).abs().mean()))
    assert parts["adversarial"] == pytest.approx(-disc(x_hat).mean().item())
    expected = parts["l1"] + 0.5 * parts["perceptual"] + 0.1 * parts["adversarial"]
    assert total.item() == pytest.approx(expected, rel=1e-6, abs=1e-7)
    assert parts["total"] == pytest.approx(expected, rel=1e-6, abs=1e-7)


def test_adversarial_term_switches_off():
    _, model, refiner, disc = _setup()
    x_hat, x = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
    _, parts = stage2_loss(x_hat, x, disc, None, refiner.cfg, adv_active=False)
    assert parts["adversarial"] == 0.0 and parts["perceptual"] == 0.0
    cfg0 = RefinerConfig(refiner.cfg.tapped_levels, lambda_adv=0.0)
    total, parts = stage2_loss(x_hat, x, disc, None, cfg0)
    assert parts["adversarial"] == 0.0 and float(total) == pytest.approx(parts["l1"])
    with pytest.raises(ValueError):
        stage2_loss(x_hat, x[..., :4], disc, None, cfg0)


def test_perceptual_distance_properties():
    _, model, _, _ = _setup()
    perc = EncoderFeatureDistance(model.vae)
    a, b = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
    assert perc(a, a).item() == 0.0
    assert perc(a, b).item() > 0
    assert perc(a, b).item() == pytest.approx(perc(b, a).item(), rel=1e-6)


def test_hinge_values():
    real = torch.tensor([2.0, 0.5, -1.0])
    fake = torch.tensor([-2.0, 0.0, 1.0])
    # relu(1 - real) = [0, 0.5, 2]; relu(1 + fake) = [0, 1, 2]
    assert float(hinge_d_loss(real, fake)) == pytest.approx(2.5 / 3 + 3.0 / 3)


def test_stage2_gradient_matches_finite_differences():
    _, model, refiner, disc = _setup(seed=4, lambda_l1=1.0, lambda_perc=1.0, lambda_adv=0.1)
    model.double()
    refiner.double()
    disc.double()
    _perturb(refiner, 0.3)
    g = torch.Generator().manual_seed(9)
    z = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)
    x_v = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    x = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    perc = EncoderFeatureDistance(model.vae)

    def loss():
        return stage2_loss(refine_decode(model, refiner, z, x_v), x, disc, perc, refiner.cfg)[0]

    params = list(refiner.parameters())
    assert sum(p.numel() for p in params) <= 5000
    agg, worst, n = fd_compare(loss, params, n_coords=sum(p.numel() for p in params))
    assert n > 50
    assert agg <= 1e-3
    assert worst <= 1e-3


def test_training_touches_only_refiner_and_discriminator():
    _, model, refiner, disc = _setup(lambda_adv=0.1)
    g = torch.Generator().manual_seed(0)
    lat = torch.randn(6, 4, 4, 4, generator=g)
    x_v = torch.rand(6, 3, 8, 8, generator=g)
    x = torch.rand(6, 3, 8, 8, generator=g)
    before = frozen_digest(model)
    r0 = {k: v.clone() for k, v in refiner.state_dict().items()}
    d0 = {k: v.clone() for k, v in disc.state_dict().items()}
    hist = train_refiner(model, refiner, disc, lat, x_v, x, steps=100, batch_size=4, lr=1e-3, disc_lr=1e-3, disc_start=50, seed=1)
    assert frozen_digest(model) == before
    assert any(not torch.equal(r0[k], v) for k, v in refiner.state_dict().items())
    assert any(not torch.equal(d0[k], v) for k, v in disc.state_dict().items())
    assert all(v == 0.0 for v in hist["disc"][:50]) and all(v != 0.0 for v in hist["disc"][50:])
    assert all(v == 0.0 for v in hist["adversarial"][:50])
    assert len(hist["total"]) == 100


def test_training_is_deterministic():
    outs = []
    for _ in range(2):
        _, model, refiner, disc = _setup()
        lat, x_v, x = torch.ones(4, 4, 4, 4), torch.full((4, 3, 8, 8), 0.3), torch.full((4, 3, 8, 8), 0.6)
        outs.append(train_refiner(model, refiner, disc, lat, x_v, x, steps=5, batch_size=2, lr=1e-3, disc_start=2, seed=3))
    assert outs[0] == outs[1]


def test_drift_detected():
    _, model, refiner, disc = _setup()
    lat, x_v, x = torch.randn(2, 4, 4, 4), torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)

    def tamper(step, parts):
        with torch.no_grad():
            model.unet.conv_out.bias.add_(1.0)

    with pytest.raises(FrozenWeightDrift):
        train_refiner(model, refiner, disc, lat, x_v, x, steps=1, batch_size=2, callback=tamper)


def test_without_adversarial_weight_no_discriminator_updates():
    _, model, refiner, disc = _setup(lambda_adv=0.0)
    d0 = {k: v.clone() for k, v in disc.state_dict().items()}
    lat, x_v, x = torch.randn(2, 4, 4, 4), torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
    hist = train_refiner(model, refiner, disc, lat, x_v, x, steps=4, batch_size=2, lr=1e-3, disc_start=0)
    assert all(torch.equal(d0[k], v) for k, v in disc.state_dict().items())
    assert hist["adversarial"] == [0.0] * 4
