import numpy as np
import pytest
import torch

from conftest import micro_config
from fdcheck import fd_compare
from unimic import pipeline as pl
from unimic.codecs import CodecDescriptor, toy_dct
from unimic.compensator import (
    Compensator,
    ConditionSet,
    GuidanceConfig,
    VisualAdapter,
    cfg_combine,
    default_guidance_weight,
    interpolate_comp_embeddings,
    quality_to_alpha,
    spade,
    tokenize,
)
from unimic.config import ModelConfig
from unimic.textual import ConPLevel, render_compression_prompt
from unimic.training import DropoutPolicy, Stage1Batch, stage1_loss

COMP5 = render_compression_prompt(toy_dct(5), "concise").text
COMP20 = render_compression_prompt(toy_dct(20), "none").text


def _model(seed=0, **ov):
    torch.manual_seed(seed)
    return Compensator(micro_config(**ov)).eval()


def _randomize_heads(model, scale=0.1, seed=1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for head in list(model.adapter.to_gamma) + list(model.adapter.to_shift):
            for p in head.parameters():
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


class TestCFG:
    def test_identities_fp64(self):
        g = torch.Generator().manual_seed(0)
        c = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)
        u = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)
        assert torch.equal(cfg_combine(c, u, 1.0), c)
        assert torch.equal(cfg_combine(c, u, 0.0), u)
        pairs = list(zip(c.flatten().tolist(), u.flatten().tolist()))
        for w in (0.0, 1.0, 5.0, 7.5):
            got = cfg_combine(c, u, w).flatten()
            # scalar Python floats are IEEE doubles: same operation order, same bits
            ordered = torch.tensor([b if w == 0 else a if w == 1 else b + w * (a - b) for a, b in pairs], dtype=torch.float64)
            assert torch.equal(got, ordered)
            textbook = torch.tensor([w * a + (1 - w) * b for a, b in pairs], dtype=torch.float64)
            assert torch.allclose(got, textbook, rtol=0, atol=1e-14)

    def test_affine_in_w_fp32(self):
        g = torch.Generator().manual_seed(1)
        c, u = torch.randn(3, 4, 8, 8, generator=g), torch.randn(3, 4, 8, 8, generator=g)
        for w in (0.0, 1.0, 5.0, 7.5):
            hand = u.double() + w * (c.double() - u.double())
            got = cfg_combine(c, u, w).double()
            assert float((got - hand).norm() / hand.norm()) <= 1e-6

    def test_fixed_point(self):
        e = torch.randn(2, 4, 4, 4)
        for w in (0.0, 3.3, 7.5):
            assert torch.equal(cfg_combine(e, e, w), e)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cfg_combine(torch.zeros(1, 4, 4, 4), torch.zeros(1, 4, 4, 2), 1.0)

    def test_guided_eps_matches_separate_passes(self):
        m = _model()
        _randomize_heads(m)
        z = torch.randn(2, 4, 4, 4)
        x_v = torch.rand(2, 3, 8, 8)
        cond = m.condition_set(["a red circle on a blue field", None], [COMP5, COMP20])
        t = torch.full((2,), 25)
        with torch.no_grad():
            ec = m.eps(z, t, cond, x_v)
            eu = m.eps(z, t, cond.null(), x_v)
            for w in (1.0, 5.0):
                assert torch.allclose(m.guided_eps(z, 25, cond, x_v, w), cfg_combine(ec, eu, w), atol=1e-5)

    @pytest.mark.parametrize(
        "d, w",
        [
            (toy_dct(5), 5.0),
            (toy_dct(20), 7.5),
            (CodecDescriptor("traditional", "vtm", "PSNR", 52), 5.0),
            (CodecDescriptor("traditional", "vtm", "PSNR", 37), 7.5),
            (CodecDescriptor("traditional", "hm", "PSNR", 37), 5.0),
            (CodecDescriptor("neural", "elic", "PSNR", 1), 5.0),
            (CodecDescriptor("neural", "hific", "GAN", 0.14), 7.5),
            (CodecDescriptor("traditional", "jpeg", "PSNR", 5), 5.0),
        ],
    )
    def test_default_weights(self, d, w):
        assert default_guidance_weight(d) == w

    def test_guidance_config_validation(self):
        with pytest.raises(ValueError):
            GuidanceConfig(steps=0)
        with pytest.raises(ValueError):
            GuidanceConfig(w=float("inf"))


class TestZeroInit:
    def test_adapter_heads_start_at_zero(self):
        m = _model()
        for head in list(m.adapter.to_gamma) + list(m.adapter.to_shift):
            assert all(bool((p == 0).all()) for p in head.parameters())

    def test_predict_noise_ignores_xv_and_comp(self):
        m = _model()
        g = torch.Generator().manual_seed(3)
        z = torch.randn(2, 4, 4, 4, generator=g)
        t = torch.tensor([5, 40])
        conp = m.embed_texts(["two shapes", None])
        with torch.no_grad():
            ref = m.predict_noise(z, t, ConditionSet(conp, [None, None]), None)
            for k in range(3):
                x_v = torch.rand(2, 3, 8, 8, generator=g)
                comp = m.embed_texts([COMP5, COMP20] if k % 2 else [COMP20, None])
                out = m.eps(z, t, ConditionSet(conp, comp), x_v)
                assert torch.equal(out, ref)

    def test_spade_identity(self):
        h = torch.randn(2, 4, 3, 3)
        assert torch.equal(spade(h, torch.zeros_like(h), torch.zeros_like(h)), h)
        with pytest.raises(ValueError):
            spade(h, torch.zeros(2, 4, 3, 2), torch.zeros_like(h))

    def test_adapter_state_matches_unet_levels(self):
        m = _model()
        cond = m.condition_set([None], [COMP5])
        state = m.adapter_forward(torch.rand(1, 3, 8, 8), torch.tensor([3]), cond)
        assert [tuple(g.shape) for g, _ in state.modulations] == [(1, 2, 4, 4), (1, 4, 2, 2)]


class TestConditions:
    def test_pooling_is_permutation_invariant(self):
        g = torch.Generator().manual_seed(0)
        comp = torch.randn(1, 6, 4, generator=g, dtype=torch.float64)
        mask = torch.tensor([[True] * 5 + [False]])
        perm = torch.tensor([3, 0, 4, 1, 2, 5])
        a = VisualAdapter.pool(comp, mask)
        b = VisualAdapter.pool(comp[:, perm], mask[:, perm])
        assert torch.allclose(a, b, atol=1e-14)
        assert torch.allclose(a, comp[0, :5].mean(0, keepdim=True), atol=1e-14)

    def test_null_sentinels_are_fixed(self, tmp_path):
        m = _model()
        cond = ConditionSet([None, None], [None, None])
        conp, mask = m.pack_conp(cond)
        comp, _ = m.pack_comp(cond)
        assert torch.equal(conp[0, 0], m.null_conp[0]) and torch.equal(comp[1, 0], m.null_comp[0])
        assert mask.tolist() == [[True], [True]]
        assert not torch.equal(m.null_conp, m.null_comp)
        before = (m.null_conp.detach().clone(), m.null_comp.detach().clone())
        m.sample(torch.rand(1, 3, 8, 8), m.condition_set([None], [COMP5]), GuidanceConfig(5.0, steps=2))
        assert torch.equal(before[0], m.null_conp) and torch.equal(before[1], m.null_comp)

    def test_comp_tokens(self):
        toks = tokenize(COMP5, 4096, 96)
        assert len(toks) == 10
        assert tokenize("Red  CIRCLE", 4096, 96) == tokenize("red circle", 4096, 96)
        assert len(tokenize(" ".join(["w"] * 200), 16, 12)) == 12

    def test_batch_size_mismatch(self):
        m = _model()
        with pytest.raises(ValueError):
            m.predict_noise(torch.zeros(2, 4, 4, 4), torch.tensor([1, 1]), m.condition_set([None], [None]), None)

    def test_trained_adapter_distinguishes_comp(self):
        m = _model()
        _randomize_heads(m)
        x_v = torch.rand(1, 3, 8, 8)
        t = torch.tensor([10])
        with torch.no_grad():
            a = m.adapter_forward(x_v, t, m.condition_set([None], [COMP5]))
            b = m.adapter_forward(x_v, t, m.condition_set([None], [COMP20]))
        dist = sum(float((ga - gb).pow(2).sum() + (sa - sb).pow(2).sum()) for (ga, sa), (gb, sb) in zip(a.modulations, b.modulations))
        assert dist > 0


class TestShapes:
    def test_latent_shape_default_config(self):
        m = Compensator(ModelConfig(vae_channels=(4, 4, 4), unet_channels=(4, 4, 4), text_dim=8, text_vocab=16,
                                    text_heads=1, attn_heads=1, comp_mlp_width=4, norm_groups=2))
        assert m.latent_shape(64, 64) == (4, 16, 16)
        x = torch.rand(1, 3, 64, 64)
        z1, z2 = m.vae_encode(x), m.vae_encode(x)
        assert z1.shape == (1, 4, 16, 16) and torch.equal(z1, z2)
        assert m.vae_decode(z1).shape == x.shape
        with pytest.raises(ValueError):
            m.vae_encode(torch.rand(1, 3, 62, 64))
        with pytest.raises(ValueError):
            m.latent_shape(30, 32)

    def test_micro_config_budget(self):
        assert sum(p.numel() for p in _model().parameters()) <= 5000


class TestSampler:
    def test_noise_estimate_skip_term(self):
        # with the UNet output zeroed only the skip sqrt(1 - abar_t) z_t remains
        m = _model()
        with torch.no_grad():
            m.unet.conv_out.weight.zero_()
            m.unet.conv_out.bias.zero_()
        cfg = m.cfg
        abar = np.cumprod(1.0 - np.linspace(cfg.beta_start, cfg.beta_end, cfg.num_timesteps))
        t = torch.tensor([1, cfg.num_timesteps // 2, cfg.num_timesteps])
        z = torch.randn(3, 4, 4, 4, dtype=torch.float64)
        with torch.no_grad():
            out = m.double().predict_noise(z, t, m.condition_set([None] * 3, [None] * 3), None)
        for i, ti in enumerate(t.tolist()):
            assert torch.allclose(out[i], np.sqrt(1.0 - abar[ti - 1]) * z[i], rtol=0, atol=1e-12)

    def test_deterministic_under_seed(self):
        m = _model()
        _randomize_heads(m)
        x_v = torch.rand(2, 3, 8, 8)
        cond = m.condition_set(["a ring", None], [COMP5, COMP5])
        g = GuidanceConfig(w=5.0, steps=5)
        a = m.sample(x_v, cond, g, seed=42)
        b = m.sample(x_v, cond, g, seed=42)
        c = m.sample(x_v, cond, g, seed=43)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_single_step(self):
        m = _model()
        z = m.sample(torch.rand(1, 3, 8, 8), m.condition_set([None], [None]), GuidanceConfig(steps=1))
        assert z.shape == (1, 4, 4, 4) and bool(torch.isfinite(z).all())

    def test_compensate_pads_and_crops(self):
        m = _model()
        x_v = torch.rand(3, 3, 7, 9)
        prompts = [pl.NO_CONTENT] * 3 if hasattr(pl, "NO_CONTENT") else [pl.ContentPrompt(ConPLevel.NONE, "")] * 3
        out = pl.compensate(m, None, x_v, toy_dct(5), prompts, steps=2, batch_size=2)
        assert out.shape == x_v.shape
        assert float(out.min()) >= 0 and float(out.max()) <= 1
        again = pl.compensate(m, None, x_v, toy_dct(5), prompts, steps=2, batch_size=2)
        assert torch.equal(out, again)


class TestInterpolation:
    def test_alpha_rule(self):
        assert quality_to_alpha(55, 52, 57) == pytest.approx(0.6, abs=1e-15)
        assert quality_to_alpha(52, 52, 57) == 0.0
        assert quality_to_alpha(57, 52, 57) == 1.0
        with pytest.raises(ValueError):
            quality_to_alpha(60, 52, 57)
        with pytest.raises(ValueError):
            quality_to_alpha(52, 52, 52)

    def test_endpoints_and_midpoint(self):
        g = torch.Generator().manual_seed(0)
        a = torch.randn(10, 8, generator=g, dtype=torch.float64)
        b = torch.randn(10, 8, generator=g, dtype=torch.float64)
        assert torch.equal(interpolate_comp_embeddings(a, b, 0.0), a)
        assert torch.equal(interpolate_comp_embeddings(a, b, 1.0), b)
        assert torch.allclose(interpolate_comp_embeddings(a, b, 0.5), (a + b) / 2, atol=1e-15)
        with pytest.raises(ValueError):
            interpolate_comp_embeddings(a, b, 1.5)
        with pytest.raises(ValueError):
            interpolate_comp_embeddings(a, b[:3], 0.5)

    def test_unseen_quality_comp(self):
        m = _model()
        vtm = CodecDescriptor("traditional", "vtm", "PSNR", 55)
        got = pl.unseen_quality_comp(m, vtm, "none", (52, 57))
        e52, e57 = m.embed_texts(
            [render_compression_prompt(CodecDescriptor("traditional", "vtm", "PSNR", q), "none").text for q in (52, 57)]
        )
        assert torch.allclose(got, 0.4 * e52 + 0.6 * e57, atol=1e-6)


def _stage1_closure(model, seed=0):
    g = torch.Generator().manual_seed(seed)
    batch = Stage1Batch(
        z0=torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64),
        x_v=torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64),
        conp_texts=["a red circle", None],
        comp_texts=[COMP5, COMP20],
        descriptors=[toy_dct(5), toy_dct(20)],
    )
    batch.check_consistent()

    def loss():
        rng = np.random.default_rng([seed, 1])
        gen = torch.Generator().manual_seed(seed)
        return stage1_loss(model, batch, rng, gen, DropoutPolicy(0.0, 0.0))

    return loss


def test_stage1_gradient_matches_finite_differences():
    m = _model(seed=3).double()
    _randomize_heads(m, 0.3)
    params = [p for n, p in m.named_parameters() if not n.startswith("vae.")]
    assert sum(p.numel() for p in params) <= 5000
    agg, worst, n = fd_compare(_stage1_closure(m), params, n_coords=400)
    assert n > 100
    assert agg <= 1e-3
    assert worst <= 1e-3
