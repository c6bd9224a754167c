import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import micro_config
from unimic import pipeline as pl
from unimic.checkpoint import CheckpointHashError
from unimic.codecs import default_registry, toy_dct
from unimic.compensator import Compensator, ConditionSet
from unimic.config import SampleConfig, TrainConfig
from unimic.optim import scheduled_lr
from unimic.refiner import frozen_digest
from unimic.textual import CaptionNotFound, CaptionStore, ConPLevel, render_compression_prompt
from unimic.toydata import make_toy_set, write_toy_set
from unimic.training import (
    DropoutPolicy,
    FrozenWeightDrift,
    Stage1Batch,
    TrainingError,
    TrainingSet,
    TrainSample,
    build_training_set,
    condition_dropout,
    crop_images,
    dropout_masks,
    ingest_dataset,
    load_checkpoint,
    manifest_path,
    new_manifest,
    operating_pairs,
    prefetch,
    random_patch,
    save_checkpoint,
    smoothed,
    train_stage1,
    trainable_names,
    TrainingState,
)


# -- condition dropout --------------------------------------------------------


def test_dropout_frequencies():
    n = 100_000
    comp, conp = dropout_masks(n, DropoutPolicy(), np.random.default_rng(0))
    assert 0.094 <= comp.mean() <= 0.106
    assert 0.094 <= conp.mean() <= 0.106
    assert 0.008 <= (comp & conp).mean() <= 0.012
    assert abs(np.corrcoef(comp, conp)[0, 1]) <= 0.02
    assert DropoutPolicy().joint_empty == pytest.approx(0.01)


def test_dropout_extremes():
    cond = ConditionSet(["a", "b", "c"], ["x", "y", "z"])
    rng = np.random.default_rng(1)
    for _ in range(20):
        same = condition_dropout(cond, DropoutPolicy(0.0, 0.0), rng)
        assert same.conp == cond.conp and same.comp == cond.comp
        empty = condition_dropout(cond, DropoutPolicy(1.0, 1.0), rng)
        assert empty.conp == [None] * 3 and empty.comp == [None] * 3


@pytest.mark.parametrize("kw", [dict(p_comp=-0.1), dict(p_conp=1.5), dict(independent=False)])
def test_dropout_policy_validation(kw):
    with pytest.raises(ValueError):
        DropoutPolicy(**kw)


# -- ingestion ----------------------------------------------------------------


@pytest.fixture(scope="module")
def small_data():
    ids, images, caps = make_toy_set(4, 16, seed=3)
    return dict(zip(ids, images)), CaptionStore(caps)


def test_cross_product_count():
    ids = [f"img{i}" for i in range(10)]
    rep = [replace(toy_dct(q), name=n) for n in ("a", "b", "c") for q in (10, 20, 30)]
    pairs = operating_pairs(ids, rep)
    assert len(pairs) == 90
    assert len({(i, d.key) for i, d in pairs}) == 90


def test_duplicate_operating_point_rejected():
    with pytest.raises(ValueError):
        operating_pairs(["a"], [toy_dct(5), toy_dct(5)])


def test_patch_crop_size():
    img = np.zeros((400, 500, 3), np.float32)
    rng = np.random.default_rng(0)
    assert random_patch(img, 320, rng).shape == (320, 320, 3)
    assert random_patch(img, 16, rng).shape == (16, 16, 3)
    with pytest.raises(ValueError):
        random_patch(img, 401, rng)


def test_crop_images_deterministic(small_data):
    images, _ = small_data
    a, b = crop_images(images, 8, 5), crop_images(images, 8, 5)
    assert all(np.array_equal(a[k], b[k]) and a[k].shape == (8, 8, 3) for k in images)
    assert crop_images(images, None, 5)[next(iter(images))].shape == (16, 16, 3)


def test_ingest_stream_is_consistent(small_data):
    images, caps = small_data
    registry = default_registry((5, 20))
    rep = [registry.lookup("toy-dct", 5), registry.lookup("toy-dct", 20)]
    samples = list(ingest_dataset(images, registry, rep, caps, patch_size=8))
    assert len(samples) == 8
    assert {(s.image_id, s.descriptor.quality) for s in samples} == {(i, q) for i in images for q in (5, 20)}
    for s in samples:
        s.check_consistent()
        assert s.x.shape == s.x_v.shape == (8, 8, 3)
        _, ref = registry.encode_visual(s.x, s.descriptor)
        assert np.array_equal(ref, s.x_v)
    # both operating points of an image code the same patch
    by_id = {}
    for s in samples:
        by_id.setdefault(s.image_id, []).append(s.x)
    assert all(np.array_equal(*xs) for xs in by_id.values())


def test_conp_levels_are_uniform():
    ids = [f"i{k}" for k in range(500)]
    images = {i: np.full((8, 8, 3), 0.5, np.float32) for i in ids}
    caps = CaptionStore({i: {lv: "a gray square" for lv in (ConPLevel.CONCISE, ConPLevel.MODERATE, ConPLevel.DETAILED)} for i in ids})
    registry = default_registry((50,))
    levels = [s.conp.level for s in ingest_dataset(images, registry, [toy_dct(50)], caps)]
    counts = np.array([levels.count(lv) for lv in ConPLevel])
    # 500 draws over 4 levels: expected 125 each, 4 sigma is about 39
    assert counts.min() >= 86 and counts.max() <= 164


def test_missing_caption(small_data):
    images, caps = small_data
    extra = dict(images, unlabelled=next(iter(images.values())))
    with pytest.raises(CaptionNotFound):
        next(ingest_dataset(extra, default_registry((5,)), [toy_dct(5)], caps))


def test_inconsistent_sample_rejected(small_data):
    images, caps = small_data
    image_id = next(iter(images))
    x = images[image_id]
    cp = caps.content_prompt(image_id, ConPLevel.CONCISE)
    bad = TrainSample(image_id, x, toy_dct(5), x, cp, render_compression_prompt(toy_dct(20), ConPLevel.CONCISE))
    with pytest.raises(TrainingError):
        bad.check_consistent()
    wrong_level = TrainSample(image_id, x, toy_dct(5), x, cp, render_compression_prompt(toy_dct(5), ConPLevel.DETAILED))
    with pytest.raises(TrainingError):
        wrong_level.check_consistent()
    batch = Stage1Batch(torch.zeros(1), torch.zeros(1), [None], [render_compression_prompt(toy_dct(5), "none").text], [toy_dct(20)])
    with pytest.raises(TrainingError):
        batch.check_consistent()


def test_ingest_from_directory(tmp_path):
    write_toy_set(tmp_path, 3, 16, seed=2)
    caps = pl.Dataset.load(tmp_path).captions
    samples = list(ingest_dataset(tmp_path, default_registry((20,)), [toy_dct(20)], caps, patch_size=16))
    assert len(samples) == 3


def test_prefetch_order_and_errors():
    assert list(prefetch(iter(range(50)), maxsize=2)) == list(range(50))

    def boom():
        yield 1
        raise RuntimeError("bad item")

    with pytest.raises(RuntimeError, match="bad item"):
        list(prefetch(boom()))


def test_training_set_fingerprint(small_data):
    images, caps = small_data
    registry = default_registry((5, 20))
    rep = [registry.lookup("toy-dct", 5), registry.lookup("toy-dct", 20)]
    a = build_training_set(images, registry, rep, caps, patch_size=8)
    b = build_training_set(images, registry, rep, caps, patch_size=8)
    c = build_training_set(images, registry, rep, caps, patch_size=8, seed=1)
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()
    conp, comp = a.texts(0, ConPLevel.NONE)
    assert conp is None and comp.endswith("conp:none")
    with pytest.raises(TrainingError):
        TrainingSet.from_samples([], caps)


# -- stage-1 training ---------------------------------------------------------


@pytest.fixture(scope="module")
def stage1_data(small_data):
    images, caps = small_data
    registry = default_registry((5, 20))
    rep = [registry.lookup("toy-dct", 5), registry.lookup("toy-dct", 20)]
    return build_training_set(images, registry, rep, caps, patch_size=8)


def _micro_model(seed=0):
    torch.manual_seed(seed)
    return Compensator(micro_config())


def test_loss_sequence_is_deterministic(stage1_data):
    runs = [train_stage1(_micro_model(), stage1_data, steps=6, batch_size=4, lr=1e-3, seed=3) for _ in range(2)]
    assert runs[0] == runs[1]
    other = train_stage1(_micro_model(), stage1_data, steps=6, batch_size=4, lr=1e-3, seed=4)
    assert other != runs[0]


def test_stage1_keeps_frozen_weights(stage1_data):
    model = _micro_model()
    vae = frozen_digest(model.vae)
    names = trainable_names(model, "adapter+cross_attn")
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train_stage1(model, stage1_data, steps=5, batch_size=4, lr=1e-2)
    assert frozen_digest(model.vae) == vae
    after = model.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before if k not in names)
    assert any(not torch.equal(before[k], after[k]) for k in names)


def test_stage1_detects_drift(stage1_data):
    model = _micro_model()

    def tamper(step, loss, opt):
        with torch.no_grad():
            model.vae.dec_out.bias.add_(1.0)

    with pytest.raises(FrozenWeightDrift):
        train_stage1(model, stage1_data, steps=1, batch_size=2, on_step=tamper)


def test_nan_loss_aborts_with_note(stage1_data):
    model = _micro_model()
    manifest = new_manifest(model.cfg, TrainConfig())
    with torch.no_grad():
        for n, p in model.named_parameters():
            if n.startswith("adapter."):
                p.fill_(float("nan"))
    with pytest.raises(FloatingPointError):
        train_stage1(model, stage1_data, steps=3, batch_size=2, manifest=manifest)
    assert manifest.notes and "stage1" in manifest.notes[0]


def test_trainable_names():
    model = _micro_model()
    groups = model.parameter_groups()
    assert trainable_names(model, "adapter") == set(groups["adapter"])
    assert trainable_names(model, "adapter+cross_attn") == set(groups["adapter"]) | set(groups["cross_attn"])
    assert trainable_names(model, "all") == set().union(*(groups[g] for g in ("text", "unet", "adapter", "null_conp")))
    assert not any(n.startswith("vae.") for n in trainable_names(model, "all"))
    with pytest.raises(ValueError):
        trainable_names(model, "adapter+decoder")


def test_smoothed():
    assert np.allclose(smoothed([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])


def test_lr_schedules():
    assert scheduled_lr("constant", 0.1, 7, 10) == 0.1
    assert scheduled_lr("cosine", 0.1, 0, 10) == 0.1
    assert scheduled_lr("cosine", 0.1, 5, 10) == pytest.approx(0.05)
    assert scheduled_lr("cosine", 0.1, 10, 10) == pytest.approx(0.0)
    values = [scheduled_lr("cosine", 1.0, k, 50) for k in range(51)]
    assert all(a > b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        scheduled_lr("step", 0.1, 0, 10)


def test_manifest_records_dropout_policy():
    m = new_manifest(micro_config(), TrainConfig())
    assert m.dropout_policy == {"p_comp": 0.1, "p_conp": 0.1, "independent": True}
    m.record("stage1.adapter", [1.0, 0.5])
    m.record("stage1.adapter", [0.25])
    assert m.iterations["stage1.adapter"] == 3
    assert json.loads(m.to_json())["loss_curves"]["stage1.adapter"] == [1.0, 0.5, 0.25]


# -- checkpoints --------------------------------------------------------------


def _state():
    model = _micro_model(1)
    return TrainingState(micro_config(), TrainConfig(), SampleConfig(), model, new_manifest(model.cfg, TrainConfig()))


def test_checkpoint_bytes_round_trip(tmp_path):
    state = _state()
    state.stages_completed = [0]
    opt = torch.optim.Adam(state.model.adapter.parameters(), lr=1e-3)
    loss = sum(p.sum() for p in state.model.adapter.parameters())
    loss.backward()
    opt.step()
    state.optimizers = {"stage1": opt}
    first = save_checkpoint(tmp_path / "a.umdm", state)
    loaded = load_checkpoint(tmp_path / "a.umdm")
    second = save_checkpoint(tmp_path / "b.umdm", loaded)
    assert first == second
    assert (tmp_path / "a.umdm").read_bytes() == first
    for k, v in state.model.state_dict().items():
        assert torch.equal(v, loaded.model.state_dict()[k])
    assert manifest_path(tmp_path / "a.umdm").exists()
    assert json.loads(manifest_path(tmp_path / "a.umdm").read_text())["seed"] == 42


def test_tampered_checkpoint_refused(tmp_path):
    path = tmp_path / "a.umdm"
    blob = bytearray(save_checkpoint(path, _state()))
    blob[len(blob) // 2] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointHashError):
        load_checkpoint(path)


# -- staged pipeline: resume and stage wiring ----------------------------------


_TINY = dict(
    image_size=8, batch_size=4, vae_steps=4, vae_batch_size=4, prior_steps=4, stage1_steps=6,
    num_latents=8, latent_sample_steps=2, stage2_steps=6, disc_start=2, refiner_lr=1e-3, disc_lr=1e-3,
    lr=1e-3, dct_qualities=(5.0, 20.0),
)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    write_toy_set(root, 6, 16, seed=4)
    return pl.Dataset.load(root)


def _run(path, dataset, stages, schedule="constant", **kw):
    cfg = TrainConfig(**_TINY, lr_schedule=schedule)
    registry = default_registry(cfg.dct_qualities)
    state = None
    for stage in stages:
        state = pl.run_stage(stage, path, dataset, micro_config(), cfg, SampleConfig(), registry, **kw)
    return state


def _same_weights(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


@pytest.mark.parametrize("schedule", ["constant", "cosine"])
def test_resume_matches_uninterrupted(tmp_path, tiny_dataset, schedule):
    ref = _run(tmp_path / "ref.umdm", tiny_dataset, (0, 1, 2), schedule)
    path = tmp_path / "res.umdm"
    # stage 0 interrupted inside the VAE phase, then inside the prior phase
    for stop in (2, 6, None):
        state = _run(path, tiny_dataset, (0,), schedule, stop_at=stop)
    assert state.stages_completed == [0]
    s1 = _run(path, tiny_dataset, (1,), schedule, stop_at=3)
    assert s1.progress == {"stage": 1, "phase": "adapter", "step": 3}
    _run(path, tiny_dataset, (1,), schedule)
    _run(path, tiny_dataset, (2,), schedule, stop_at=4)
    res = _run(path, tiny_dataset, (2,), schedule)
    assert res.stages_completed == [0, 1, 2]
    assert _same_weights(ref.model, res.model)
    assert _same_weights(ref.refiner, res.refiner)
    assert ref.manifest.loss_curves == res.manifest.loss_curves
    assert res.manifest.iterations == {"stage0.vae": 4, "stage0.prior": 4, "stage1.adapter": 6, "stage2.refiner": 6}


def test_stage_prerequisites(tmp_path, tiny_dataset):
    from unimic.training import PrerequisiteError

    with pytest.raises(PrerequisiteError):
        _run(tmp_path / "none.umdm", tiny_dataset, (1,))
    _run(tmp_path / "s0.umdm", tiny_dataset, (0,))
    with pytest.raises(PrerequisiteError):
        _run(tmp_path / "s0.umdm", tiny_dataset, (2,))


def test_stage2_freezes_stage1_weights(tmp_path, tiny_dataset):
    path = tmp_path / "m.umdm"
    s1 = _run(path, tiny_dataset, (0, 1))
    s2 = _run(path, tiny_dataset, (2,))
    assert _same_weights(s1.model, s2.model)
    assert s2.refiner is not None
    assert s2.manifest.dropout_policy == {"p_comp": 0.1, "p_conp": 0.1, "independent": True}
    assert s2.manifest.codec_repertoire == ["toy-dct@20", "toy-dct@5"]
