"""End-to-end encode / decode and the training-stage runners.

Encoder side: basic codec -> visual payload, caption -> ConP bytes, both
packed into a container.  Decoder side: basic decode gives x_v; the ComP is
re-rendered from header fields; the compensator samples a latent conditioned
on x_v and both prompts; the (optionally refined) VAE decoder produces x_hat.
"""

from __future__ import annotations

import hashlib
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .codecs import default_registry
from .codecs.descriptor import CodecDescriptor, as_image
from .codecs.registry import CodecRegistry
from .compensator.model import (
    Compensator,
    ConditionSet,
    GuidanceConfig,
    default_guidance_weight,
    interpolate_comp_embeddings,
    quality_to_alpha,
)
from .config import ModelConfig, SampleConfig, TrainConfig
from .container import UniMICStream, build_stream, pack, resolve_descriptor, unpack
from .evaluation.interp import dp_interpolate
from .refiner import DecoderRefiner, PatchDiscriminator, refine_decode, train_refiner
from .textual import CaptionStore, ConPLevel, ContentPrompt, decompress_prompt, ingest_captions, render_compression_prompt
from . import training as tr

log = logging.getLogger(__name__)


# -- inference ----------------------------------------------------------------


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) or (H, W, 3) float array -> (N, 3, H, W) float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).contiguous()


def to_numpy(images: torch.Tensor) -> np.ndarray:
    return images.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


def _pad(x: torch.Tensor, multiple: int) -> torch.Tensor:
    ph, pw = (-x.shape[-2]) % multiple, (-x.shape[-1]) % multiple
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if ph < x.shape[-2] and pw < x.shape[-1] else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


def conditions_for(
    model: Compensator, descriptor: CodecDescriptor, prompts: Sequence[ContentPrompt], comp_override=None
) -> ConditionSet:
    """ConP embeddings plus ComP embeddings rendered from the operating point."""
    conp = [None if p.level is ConPLevel.NONE else p.text for p in prompts]
    if comp_override is not None:
        comp = list(comp_override)
    else:
        comp = model.embed_texts([render_compression_prompt(descriptor, p.level).text for p in prompts])
    return ConditionSet(model.embed_texts(conp), comp)


@torch.no_grad()
def unseen_quality_comp(
    model: Compensator, descriptor: CodecDescriptor, level: ConPLevel | str, seen: tuple[float, float]
) -> torch.Tensor:
    """ComP embedding for a quality the model never saw, blended from two seen neighbours.

    ``alpha`` is the linear position of ``descriptor.quality`` between
    ``seen[0]`` (alpha 0) and ``seen[1]`` (alpha 1).
    """
    alpha = quality_to_alpha(descriptor.quality, *seen)
    e_a, e_b = model.embed_texts(
        [render_compression_prompt(replace(descriptor, quality=q), level).text for q in seen]
    )
    return interpolate_comp_embeddings(e_a, e_b, alpha)


@torch.no_grad()
def compensate(
    model: Compensator,
    refiner: DecoderRefiner | None,
    x_v: torch.Tensor,
    descriptor: CodecDescriptor,
    prompts: Sequence[ContentPrompt],
    *,
    w: float | None = None,
    steps: int = 50,
    eta: float = 0.0,
    seed: int = 42,
    batch_size: int = 64,
    comp_override=None,
    return_latents: bool = False,
):
    """Perceptually compensated reconstruction x_hat of a batch of decoded images.

    Inputs of any size are reflect-padded to the model's size multiple and
    cropped back.  Batch ``k`` samples its initial noise from ``seed + k``.
    """
    if len(prompts) != x_v.shape[0]:
        raise ValueError(f"{len(prompts)} prompts for {x_v.shape[0]} images")
    model.eval()
    guidance = GuidanceConfig(default_guidance_weight(descriptor) if w is None else w, eta, steps)
    h, wd = x_v.shape[-2:]
    padded = _pad(x_v, model.cfg.latent_multiple)
    outs, latents = [], []
    for k, start in enumerate(range(0, x_v.shape[0], batch_size)):
        sl = slice(start, start + batch_size)
        override = None if comp_override is None else comp_override[sl]
        cond = conditions_for(model, descriptor, prompts[sl], override)
        z0 = model.sample(padded[sl], cond, guidance, seed=seed + k)
        x_hat = refine_decode(model, refiner, z0, padded[sl])
        outs.append(x_hat.clamp(0.0, 1.0)[..., :h, :wd])
        latents.append(z0)
    x_hat = torch.cat(outs)
    return (x_hat, torch.cat(latents)) if return_latents else x_hat


def encode_image(
    image: np.ndarray, registry: CodecRegistry, descriptor: CodecDescriptor, content: ContentPrompt
) -> tuple[bytes, UniMICStream, np.ndarray]:
    """Returns (container bytes, stream, decoded x_v)."""
    image = as_image(image)
    payload, x_v = registry.encode_visual(image, descriptor)
    stream = build_stream(registry, descriptor, payload, content, image.shape[0], image.shape[1])
    return pack(stream), stream, x_v


@dataclass
class Decoded:
    stream: UniMICStream
    descriptor: CodecDescriptor
    content: ContentPrompt
    x_v: np.ndarray
    x_hat: np.ndarray | None
    x_bar: np.ndarray | None


def decode_stream(
    data: bytes,
    registry: CodecRegistry,
    model: Compensator | None,
    refiner: DecoderRefiner | None = None,
    sample: SampleConfig | None = None,
) -> Decoded:
    """Unpack, basic-decode and (when a model is given) compensate one container."""
    stream = unpack(data)
    descriptor = resolve_descriptor(registry, stream.header)
    x_v = registry.decode_visual(stream.visual, descriptor)
    if x_v.shape[:2] != (stream.header.height, stream.header.width):
        raise ValueError("decoded image size does not match the container header")
    level = stream.header.conp_level
    content = ContentPrompt(level, decompress_prompt(stream.prompt) if stream.prompt is not None else "")
    if model is None:
        return Decoded(stream, descriptor, content, x_v, None, None)
    s = sample or SampleConfig()
    x_hat = to_numpy(
        compensate(model, refiner, to_tensor(x_v), descriptor, [content], w=s.w, steps=s.steps, eta=s.eta, seed=s.seed)
    )[0]
    return Decoded(stream, descriptor, content, x_v, x_hat, dp_interpolate(x_v, x_hat, s.beta))


# -- stage-2 latent dataset ---------------------------------------------------


@torch.no_grad()
def generate_latents(
    model: Compensator,
    data: tr.TrainingSet,
    count: int,
    *,
    steps: int = 20,
    seed: int = 42,
    batch_size: int = 64,
):
    """Sample ``count`` latents with the stage-1 model on random training pairs.

    Returns (latents, x_v, x, indices).  Pairs are grouped by operating point so
    each batch uses that point's guidance weight.
    """
    rng = np.random.default_rng([seed, 20])
    idx = rng.choice(len(data), size=count, replace=count > len(data))
    levels = [tr.ALL_LEVELS[i] for i in rng.integers(len(tr.ALL_LEVELS), size=count)]
    groups: dict[CodecDescriptor, list[int]] = defaultdict(list)
    for pos, i in enumerate(idx):
        groups[data.descriptors[i]].append(pos)
    latents = torch.empty((count,) + model.latent_shape(*data.x.shape[-2:]))
    for g, (d, positions) in enumerate(sorted(groups.items(), key=lambda kv: kv[0].key)):
        prompts = []
        for pos in positions:
            conp, _ = data.texts(int(idx[pos]), levels[pos])
            prompts.append(ContentPrompt(levels[pos], conp or ""))
        x_v = data.x_v[torch.from_numpy(idx[positions])]
        _, z = compensate(
            model, None, x_v, d, prompts, steps=steps, seed=seed + 1000 * g, batch_size=batch_size, return_latents=True
        )
        latents[torch.tensor(positions)] = z
    t_idx = torch.from_numpy(idx)
    return latents, data.x_v[t_idx], data.x[t_idx], idx


# -- stage runners ------------------------------------------------------------


class StopTraining(Exception):
    """Raised from a step callback to interrupt a run after a checkpoint."""


@dataclass
class Dataset:
    images: dict[str, np.ndarray]
    captions: CaptionStore

    @classmethod
    def load(cls, data_dir: str | Path) -> "Dataset":
        data_dir = Path(data_dir)
        cap = data_dir / "captions.jsonl"
        if not cap.exists():
            raise FileNotFoundError(f"caption sidecar {cap} not found")
        images = tr.load_image_dir(data_dir)
        return cls(images, ingest_captions(cap))


def repertoire(registry: CodecRegistry, train_cfg: TrainConfig) -> list[CodecDescriptor]:
    """Operating points used for training: the configured toy-DCT qualities
    when registered, otherwise every registered point."""
    from .codecs import TOY_DCT

    points = [d for d in registry.list_codecs() if d.name == TOY_DCT and d.quality in train_cfg.dct_qualities]
    return points or registry.list_codecs()


class _Saver:
    """Step callback: records losses, checkpoints periodically, optionally stops."""

    def __init__(self, state: tr.TrainingState, path, stage: int, phase: str, opts: dict, every, stop_at, offset=0):
        self.state, self.path, self.stage, self.phase = state, path, stage, phase
        self.opts, self.every, self.stop_at, self.offset = opts, every, stop_at, offset

    def __call__(self, step: int, loss, _opt=None) -> None:
        value = loss["total"] if isinstance(loss, dict) else loss
        self.state.manifest.record(f"stage{self.stage}.{self.phase}", [value])
        done = step + 1
        stop = self.stop_at is not None and self.offset + done >= self.stop_at
        if (self.every and done % self.every == 0) or stop:
            self.save(done)
        if stop:
            raise StopTraining(f"stopped at {self.phase} step {done}")

    def save(self, step: int) -> None:
        self.state.progress = {"stage": self.stage, "phase": self.phase, "step": step}
        self.state.optimizers = dict(self.opts)
        tr.save_checkpoint(self.path, self.state)


def _start_step(state: tr.TrainingState, stage: int, phase: str, name: str, opt) -> int:
    p = state.progress
    if p and p.get("stage") == stage and p.get("phase") == phase and p.get("step", 0) > 0:
        if not tr.restore_optimizer(state, name, opt):
            raise tr.TrainingError(f"checkpoint has progress for {phase} but no optimizer state")
        return int(p["step"])
    return 0


def _phase_done(state: tr.TrainingState, stage: int, phase: str, order: Sequence[str]) -> bool:
    p = state.progress
    if not p or p.get("stage") != stage:
        return False
    return order.index(p["phase"]) > order.index(phase)


def _finish_stage(state: tr.TrainingState, stage: int, path) -> tr.TrainingState:
    state.stages_completed = sorted(set(state.stages_completed) | {stage})
    state.progress = None
    state.optimizers = {}
    state.optimizer_meta = {}
    state.optimizer_tensors = {}
    tr.save_checkpoint(path, state)
    return state


def require_stage(state: tr.TrainingState, stage: int) -> None:
    if stage - 1 not in state.stages_completed:
        raise tr.PrerequisiteError(f"stage {stage} needs a checkpoint that completed stage {stage - 1}")


def _stage0_images(dataset: Dataset, train_cfg: TrainConfig) -> torch.Tensor:
    crops = tr.crop_images(dataset.images, train_cfg.image_size, train_cfg.seed)
    return to_tensor(np.stack([crops[i] for i in sorted(crops)]))


def run_stage0(
    path,
    dataset: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    sample_cfg: SampleConfig,
    *,
    resume: tr.TrainingState | None = None,
    checkpoint_every: int | None = None,
    stop_at: int | None = None,
) -> tr.TrainingState:
    """VAE, then the text-conditioned base prior.

    ``stop_at`` counts steps across both phases (VAE steps first).
    """
    if resume is not None:
        state = resume
    else:
        torch.manual_seed(train_cfg.seed)
        state = tr.TrainingState(
            model_cfg, train_cfg, sample_cfg, Compensator(model_cfg), tr.new_manifest(model_cfg, train_cfg)
        )
    model = state.model
    images = _stage0_images(dataset, train_cfg)
    ids = sorted(dataset.images)
    state.manifest.dataset_fingerprint = hashlib.sha256(images.numpy().tobytes()).hexdigest()[:16]
    order = ("vae", "prior")

    if not _phase_done(state, 0, "vae", order):
        opt = torch.optim.Adam(model.vae.parameters(), lr=train_cfg.vae_lr)
        start = _start_step(state, 0, "vae", "vae", opt)
        saver = _Saver(state, path, 0, "vae", {"vae": opt}, checkpoint_every, stop_at)
        tr.train_vae(
            model, images, steps=train_cfg.vae_steps, batch_size=train_cfg.vae_batch_size, lr=train_cfg.vae_lr,
            kl_weight=train_cfg.vae_kl_weight, seed=train_cfg.seed, start_step=start, opt=opt,
            manifest=state.manifest, on_step=saver,
        )
        tr.calibrate_latent_scale(model, images)
        state.progress = {"stage": 0, "phase": "prior", "step": 0}
        state.optimizers, state.optimizer_meta, state.optimizer_tensors = {}, {}, {}

    z0 = tr.encode_latents(model, images)
    captions = [dataset.captions[i] for i in ids]
    names = tr.trainable_names(model, "text+unet+null_conp")
    params, _ = tr.freeze_except(model, names)
    opt = torch.optim.Adam(params, lr=train_cfg.prior_lr)
    start = _start_step(state, 0, "prior", "prior", opt)
    saver = _Saver(state, path, 0, "prior", {"prior": opt}, checkpoint_every, stop_at, offset=train_cfg.vae_steps)
    tr.train_prior(
        model, z0, captions, steps=train_cfg.prior_steps, batch_size=train_cfg.batch_size, lr=train_cfg.prior_lr,
        p_conp=train_cfg.p_conp, seed=train_cfg.seed, start_step=start, opt=opt, manifest=state.manifest,
        on_step=saver,
    )
    return _finish_stage(state, 0, path)


def build_stage1_data(dataset: Dataset, registry: CodecRegistry, train_cfg: TrainConfig) -> tr.TrainingSet:
    return tr.build_training_set(
        dataset.images, registry, repertoire(registry, train_cfg), dataset.captions, train_cfg.image_size, train_cfg.seed
    )


def run_stage1(
    path,
    state: tr.TrainingState,
    dataset: Dataset,
    registry: CodecRegistry | None = None,
    *,
    checkpoint_every: int | None = None,
    stop_at: int | None = None,
    data: tr.TrainingSet | None = None,
) -> tr.TrainingState:
    require_stage(state, 1)
    cfg = state.train_cfg
    registry = registry or default_registry(cfg.dct_qualities)
    data = data or build_stage1_data(dataset, registry, cfg)
    model = state.model
    state.manifest.dataset_fingerprint = data.fingerprint()
    state.manifest.codec_repertoire = sorted({f"{d.name}@{d.quality:g}" for d in data.descriptors})
    policy = tr.DropoutPolicy(cfg.p_comp, cfg.p_conp)
    state.manifest.dropout_policy = asdict(policy)
    names = tr.trainable_names(model, cfg.stage1_trainable)
    params, _ = tr.freeze_except(model, names)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    start = _start_step(state, 1, "adapter", "stage1", opt)
    saver = _Saver(state, path, 1, "adapter", {"stage1": opt}, checkpoint_every, stop_at)
    tr.train_stage1(
        model, data, steps=cfg.stage1_steps, batch_size=cfg.batch_size, lr=cfg.lr, trainable=cfg.stage1_trainable,
        policy=policy, seed=cfg.seed, start_step=start, opt=opt, manifest=state.manifest, on_step=saver,
        lr_schedule=cfg.lr_schedule,
    )
    return _finish_stage(state, 1, path)


def run_stage2(
    path,
    state: tr.TrainingState,
    dataset: Dataset,
    registry: CodecRegistry | None = None,
    *,
    checkpoint_every: int | None = None,
    stop_at: int | None = None,
    data: tr.TrainingSet | None = None,
) -> tr.TrainingState:
    require_stage(state, 2)
    cfg = state.train_cfg
    registry = registry or default_registry(cfg.dct_qualities)
    data = data or build_stage1_data(dataset, registry, cfg)
    model = state.model
    latents, x_v, x, _ = generate_latents(model, data, cfg.num_latents, steps=cfg.latent_sample_steps, seed=cfg.seed)
    rcfg = tr.refiner_config(state.model_cfg, cfg)
    resuming = state.progress is not None and state.progress.get("stage") == 2
    if not resuming or state.refiner is None:
        torch.manual_seed(cfg.seed + 2)
        state.refiner = DecoderRefiner(state.model_cfg, rcfg)
        state.disc = PatchDiscriminator(state.model_cfg.disc_channels) if rcfg.lambda_adv > 0 else None
    else:
        state.refiner.cfg = rcfg
    opt_g = torch.optim.Adam(state.refiner.parameters(), lr=cfg.refiner_lr)
    opt_d = torch.optim.Adam(state.disc.parameters(), lr=cfg.disc_lr, betas=(0.5, 0.9)) if state.disc else None
    start = _start_step(state, 2, "refiner", "refiner", opt_g)
    if start and opt_d is not None:
        tr.restore_optimizer(state, "disc", opt_d)
    opts = {"refiner": opt_g, **({"disc": opt_d} if opt_d is not None else {})}
    saver = _Saver(state, path, 2, "refiner", opts, checkpoint_every, stop_at)
    train_refiner(
        model, state.refiner, state.disc, latents, x_v, x, steps=cfg.stage2_steps, batch_size=cfg.batch_size,
        lr=cfg.refiner_lr, disc_lr=cfg.disc_lr, disc_start=cfg.disc_start, seed=cfg.seed, start_step=start,
        optimizers=(opt_g, opt_d), callback=saver, lr_schedule=cfg.lr_schedule,
    )
    return _finish_stage(state, 2, path)


def run_stage(
    stage: int,
    path,
    dataset: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    sample_cfg: SampleConfig,
    registry: CodecRegistry | None = None,
    *,
    checkpoint_every: int | None = None,
    stop_at: int | None = None,
) -> tr.TrainingState:
    """Run (or resume) one stage against the checkpoint at ``path``.

    Stage 0 starts fresh unless the checkpoint holds an interrupted stage 0.
    Later stages load the checkpoint and require the previous stage; the
    loaded checkpoint's configs are kept so resumed runs stay consistent.
    """
    path = Path(path)
    if stage not in (0, 1, 2):
        raise ValueError(f"unknown stage {stage}")
    state = tr.load_checkpoint(path) if path.exists() else None
    try:
        if stage == 0:
            resume = state if state is not None and state.progress and state.progress.get("stage") == 0 else None
            return run_stage0(
                path, dataset, model_cfg, train_cfg, sample_cfg, resume=resume,
                checkpoint_every=checkpoint_every, stop_at=stop_at,
            )
        if state is None:
            raise tr.PrerequisiteError(f"stage {stage} needs an existing checkpoint at {path}")
        runner = run_stage1 if stage == 1 else run_stage2
        return runner(path, state, dataset, registry, checkpoint_every=checkpoint_every, stop_at=stop_at)
    except StopTraining as stop:
        log.info("%s; checkpoint saved to %s", stop, path)
        return tr.load_checkpoint(path)
