"""Training orchestration: condition dropout, dataset ingestion, stage loops,
run manifests and resumable ``UMDM1`` checkpoints.

Every training step draws its randomness from a generator seeded with
``(seed, stage, step)``, so a run resumed from a checkpoint replays exactly
the batches, timesteps and noise of the uninterrupted run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import threading
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import checkpoint as ckpt
from .codecs.descriptor import CodecDescriptor, as_image, from_uint8
from .codecs.registry import CodecRegistry
from .compensator.model import Compensator, ConditionSet
from .compensator.schedule import forward_diffuse
from .config import ModelConfig, SampleConfig, TrainConfig, config_hash, from_dict, to_dict
from .optim import cosine_lr, scheduled_lr, set_lr
from .refiner import DecoderRefiner, FrozenWeightDrift, PatchDiscriminator, RefinerConfig
from .textual import (
    ConPLevel,
    CaptionNotFound,
    CaptionStore,
    ContentPrompt,
    CompressionPrompt,
    parse_compression_prompt,
    render_compression_prompt,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"UMDM1"
ALL_LEVELS = tuple(ConPLevel)


class TrainingError(RuntimeError):
    pass


class PrerequisiteError(TrainingError):
    pass


# -- condition dropout ------------------------------------------------------


@dataclass(frozen=True)
class DropoutPolicy:
    p_comp: float = 0.1
    p_conp: float = 0.1
    independent: bool = True

    def __post_init__(self) -> None:
        for name in ("p_comp", "p_conp"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if not self.independent:
            raise ValueError("only independent dropout is supported")

    @property
    def joint_empty(self) -> float:
        return self.p_comp * self.p_conp


def dropout_masks(n: int, policy: DropoutPolicy, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (drop_comp, drop_conp) arrays, drawn independently."""
    drop_comp = rng.random(n) < policy.p_comp
    drop_conp = rng.random(n) < policy.p_conp
    return drop_comp, drop_conp


def condition_dropout(cond: ConditionSet, policy: DropoutPolicy, rng: np.random.Generator) -> ConditionSet:
    drop_comp, drop_conp = dropout_masks(len(cond), policy, rng)
    return ConditionSet(
        [None if d else c for c, d in zip(cond.conp, drop_conp)],
        [None if d else c for c, d in zip(cond.comp, drop_comp)],
    )


# -- dataset ingestion ------------------------------------------------------


@dataclass(frozen=True)
class TrainSample:
    image_id: str
    x: np.ndarray
    descriptor: CodecDescriptor
    x_v: np.ndarray
    conp: ContentPrompt
    comp: CompressionPrompt

    def check_consistent(self) -> None:
        d, level = parse_compression_prompt(self.comp.text)
        if d != self.descriptor or level != self.conp.level:
            raise TrainingError(f"{self.image_id}: ComP {self.comp.text!r} does not name the sample's operating point")


def operating_pairs(image_ids: Sequence[str], repertoire: Sequence[CodecDescriptor]) -> list[tuple[str, CodecDescriptor]]:
    if len(set(d.key for d in repertoire)) != len(repertoire):
        raise ValueError("codec repertoire lists an operating point twice")
    return [(i, d) for i in image_ids for d in repertoire]


def random_patch(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than the {size}x{size} patch")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top:top + size, left:left + size]


def load_image_dir(path: str | Path) -> dict[str, np.ndarray]:
    """Every PNG in ``path`` keyed by file stem, as float32 RGB in [0, 1]."""
    path = Path(path)
    files = sorted(path.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG images in {path}")
    return {f.stem: from_uint8(np.asarray(Image.open(f).convert("RGB"))) for f in files}


def crop_images(images: Mapping[str, np.ndarray], size: int | None, seed: int) -> dict[str, np.ndarray]:
    """One random ``size`` crop per image (ids visited in sorted order); ``None`` keeps full images."""
    rng = np.random.default_rng([seed, 0])
    out = {}
    for image_id in sorted(images):
        x = as_image(images[image_id])
        out[image_id] = x if size is None else np.ascontiguousarray(random_patch(x, size, rng))
    return out


def ingest_dataset(
    images: Mapping[str, np.ndarray] | str | Path,
    registry: CodecRegistry,
    repertoire: Sequence[CodecDescriptor],
    captions: CaptionStore,
    patch_size: int | None = None,
    seed: int = 42,
) -> Iterator[TrainSample]:
    """Yield one sample per (image, operating point), ConP level drawn uniformly.

    Each image is cropped once so every operating point of that image codes
    the same patch.  Missing captions are reported before any coding starts.
    """
    if not isinstance(images, Mapping):
        images = load_image_dir(images)
    missing = sorted(i for i in images if i not in captions)
    if missing:
        raise CaptionNotFound(f"no captions for {len(missing)} image(s), e.g. {missing[0]!r}")
    crops = crop_images(images, patch_size, seed)
    rng = np.random.default_rng([seed, 1])
    for image_id, x in crops.items():
        for d in repertoire:
            level = ALL_LEVELS[int(rng.integers(len(ALL_LEVELS)))]
            _, x_v = registry.encode_visual(x, d)
            sample = TrainSample(
                image_id, x, d, x_v, captions.content_prompt(image_id, level), render_compression_prompt(d, level)
            )
            sample.check_consistent()
            yield sample


def prefetch(items: Iterable, maxsize: int = 8) -> Iterator:
    """Run ``items`` on a worker thread behind a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    done = object()

    def worker():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
        q.put(done)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is done:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    thread.join()


@dataclass
class TrainingSet:
    """Stage-1 data held as tensors.  ConP levels are redrawn every step."""

    image_ids: list[str]
    x: torch.Tensor
    x_v: torch.Tensor
    descriptors: list[CodecDescriptor]
    captions: list[dict[ConPLevel, str]]

    def __len__(self) -> int:
        return len(self.image_ids)

    @classmethod
    def from_samples(cls, samples: Iterable[TrainSample], captions: CaptionStore) -> "TrainingSet":
        ids, xs, xvs, ds, caps = [], [], [], [], []
        for s in samples:
            ids.append(s.image_id)
            xs.append(s.x)
            xvs.append(s.x_v)
            ds.append(s.descriptor)
            caps.append(captions[s.image_id])
        if not ids:
            raise TrainingError("empty training set")
        to_t = lambda a: torch.from_numpy(np.stack(a)).permute(0, 3, 1, 2).contiguous()
        return cls(ids, to_t(xs), to_t(xvs), ds, caps)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for i, d in zip(self.image_ids, self.descriptors):
            h.update(f"{i}|{d.name}|{d.quality!r};".encode())
        h.update(self.x.numpy().tobytes())
        h.update(self.x_v.numpy().tobytes())
        return h.hexdigest()[:16]

    def texts(self, index: int, level: ConPLevel) -> tuple[str | None, str]:
        """(ConP text or None, ComP text) for a sample at a given level."""
        conp = None if level is ConPLevel.NONE else self.captions[index][level]
        comp = render_compression_prompt(self.descriptors[index], level)
        return conp, comp.text


def build_training_set(
    images, registry: CodecRegistry, repertoire, captions: CaptionStore, patch_size=None, seed: int = 42
) -> TrainingSet:
    samples = prefetch(ingest_dataset(images, registry, repertoire, captions, patch_size, seed))
    return TrainingSet.from_samples(samples, captions)


# -- manifests --------------------------------------------------------------


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    dataset_fingerprint: str = ""
    codec_repertoire: list[str] = field(default_factory=list)
    iterations: dict[str, int] = field(default_factory=dict)
    loss_curves: dict[str, list[float]] = field(default_factory=dict)
    dropout_policy: dict[str, float] = field(default_factory=dict)
    trainable: dict[str, str] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        return cls(**data)

    def record(self, stage: str, losses: Sequence[float]) -> None:
        self.loss_curves.setdefault(stage, []).extend(float(v) for v in losses)
        self.iterations[stage] = len(self.loss_curves[stage])


def manifest_path(checkpoint_path: str | Path) -> Path:
    p = Path(checkpoint_path)
    return p.with_name(p.name + ".manifest.json")


# -- checkpoints ------------------------------------------------------------


def _flatten_optimizer(opt: torch.optim.Optimizer) -> tuple[dict, dict[str, torch.Tensor]]:
    sd = opt.state_dict()
    tensors = {}
    scalars = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            if torch.is_tensor(value):
                tensors[f"{idx}.{key}"] = value
            else:
                scalars[f"{idx}.{key}"] = value
    return {"param_groups": sd["param_groups"], "scalars": scalars}, tensors


def _unflatten_optimizer(opt: torch.optim.Optimizer, meta: dict, tensors: Mapping[str, torch.Tensor]) -> None:
    state: dict[int, dict] = {}
    for name, value in tensors.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = value
    for name, value in meta["scalars"].items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = value
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


@dataclass
class TrainingState:
    """Everything a checkpoint carries."""

    model_cfg: ModelConfig
    train_cfg: TrainConfig
    sample_cfg: SampleConfig
    model: Compensator
    manifest: RunManifest
    refiner: DecoderRefiner | None = None
    disc: PatchDiscriminator | None = None
    stages_completed: list[int] = field(default_factory=list)
    progress: dict | None = None  # {"stage": s, "phase": ..., "step": n} for an interrupted stage
    optimizers: dict[str, torch.optim.Optimizer] = field(default_factory=dict)
    optimizer_meta: dict = field(default_factory=dict)
    optimizer_tensors: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)


def save_checkpoint(path: str | Path, state: TrainingState) -> bytes:
    sections = {"compensator": dict(state.model.state_dict())}
    if state.refiner is not None:
        sections["refiner"] = dict(state.refiner.state_dict())
    if state.disc is not None:
        sections["discriminator"] = dict(state.disc.state_dict())
    opt_meta = dict(state.optimizer_meta)
    for name, opt in state.optimizers.items():
        opt_meta[name], sections[f"optim.{name}"] = _flatten_optimizer(opt)
    for name, tensors in state.optimizer_tensors.items():
        sections.setdefault(f"optim.{name}", tensors)
    meta = {
        "model_config": to_dict(state.model_cfg),
        "train_config": to_dict(state.train_cfg),
        "sample_config": to_dict(state.sample_cfg),
        "stages_completed": sorted(state.stages_completed),
        "progress": state.progress,
        "manifest": asdict(state.manifest),
        "optimizers": opt_meta,
    }
    blob = ckpt.save(path, CHECKPOINT_MAGIC, meta, sections)
    manifest_path(path).write_text(state.manifest.to_json() + "\n", encoding="utf-8")
    return blob


def load_checkpoint(path: str | Path) -> TrainingState:
    """Load and hash-verify a checkpoint.  Optimizer states stay pending until
    a trainer asks for them via ``restore_optimizer``."""
    meta, sections = ckpt.load(path, CHECKPOINT_MAGIC)
    model_cfg = from_dict(ModelConfig, meta["model_config"])
    model = Compensator(model_cfg)
    try:
        model.load_state_dict(sections["compensator"])
    except (KeyError, RuntimeError) as exc:
        raise ckpt.CheckpointError(f"checkpoint does not match the model: {exc}") from exc
    refiner = disc = None
    if "refiner" in sections:
        refiner = DecoderRefiner(model_cfg)
        refiner.load_state_dict(sections["refiner"])
    if "discriminator" in sections:
        disc = PatchDiscriminator(model_cfg.disc_channels)
        disc.load_state_dict(sections["discriminator"])
    return TrainingState(
        model_cfg,
        from_dict(TrainConfig, meta["train_config"]),
        from_dict(SampleConfig, meta["sample_config"]),
        model,
        RunManifest.from_dict(meta["manifest"]),
        refiner,
        disc,
        list(meta["stages_completed"]),
        meta.get("progress"),
        optimizer_meta=meta.get("optimizers", {}),
        optimizer_tensors={k[len("optim."):]: v for k, v in sections.items() if k.startswith("optim.")},
    )


def restore_optimizer(state: TrainingState, name: str, opt: torch.optim.Optimizer) -> bool:
    if name not in state.optimizer_meta:
        return False
    _unflatten_optimizer(opt, state.optimizer_meta[name], state.optimizer_tensors.get(name, {}))
    return True


# -- trainable subsets ------------------------------------------------------

_SUBSET_ALIASES = {"all": ("text", "unet", "adapter", "null_conp")}


def trainable_names(model: Compensator, subset: str) -> set[str]:
    """Parameter names for a ``+``-joined list of groups (or ``all``)."""
    groups = model.parameter_groups()
    names: set[str] = set()
    for part in subset.split("+"):
        part = part.strip()
        for g in _SUBSET_ALIASES.get(part, (part,)):
            if g not in groups:
                raise ValueError(f"unknown parameter group {g!r}; choose from {sorted(groups)} or 'all'")
            names.update(groups[g])
    return names


def freeze_except(model: Compensator, names: set[str]) -> tuple[list[torch.nn.Parameter], dict[str, torch.Tensor]]:
    """Enable grads for ``names`` only; return (trainable params, frozen tensors by name)."""
    params = []
    for n, p in model.named_parameters():
        p.requires_grad_(n in names)
        if n in names:
            params.append(p)
    frozen = {n: t for n, t in model.state_dict().items() if n not in names}
    return params, frozen


def frozen_checksum(model: Compensator, names: set[str]) -> str:
    return ckpt.tensor_digest({n: t for n, t in model.state_dict().items() if n not in names})


def step_rng(seed: int, stage: int, step: int) -> tuple[np.random.Generator, torch.Generator]:
    rng = np.random.default_rng([seed, stage, step])
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    return rng, gen


def _check_finite(loss: torch.Tensor, stage: str, step: int, manifest: RunManifest | None) -> None:
    if not torch.isfinite(loss):
        msg = f"{stage}: loss became {loss.item()} at step {step}; run aborted"
        if manifest is not None:
            manifest.notes.append(msg)
        raise FloatingPointError(msg)


# -- stage 0: VAE and base prior --------------------------------------------


def train_vae(
    model: Compensator,
    images: torch.Tensor,
    *,
    steps: int,
    batch_size: int = 16,
    lr: float = 1e-3,
    kl_weight: float = 1e-6,
    seed: int = 42,
    start_step: int = 0,
    opt: torch.optim.Optimizer | None = None,
    manifest: RunManifest | None = None,
    on_step=None,
) -> list[float]:
    """Reconstruction (MSE + L1) plus a small KL term, cosine-decayed learning rate."""
    vae = model.vae
    vae.train()
    opt = opt or torch.optim.Adam(vae.parameters(), lr=lr)
    losses = []
    n = images.shape[0]
    for step in range(start_step, steps):
        set_lr(opt, cosine_lr(lr, step, steps))
        rng, gen = step_rng(seed, 0, step)
        idx = torch.from_numpy(rng.choice(n, size=min(batch_size, n), replace=False))
        x = images[idx]
        mean, logvar, _ = vae.encode_features(x)
        z = mean + torch.randn(mean.shape, generator=gen) * (0.5 * logvar).exp()
        rec = vae.decode(z)
        kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=(1, 2, 3)).mean()
        loss = F.mse_loss(rec, x) + 0.1 * (rec - x).abs().mean() + kl_weight * kl
        _check_finite(loss, "vae", step, manifest)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if on_step is not None:
            on_step(step, losses[-1], opt)
    vae.eval()
    return losses


@torch.no_grad()
def calibrate_latent_scale(model: Compensator, images: torch.Tensor, batch: int = 256) -> float:
    """Set the VAE latent scale so encoded latents have unit standard deviation."""
    model.vae.scale_factor.fill_(1.0)
    z = torch.cat([model.vae.encode(images[i:i + batch]) for i in range(0, len(images), batch)])
    scale = float(1.0 / z.std())
    model.vae.scale_factor.fill_(scale)
    return scale


@torch.no_grad()
def encode_latents(model: Compensator, images: torch.Tensor, batch: int = 256) -> torch.Tensor:
    return torch.cat([model.vae.encode(images[i:i + batch]) for i in range(0, len(images), batch)])


def _draw_levels(rng: np.random.Generator, n: int) -> list[ConPLevel]:
    return [ALL_LEVELS[i] for i in rng.integers(len(ALL_LEVELS), size=n)]


def train_prior(
    model: Compensator,
    z0: torch.Tensor,
    captions: Sequence[Mapping[ConPLevel, str]],
    *,
    steps: int,
    batch_size: int = 8,
    lr: float = 2e-4,
    p_conp: float = 0.1,
    seed: int = 42,
    start_step: int = 0,
    opt: torch.optim.Optimizer | None = None,
    manifest: RunManifest | None = None,
    on_step=None,
) -> list[float]:
    """Text-to-latent diffusion prior (text encoder + UNet, no adapter), cosine-decayed learning rate."""
    names = trainable_names(model, "text+unet+null_conp")
    params, _ = freeze_except(model, names)
    check = frozen_checksum(model, names)
    model.train()
    opt = opt or torch.optim.Adam(params, lr=lr)
    policy = DropoutPolicy(0.0, p_conp)
    losses = []
    n = z0.shape[0]
    for step in range(start_step, steps):
        set_lr(opt, cosine_lr(lr, step, steps))
        rng, gen = step_rng(seed, 10, step)
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        levels = _draw_levels(rng, len(idx))
        texts = [None if lv is ConPLevel.NONE else captions[i][lv] for i, lv in zip(idx, levels)]
        cond = ConditionSet(model.embed_texts(texts), [None] * len(idx))
        cond = condition_dropout(cond, policy, rng)
        z = z0[torch.from_numpy(idx)]
        t = torch.from_numpy(rng.integers(1, model.schedule.T + 1, size=len(idx)))
        eps = torch.randn(z.shape, generator=gen)
        loss = F.mse_loss(model.predict_noise(forward_diffuse(model.schedule, z, t, eps), t, cond, None), eps)
        _check_finite(loss, "prior", step, manifest)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if on_step is not None:
            on_step(step, losses[-1], opt)
    model.eval()
    if frozen_checksum(model, names) != check:
        raise FrozenWeightDrift("the VAE changed during prior training")
    return losses


# -- stage 1: adapter and condition pathway ---------------------------------


@dataclass
class Stage1Batch:
    z0: torch.Tensor
    x_v: torch.Tensor
    conp_texts: list[str | None]
    comp_texts: list[str]
    descriptors: list[CodecDescriptor]

    def check_consistent(self) -> None:
        for text, d in zip(self.comp_texts, self.descriptors):
            if parse_compression_prompt(text)[0] != d:
                raise TrainingError(f"ComP {text!r} does not match the batch's codec point {d}")


class _TextCache:
    """Memoized embeddings for a frozen text encoder."""

    def __init__(self, model: Compensator, frozen: bool):
        self.model = model
        self.frozen = frozen
        self.cache: dict[str, torch.Tensor] = {}

    def __call__(self, texts: list[str | None]) -> list[torch.Tensor | None]:
        if not self.frozen:
            return self.model.embed_texts(texts)
        # one text per call: batch composition would otherwise leak into the
        # embeddings at the ulp level and break bit-exact resume
        with torch.no_grad():
            for t in texts:
                if t is not None and t not in self.cache:
                    self.cache[t] = self.model.embed_texts([t])[0]
        return [None if t is None else self.cache[t] for t in texts]


def make_stage1_batch(data: TrainingSet, z0: torch.Tensor, rng: np.random.Generator, batch_size: int) -> Stage1Batch:
    idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
    levels = _draw_levels(rng, len(idx))
    pairs = [data.texts(int(i), lv) for i, lv in zip(idx, levels)]
    t_idx = torch.from_numpy(idx)
    batch = Stage1Batch(
        z0[t_idx], data.x_v[t_idx], [p[0] for p in pairs], [p[1] for p in pairs], [data.descriptors[i] for i in idx]
    )
    batch.check_consistent()
    return batch


def stage1_loss(
    model: Compensator,
    batch: Stage1Batch,
    rng: np.random.Generator,
    gen: torch.Generator,
    policy: DropoutPolicy,
    embed=None,
) -> torch.Tensor:
    """Epsilon-prediction MSE at uniformly drawn t in {1..T}, after condition dropout."""
    embed = embed or model.embed_texts
    cond = condition_dropout(ConditionSet(embed(batch.conp_texts), embed(batch.comp_texts)), policy, rng)
    b = batch.z0.shape[0]
    t = torch.from_numpy(rng.integers(1, model.schedule.T + 1, size=b))
    eps = torch.randn(batch.z0.shape, generator=gen, dtype=batch.z0.dtype)
    z_t = forward_diffuse(model.schedule, batch.z0, t, eps)
    return F.mse_loss(model.eps(z_t, t, cond, batch.x_v), eps)


def stage1_step(model, batch, opt, rng, gen, policy, embed=None) -> float:
    loss = stage1_loss(model, batch, rng, gen, policy, embed)
    if not torch.isfinite(loss):
        return loss.item()
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


def train_stage1(
    model: Compensator,
    data: TrainingSet,
    *,
    steps: int,
    batch_size: int = 8,
    lr: float = 5e-5,
    trainable: str = "adapter+cross_attn",
    policy: DropoutPolicy = DropoutPolicy(),
    seed: int = 42,
    start_step: int = 0,
    opt: torch.optim.Optimizer | None = None,
    z0: torch.Tensor | None = None,
    manifest: RunManifest | None = None,
    on_step=None,
    lr_schedule: str = "constant",
) -> list[float]:
    scheduled_lr(lr_schedule, lr, 0, steps)
    names = trainable_names(model, trainable)
    params, _ = freeze_except(model, names)
    check = frozen_checksum(model, names)
    if z0 is None:
        z0 = encode_latents(model, data.x)
    embed = _TextCache(model, frozen=not any(n.startswith("text.") for n in names))
    opt = opt or torch.optim.Adam(params, lr=lr)
    model.train()
    losses = []
    for step in range(start_step, steps):
        set_lr(opt, scheduled_lr(lr_schedule, lr, step, steps))
        rng, gen = step_rng(seed, 1, step)
        batch = make_stage1_batch(data, z0, rng, batch_size)
        value = stage1_step(model, batch, opt, rng, gen, policy, embed)
        if not np.isfinite(value):
            _check_finite(torch.tensor(value), "stage1", step, manifest)
        losses.append(value)
        if on_step is not None:
            on_step(step, value, opt)
    model.eval()
    if frozen_checksum(model, names) != check:
        raise FrozenWeightDrift("a frozen tensor changed during stage-1 training")
    return losses


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def refiner_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> RefinerConfig:
    return RefinerConfig.from_model_config(
        model_cfg, lambda_l1=train_cfg.lambda_l1, lambda_perc=train_cfg.lambda_perc, lambda_adv=train_cfg.lambda_adv
    )


def new_manifest(model_cfg: ModelConfig, train_cfg: TrainConfig, policy: DropoutPolicy | None = None) -> RunManifest:
    policy = policy or DropoutPolicy(train_cfg.p_comp, train_cfg.p_conp)
    return RunManifest(
        config_hash=config_hash(model_cfg, train_cfg),
        seed=train_cfg.seed,
        dropout_policy=asdict(policy),
        trainable={"stage0": "vae; text+unet+null_conp", "stage1": train_cfg.stage1_trainable, "stage2": "refiner+discriminator"},
    )
