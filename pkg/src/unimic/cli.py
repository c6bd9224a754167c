"""Command-line entry point.

Exit codes: 0 success, 2 user or config error, 3 data error, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import pipeline as pl
from . import training as tr
from .checkpoint import CheckpointError
from .codecs import DecodeError, ExternalCodecError, UnknownCodecError, default_registry, register_manifest
from .codecs.descriptor import CodecError, from_uint8, to_uint8
from .config import ConfigError, load_config
from .container import ContainerError, bpp_breakdown
from .refiner import FrozenWeightDrift
from .textual import (
    NO_CONTENT,
    CaptionFormatError,
    CaptionNotFound,
    ConPLevel,
    PromptDecodeError,
    ingest_captions,
)

log = logging.getLogger("unimic")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _registry(args):
    registry = default_registry()
    if getattr(args, "codec_manifest", None):
        register_manifest(registry, _existing(args.codec_manifest, "codec manifest"))
    return registry


def _configs(args, extra: dict | None = None):
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    overrides.update(extra or {})
    if args.seed is not None:
        overrides["seed"] = args.seed
    model, train, sample = load_config(_existing(args.config, "config file"), overrides)
    if args.seed is not None:
        sample.seed = args.seed
    if args.w is not None:
        sample.w = args.w
    if args.beta is not None:
        if not 0.0 <= args.beta <= 1.0:
            raise UsageError("--beta must lie in [0, 1]")
        sample.beta = args.beta
    return model, train, sample


def _read_image(path: Path) -> np.ndarray:
    return from_uint8(np.asarray(Image.open(path).convert("RGB")))


def _write_image(path: Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path)


def _load_model(path: Path, need_stage: int = 1):
    state = tr.load_checkpoint(path)
    if need_stage not in state.stages_completed:
        raise tr.PrerequisiteError(f"checkpoint {path} has not completed stage {need_stage}")
    return state


# -- commands -----------------------------------------------------------------


def cmd_encode(args) -> int:
    image_path = _existing(args.image, "image")
    registry = _registry(args)
    descriptor = registry.lookup(args.codec, args.quality)
    level = ConPLevel(args.conp or "none")
    if level is ConPLevel.NONE:
        content = NO_CONTENT
    else:
        if not args.captions:
            raise UsageError(f"--captions is required for ConP level {level.value!r}")
        store = ingest_captions(_existing(args.captions, "caption file"))
        content = store.content_prompt(args.image_id or image_path.stem, level)
    data, stream, _ = pl.encode_image(_read_image(image_path), registry, descriptor, content)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    b = bpp_breakdown(stream)
    print(
        f"{out}: {len(data)} bytes, {b['total']:.4f} bpp "
        f"(visual {b['visual']:.4f}, prompt {b['prompt']:.4f}, header {b['header']:.4f})"
    )
    return EXIT_OK


def cmd_decode(args) -> int:
    data = _existing(args.stream, "container").read_bytes()
    registry = _registry(args)
    _, _, sample = _configs(args)
    if args.steps is not None:
        sample.steps = args.steps
    state = _load_model(_existing(args.checkpoint, "checkpoint")) if not args.basic_only else None
    model = state.model if state else None
    refiner = None if (state is None or args.no_refiner) else state.refiner
    try:
        decoded = pl.decode_stream(data, registry, model, refiner, sample)
    except UnknownCodecError as exc:
        # the container, not the command line, names the codec
        raise ContainerError(f"container codec is not registered: {exc}") from exc
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.stream).stem
    _write_image(out / f"{stem}_x_v.png", decoded.x_v)
    if decoded.x_hat is not None:
        _write_image(out / f"{stem}_x_hat.png", decoded.x_hat)
        _write_image(out / f"{stem}_x_bar.png", decoded.x_bar)
    d = decoded.descriptor
    print(f"decoded {d.name} q={d.quality:g} conp={decoded.content.level.value} into {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg, train_cfg, sample_cfg = _configs(args)
    dataset = pl.Dataset.load(_existing(args.data, "dataset directory"))
    ckpt = Path(args.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    state = pl.run_stage(
        args.stage, ckpt, dataset, model_cfg, train_cfg, sample_cfg, _registry(args),
        checkpoint_every=args.checkpoint_every, stop_at=args.stop_at,
    )
    status = "interrupted" if state.progress else "complete"
    print(f"stage {args.stage} {status}; checkpoint {ckpt}; manifest {tr.manifest_path(ckpt)}")
    return EXIT_OK


def _csv_list(text: str, kind=str) -> list:
    return [kind(p) for p in text.replace(",", " ").split()]


def cmd_eval(args) -> int:
    from .evaluation import rdp_sweep

    _, _, sample = _configs(args)
    if args.steps is not None:
        sample.steps = args.steps
    registry = _registry(args)
    dataset = pl.Dataset.load(_existing(args.data, "test set directory"))
    ids = sorted(dataset.images)
    sizes = {dataset.images[i].shape for i in ids}
    if len(sizes) != 1:
        raise UsageError("test images must share one size")
    images = np.stack([dataset.images[i] for i in ids])
    points = [registry.lookup(args.codec, q) for q in _csv_list(args.qualities, float)]
    levels = [ConPLevel(lv) for lv in _csv_list(args.levels)]
    betas = [float(b) for b in _csv_list(args.betas)]
    compensate = None
    if any(b != 0 for b in betas):
        if not args.checkpoint:
            raise UsageError("--checkpoint is required for beta > 0")
        state = _load_model(_existing(args.checkpoint, "checkpoint"))
        refiner = None if args.no_refiner else state.refiner

        def compensate(x_v, d, prompts):
            out = pl.compensate(
                state.model, refiner, pl.to_tensor(x_v), d, prompts,
                w=sample.w, steps=sample.steps, eta=sample.eta, seed=sample.seed,
            )
            return pl.to_numpy(out)

    result = rdp_sweep(
        images, ids, registry, points, levels, betas, compensate,
        captions=dataset.captions, label=args.label, fid_patch=args.fid_patch, out_dir=args.out_dir,
    )
    print(f"{len(result.summary)} rows, {len(result.records)} records written to {args.out_dir}")
    return EXIT_OK


def cmd_codecs_list(args) -> int:
    registry = _registry(args)
    for d in registry.list_codecs():
        print(
            f"{registry.codec_id(d.name):>3}  {d.name:<20} {d.category.value:<12} "
            f"{d.optimization_metric.value:<8} q={d.quality:g}"
        )
    return EXIT_OK


def cmd_toydata(args) -> int:
    from .toydata import write_toy_set

    out = write_toy_set(args.out_dir, args.n, args.size, args.seed if args.seed is not None else 0)
    print(f"wrote {args.n} images and captions.jsonl to {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file; flags override it")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 42)")
    common.add_argument("--w", type=float, default=None, help="guidance weight (default: per operating point)")
    common.add_argument("--beta", type=float, default=None, help="distortion-perception dial in [0, 1]")
    common.add_argument("--conp", choices=[lv.value for lv in ConPLevel], default=None, help="ConP level")
    common.add_argument("--codec-manifest", help="INI file registering external codecs")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="unimic", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", parents=[common], help="encode one image into a container")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--codec", default="toy-dct")
    p.add_argument("--quality", type=float, required=True)
    p.add_argument("--captions", help="captions.jsonl sidecar")
    p.add_argument("--image-id", help="caption key (default: image file stem)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", parents=[common], help="decode a container into x_v, x_hat and x_bar")
    p.add_argument("stream")
    p.add_argument("--checkpoint")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=int, default=None, help="DDIM steps (default 50)")
    p.add_argument("--no-refiner", action="store_true", help="plain VAE decoding")
    p.add_argument("--basic-only", action="store_true", help="only write the basic-codec image x_v")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", parents=[common], help="run or resume one training stage")
    p.add_argument("--stage", type=int, choices=(0, 1, 2), required=True, help="0 vae+prior, 1 adapter, 2 refiner")
    p.add_argument("--data", required=True, help="directory of PNGs plus captions.jsonl")
    p.add_argument("--checkpoint", required=True, help="checkpoint file (created by stage 0, updated later)")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--stop-at", type=int, default=None, help="save and stop after this many steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="rate-distortion-perception sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--codec", default="toy-dct")
    p.add_argument("--qualities", default="5,20")
    p.add_argument("--levels", default="none")
    p.add_argument("--betas", default="0,1")
    p.add_argument("--label", default="unimic")
    p.add_argument("--fid-patch", type=int, default=256)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--no-refiner", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("codecs", help="codec repository")
    csub = p.add_subparsers(dest="codecs_command", required=True)
    q = csub.add_parser("list", parents=[common], help="list registered operating points")
    q.set_defaults(func=cmd_codecs_list)

    p = sub.add_parser("toydata", parents=[common], help="write a procedural toy dataset")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_toydata)
    return parser


# checked in this order: specific usage errors, data errors, internal errors, then any other ValueError
_USAGE_ERRORS = (UsageError, ConfigError, UnknownCodecError, tr.PrerequisiteError)
_DATA_ERRORS = (
    ContainerError,
    DecodeError,
    PromptDecodeError,
    CaptionNotFound,
    CaptionFormatError,
    CheckpointError,
    ExternalCodecError,
    OSError,
)
_INTERNAL_ERRORS = (FrozenWeightDrift, FloatingPointError, tr.TrainingError, AssertionError, RuntimeError, CodecError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _INTERNAL_ERRORS as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
