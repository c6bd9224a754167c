"""Procedural toy images with prefix-nested captions at three levels.

Each image is a coloured gradient background, optionally striped, with one
to three anti-aliased shapes and mild grain.  Captions describe the scene
from the same parameters: the concise caption names the shapes, moderate
adds sizes and positions, detailed adds background and texture specifics.
Every level starts with the previous one, matching how truncation works.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .codecs.descriptor import from_uint8, to_uint8
from .textual import TEXT_LEVELS, ConPLevel, prefix_words, write_captions

COLORS = {
    "red": (0.85, 0.15, 0.12),
    "green": (0.15, 0.7, 0.2),
    "blue": (0.15, 0.3, 0.85),
    "yellow": (0.95, 0.85, 0.15),
    "purple": (0.55, 0.2, 0.7),
    "orange": (0.95, 0.55, 0.1),
    "white": (0.95, 0.95, 0.95),
    "black": (0.08, 0.08, 0.08),
    "teal": (0.1, 0.6, 0.6),
    "pink": (0.95, 0.5, 0.7),
}
SHAPES = ("circle", "square", "triangle", "ring")
SUPERSAMPLE = 4


def _position_name(cx: float, cy: float) -> str:
    v = "top" if cy < 0.36 else "bottom" if cy > 0.64 else "middle"
    h = "left" if cx < 0.36 else "right" if cx > 0.64 else "center"
    if v == "middle" and h == "center":
        return "center"
    return f"{v} {h}" if v != "middle" else f"middle {h}"


def _shape_mask(kind: str, xx, yy, cx, cy, r, angle) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx**2 + dy**2 <= r**2
    if kind == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "square":
        return (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    # triangle pointing up in the rotated frame
    return (v <= r * 0.7) & (v >= -r) & (np.abs(u) <= (v + r) * 0.6)


def render_scene(rng: np.random.Generator, size: int = 32):
    """Return (image (size, size, 3) float32, captions {level: text})."""
    n = size * SUPERSAMPLE
    yy, xx = np.mgrid[0:n, 0:n] / n
    names = list(COLORS)
    bg_a, bg_b = rng.choice(names, 2, replace=False)
    direction = rng.choice(["left to right", "top to bottom", "diagonal"])
    ramp = {"left to right": xx, "top to bottom": yy, "diagonal": (xx + yy) / 2}[direction]
    img = (1 - ramp)[..., None] * np.array(COLORS[bg_a]) + ramp[..., None] * np.array(COLORS[bg_b])
    stripes = rng.random() < 0.5
    if stripes:
        period = rng.uniform(0.08, 0.2)
        img = img * (0.85 + 0.15 * (np.sin(2 * np.pi * (xx + yy) / period) > 0)[..., None])

    shapes = []
    for _ in range(rng.integers(1, 4)):
        kind = str(rng.choice(SHAPES))
        color = str(rng.choice([c for c in names if c not in (bg_a, bg_b)]))
        r = rng.uniform(0.1, 0.28)
        cx, cy = rng.uniform(r, 1 - r), rng.uniform(r, 1 - r)
        mask = _shape_mask(kind, xx, yy, cx, cy, r, rng.uniform(0, np.pi))
        img[mask] = COLORS[color]
        shapes.append((kind, color, "large" if r > 0.19 else "small", _position_name(cx, cy)))

    img = img.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE, 3).mean(axis=(1, 3))
    grain = rng.uniform(0.0, 0.025)
    img = from_uint8(to_uint8(np.clip(img + rng.normal(0.0, grain, img.shape), 0.0, 1.0)))

    objects = " and ".join(f"a {c} {k}" for k, c, _, _ in shapes)
    concise = f"{objects} on a {bg_a} and {bg_b} background."
    placements = "; ".join(f"the {c} {k} is {s} at the {p}" for k, c, s, p in shapes)
    moderate = f"{concise} {placements[0].upper()}{placements[1:]}."
    texture = "with diagonal stripes" if stripes else "without stripes"
    noise = "fine grain noise" if grain > 0.012 else "a clean smooth finish"
    detailed = (
        f"{moderate} The background fades {direction} from {bg_a} to {bg_b} {texture}, "
        f"the shapes have crisp edges and the picture shows {noise}."
    )
    captions = {}
    for level, text in zip(TEXT_LEVELS, (concise, moderate, detailed)):
        captions[level] = prefix_words(text, level.word_limit)
    return img, captions


def make_toy_set(n: int, size: int = 32, seed: int = 0):
    """Generate ``n`` scenes; returns (ids, images (n, size, size, 3), captions by id)."""
    rng = np.random.default_rng(seed)
    ids, images, captions = [], [], {}
    for i in range(n):
        img, caps = render_scene(rng, size)
        image_id = f"toy{seed:03d}_{i:05d}"
        ids.append(image_id)
        images.append(img)
        captions[image_id] = caps
    return ids, np.stack(images), captions


def write_toy_set(out_dir: str | Path, n: int, size: int = 32, seed: int = 0) -> Path:
    """Write PNGs plus a ``captions.jsonl`` sidecar into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids, images, captions = make_toy_set(n, size, seed)
    for image_id, img in zip(ids, images):
        Image.fromarray(to_uint8(img), mode="RGB").save(out / f"{image_id}.png")
    write_captions(out / "captions.jsonl", captions)
    return out


def level_texts(captions: dict[ConPLevel, str]) -> dict[ConPLevel, str | None]:
    return {ConPLevel.NONE: None, **captions}
