"""Multi-grained textual coding.

Content prompts (ConP) are captions at one of three lengths, coded
losslessly with zlib.  Compression prompts (ComP) render the basic codec's
syntax as a canonical string that the decoder can rebuild from the container
header, so they cost no extra bytes.
"""

from __future__ import annotations

import enum
import json
import re
import struct
import warnings
import zlib
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

from .codecs.descriptor import CodecCategory, CodecDescriptor, OptimizationMetric


class ConPLevel(str, enum.Enum):
    NONE = "none"
    CONCISE = "concise"
    MODERATE = "moderate"
    DETAILED = "detailed"

    @property
    def code(self) -> int:
        return _LEVEL_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "ConPLevel":
        for level, c in _LEVEL_CODES.items():
            if c == code:
                return level
        raise ValueError(f"unknown ConP level code {code}")

    @property
    def word_limit(self) -> int:
        return WORD_LIMITS[self]


_LEVEL_CODES = {ConPLevel.NONE: 0, ConPLevel.CONCISE: 1, ConPLevel.MODERATE: 2, ConPLevel.DETAILED: 3}
WORD_LIMITS = {ConPLevel.NONE: 0, ConPLevel.CONCISE: 16, ConPLevel.MODERATE: 36, ConPLevel.DETAILED: 75}
TEXT_LEVELS = (ConPLevel.CONCISE, ConPLevel.MODERATE, ConPLevel.DETAILED)


class PromptDecodeError(ValueError):
    pass


class CaptionNotFound(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class CaptionFormatError(ValueError):
    pass


class CaptionTruncatedWarning(UserWarning):
    pass


def word_count(text: str) -> int:
    return len(text.split())


def prefix_words(text: str, n: int) -> str:
    """The original text up to the end of its n-th whitespace-delimited word."""
    matches = list(re.finditer(r"\S+", text))
    if len(matches) <= n:
        return text
    return text[: matches[n - 1].end()].strip()


@dataclass(frozen=True)
class ContentPrompt:
    level: ConPLevel
    text: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "level", ConPLevel(self.level))
        if self.level is ConPLevel.NONE:
            if self.text:
                raise ValueError("level 'none' carries no text")
        elif not self.text.strip():
            raise ValueError(f"level {self.level.value!r} needs non-empty text")
        elif word_count(self.text) > self.word_limit:
            raise ValueError(
                f"{word_count(self.text)} words exceed the {self.level.value} limit of {self.word_limit}"
            )

    @property
    def word_limit(self) -> int:
        return self.level.word_limit


NO_CONTENT = ContentPrompt(ConPLevel.NONE, "")


def truncate_to_level(caption: str, level: ConPLevel | str) -> ContentPrompt:
    """Keep at most the level's word limit, cutting at a word boundary."""
    level = ConPLevel(level)
    if level is ConPLevel.NONE:
        raise ValueError("use NO_CONTENT for level 'none'")
    if not caption.strip():
        raise ValueError("empty caption; use level 'none' instead")
    return ContentPrompt(level, prefix_words(caption, level.word_limit))


@dataclass(frozen=True)
class PromptBytes:
    """zlib-coded prompt text.  On the wire: raw length (u16 BE) then the stream."""

    compressed: bytes
    raw_byte_count: int

    @property
    def compressed_byte_count(self) -> int:
        return len(self.compressed)

    def to_wire(self) -> bytes:
        return struct.pack(">H", self.raw_byte_count) + self.compressed

    @classmethod
    def from_wire(cls, data: bytes) -> "PromptBytes":
        if len(data) < 2:
            raise PromptDecodeError("prompt section shorter than its length prefix")
        (raw,) = struct.unpack_from(">H", data)
        return cls(bytes(data[2:]), raw)


def compress_prompt(text: str) -> PromptBytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("prompt text longer than 65535 bytes")
    return PromptBytes(zlib.compress(raw, 9), len(raw))


def decompress_prompt(pb: PromptBytes) -> str:
    try:
        d = zlib.decompressobj()
        raw = d.decompress(pb.compressed, pb.raw_byte_count + 1)
        if not d.eof or d.unconsumed_tail or d.unused_data:
            raise PromptDecodeError("prompt stream is truncated or has trailing data")
    except zlib.error as exc:
        raise PromptDecodeError(f"malformed prompt stream: {exc}") from exc
    if len(raw) != pb.raw_byte_count:
        raise PromptDecodeError(f"prompt decoded to {len(raw)} bytes, header says {pb.raw_byte_count}")
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise PromptDecodeError("prompt is not valid UTF-8") from exc


def format_quality(q: float) -> str:
    return f"{float(q):.6g}"


@dataclass(frozen=True)
class CompressionPrompt:
    text: str
    source: CodecDescriptor
    conp_level: ConPLevel


def render_compression_prompt(d: CodecDescriptor, conp_level: ConPLevel | str) -> CompressionPrompt:
    level = ConPLevel(conp_level)
    text = (
        f"category:{d.category.value}|codec:{d.name}|metric:{d.optimization_metric.value}"
        f"|quality:{format_quality(d.quality)}|conp:{level.value}"
    )
    return CompressionPrompt(text, d, level)


_COMP_KEYS = ("category", "codec", "metric", "quality", "conp")


def parse_compression_prompt(text: str) -> tuple[CodecDescriptor, ConPLevel]:
    fields = text.split("|")
    if len(fields) != len(_COMP_KEYS):
        raise ValueError(f"compression prompt must have {len(_COMP_KEYS)} fields: {text!r}")
    values = {}
    for key, field in zip(_COMP_KEYS, fields):
        k, sep, v = field.partition(":")
        if k != key or not sep:
            raise ValueError(f"expected field {key!r} in compression prompt, got {field!r}")
        values[key] = v
    d = CodecDescriptor(
        CodecCategory(values["category"]),
        values["codec"],
        OptimizationMetric(values["metric"]),
        float(values["quality"]),
    )
    return d, ConPLevel(values["conp"])


class CaptionStore(Mapping):
    """Read-only map image-id -> {level: caption} for the three text levels."""

    def __init__(self, entries: Mapping[str, Mapping[ConPLevel, str]]):
        self._entries = {k: dict(v) for k, v in entries.items()}

    def __getitem__(self, image_id: str) -> dict[ConPLevel, str]:
        try:
            return dict(self._entries[image_id])
        except KeyError:
            raise CaptionNotFound(f"no captions for image {image_id!r}") from None

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def content_prompt(self, image_id: str, level: ConPLevel | str) -> ContentPrompt:
        level = ConPLevel(level)
        if level is ConPLevel.NONE:
            return NO_CONTENT
        return ContentPrompt(level, self[image_id][level])


def _validated(image_id: str, level: ConPLevel, text) -> str:
    if not isinstance(text, str) or not text.strip():
        raise CaptionFormatError(f"{image_id}: missing or empty {level.value} caption")
    if word_count(text) > level.word_limit:
        warnings.warn(
            f"{image_id}: {level.value} caption has {word_count(text)} words, truncating to {level.word_limit}",
            CaptionTruncatedWarning,
            stacklevel=3,
        )
        return prefix_words(text, level.word_limit)
    return text


def parse_captions(text: str) -> CaptionStore:
    """Parse a JSON-lines sidecar with fields image_id, concise, moderate, detailed."""
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CaptionFormatError(f"line {lineno}: not valid JSON ({exc})") from exc
        if not isinstance(record, dict) or not isinstance(record.get("image_id"), str):
            raise CaptionFormatError(f"line {lineno}: record needs a string image_id")
        image_id = record["image_id"]
        if image_id in entries:
            raise CaptionFormatError(f"line {lineno}: duplicate image_id {image_id!r}")
        entries[image_id] = {lvl: _validated(image_id, lvl, record.get(lvl.value)) for lvl in TEXT_LEVELS}
    return CaptionStore(entries)


def ingest_captions(path: str | Path) -> CaptionStore:
    return parse_captions(Path(path).read_text(encoding="utf-8"))


def write_captions(path: str | Path, captions: Mapping[str, Mapping[ConPLevel, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in sorted(captions):
            record = {"image_id": image_id}
            record.update({lvl.value: captions[image_id][lvl] for lvl in TEXT_LEVELS})
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
