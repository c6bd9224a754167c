"""The UniMIC bitstream container.

Byte layout (all integers big-endian)::

    offset size field
    0      4    magic "UMIC"
    4      1    version (1)
    5      2    codec_id       registry index of the basic codec name
    7      4    quality_code   quality indicator x 10^4, unsigned
    11     1    conp_level     0 none, 1 concise, 2 moderate, 3 detailed
    12     2    image_height
    14     2    image_width
    16     4    visual_length
    20     ...  visual payload (visual_length bytes)
    ...    ...  prompt section: raw length u16 + zlib stream (absent at level none)

The prompt section runs to the end of the stream, so its length is implied
by the total size; the header stays at 20 bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .codecs.descriptor import CodecDescriptor, VisualPayload
from .codecs.registry import CodecRegistry
from .textual import ConPLevel, ContentPrompt, PromptBytes, compress_prompt

MAGIC = b"UMIC"
VERSION = 1
HEADER_SIZE = 20
QUALITY_SCALE = 10_000
_HEADER = struct.Struct(">4sBHIBHHI")
assert _HEADER.size == HEADER_SIZE


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedStreamError(ContainerError):
    pass


class LengthMismatchError(ContainerError):
    pass


def encode_quality(quality: float) -> int:
    code = round(float(quality) * QUALITY_SCALE)
    if not 0 <= code <= 0xFFFFFFFF:
        raise ValueError(f"quality {quality} does not fit the 32-bit fixed-point field")
    return code


@dataclass(frozen=True)
class ContainerHeader:
    codec_id: int
    quality_code: int
    conp_level: ConPLevel
    height: int
    width: int
    visual_length: int
    prompt_length: int
    version: int = VERSION

    @property
    def quality(self) -> float:
        return self.quality_code / QUALITY_SCALE


@dataclass(frozen=True)
class UniMICStream:
    header: ContainerHeader
    visual: VisualPayload
    prompt: PromptBytes | None = None

    @property
    def total_bytes(self) -> int:
        return HEADER_SIZE + self.header.visual_length + self.header.prompt_length


def _check(stream: UniMICStream) -> None:
    h = stream.header
    if h.visual_length != stream.visual.byte_count:
        raise LengthMismatchError(
            f"visual_length {h.visual_length} != payload size {stream.visual.byte_count}"
        )
    prompt_len = len(stream.prompt.to_wire()) if stream.prompt is not None else 0
    if h.prompt_length != prompt_len:
        raise LengthMismatchError(f"prompt_length {h.prompt_length} != prompt section size {prompt_len}")
    if (stream.prompt is None) != (h.conp_level is ConPLevel.NONE):
        raise LengthMismatchError("a prompt section is present iff conp_level is not 'none'")
    if not (0 <= h.codec_id <= 0xFFFF and 0 <= h.height <= 0xFFFF and 0 <= h.width <= 0xFFFF):
        raise ValueError("header field out of range")
    if not 0 <= h.visual_length <= 0xFFFFFFFF or not 0 <= h.quality_code <= 0xFFFFFFFF:
        raise ValueError("header field out of range")


def pack(stream: UniMICStream) -> bytes:
    _check(stream)
    h = stream.header
    head = _HEADER.pack(
        MAGIC, h.version, h.codec_id, h.quality_code, h.conp_level.code, h.height, h.width, h.visual_length
    )
    prompt = stream.prompt.to_wire() if stream.prompt is not None else b""
    return head + stream.visual.data + prompt


def unpack(data: bytes) -> UniMICStream:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a UniMIC stream (bad magic)")
    if len(data) < HEADER_SIZE:
        raise TruncatedStreamError(f"stream is {len(data)} bytes, shorter than the {HEADER_SIZE}-byte header")
    _, version, codec_id, qcode, level_code, height, width, vlen = _HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    try:
        level = ConPLevel.from_code(level_code)
    except ValueError as exc:
        raise ContainerError(str(exc)) from None
    end = HEADER_SIZE + vlen
    if len(data) < end:
        raise TruncatedStreamError(f"visual section truncated: need {vlen} bytes, have {len(data) - HEADER_SIZE}")
    visual = VisualPayload(bytes(data[HEADER_SIZE:end]))
    rest = bytes(data[end:])
    if level is ConPLevel.NONE:
        if rest:
            raise ContainerError(f"{len(rest)} trailing bytes after a stream without prompt")
        prompt = None
    else:
        if len(rest) < 3:
            raise TruncatedStreamError("prompt section missing or truncated")
        prompt = PromptBytes.from_wire(rest)
    header = ContainerHeader(codec_id, qcode, level, height, width, vlen, len(rest), version)
    return UniMICStream(header, visual, prompt)


def build_stream(
    registry: CodecRegistry,
    descriptor: CodecDescriptor,
    visual: VisualPayload,
    content: ContentPrompt,
    height: int,
    width: int,
) -> UniMICStream:
    prompt = compress_prompt(content.text) if content.level is not ConPLevel.NONE else None
    header = ContainerHeader(
        codec_id=registry.codec_id(descriptor.name),
        quality_code=encode_quality(descriptor.quality),
        conp_level=content.level,
        height=height,
        width=width,
        visual_length=visual.byte_count,
        prompt_length=len(prompt.to_wire()) if prompt is not None else 0,
    )
    return UniMICStream(header, visual, prompt)


def resolve_descriptor(registry: CodecRegistry, header: ContainerHeader) -> CodecDescriptor:
    return registry.lookup(registry.name_for_id(header.codec_id), header.quality)


def compute_bpp(stream: UniMICStream) -> float:
    h = stream.header
    pixels = h.height * h.width
    if pixels == 0:
        raise ValueError("zero-area image")
    return 8.0 * (HEADER_SIZE + h.visual_length + h.prompt_length) / pixels


def bpp_breakdown(stream: UniMICStream) -> dict[str, float]:
    h = stream.header
    pixels = h.height * h.width
    if pixels == 0:
        raise ValueError("zero-area image")
    return {
        "header": 8.0 * HEADER_SIZE / pixels,
        "visual": 8.0 * h.visual_length / pixels,
        "prompt": 8.0 * h.prompt_length / pixels,
        "total": compute_bpp(stream),
    }
