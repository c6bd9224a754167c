"""The visual codec repository.

Every basic codec is reached through one interface: ``encode`` returns the
bitstream for an image at a given quality and ``decode`` turns a bitstream
back into pixels.  The registry maps ``(name, quality)`` operating points to
those implementations and hands out stable numeric ids for the container
header.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .descriptor import (
    CodecDescriptor,
    DuplicateCodecError,
    UnknownCodecError,
    VisualPayload,
    as_image,
)


class BasicCodec(ABC):
    """Port implemented by every codec in the repository."""

    @abstractmethod
    def encode(self, image: np.ndarray, quality: float) -> bytes:
        ...

    @abstractmethod
    def decode(self, data: bytes, quality: float) -> np.ndarray:
        ...


@dataclass(frozen=True)
class RegistryHandle:
    codec_id: int
    descriptor: CodecDescriptor


class CodecRegistry:
    def __init__(self) -> None:
        self._points: dict[tuple[str, float], tuple[CodecDescriptor, BasicCodec]] = {}
        self._names: list[str] = []

    def register(self, descriptor: CodecDescriptor, impl: BasicCodec) -> RegistryHandle:
        if descriptor.key in self._points:
            raise DuplicateCodecError(
                f"codec {descriptor.name!r} at quality {descriptor.quality:g} is already registered"
            )
        for other, _ in self._points.values():
            if other.name == descriptor.name and (
                other.category != descriptor.category
                or other.optimization_metric != descriptor.optimization_metric
            ):
                raise DuplicateCodecError(
                    f"codec {descriptor.name!r} already registered with a different category/metric"
                )
        self._points[descriptor.key] = (descriptor, impl)
        if descriptor.name not in self._names:
            if len(self._names) >= 0xFFFF:
                raise OverflowError("codec id space exhausted")
            self._names.append(descriptor.name)
        return RegistryHandle(self.codec_id(descriptor.name), descriptor)

    def list_codecs(self) -> list[CodecDescriptor]:
        return sorted(
            (d for d, _ in self._points.values()),
            key=lambda d: (self._names.index(d.name), d.quality),
        )

    def __contains__(self, descriptor: CodecDescriptor) -> bool:
        return descriptor.key in self._points and self._points[descriptor.key][0] == descriptor

    def __len__(self) -> int:
        return len(self._points)

    def codec_id(self, name: str) -> int:
        try:
            return self._names.index(name)
        except ValueError:
            raise UnknownCodecError(f"codec {name!r} is not registered") from None

    def name_for_id(self, codec_id: int) -> str:
        if not 0 <= codec_id < len(self._names):
            raise UnknownCodecError(f"no codec registered under id {codec_id}")
        return self._names[codec_id]

    def lookup(self, name: str, quality: float) -> CodecDescriptor:
        try:
            return self._points[(name, float(quality))][0]
        except KeyError:
            raise UnknownCodecError(f"codec {name!r} at quality {quality:g} is not registered") from None

    def _impl(self, descriptor: CodecDescriptor) -> BasicCodec:
        entry = self._points.get(descriptor.key)
        if entry is None or entry[0] != descriptor:
            raise UnknownCodecError(f"codec point {descriptor} is not registered")
        return entry[1]

    def encode_visual(self, image: np.ndarray, descriptor: CodecDescriptor) -> tuple[VisualPayload, np.ndarray]:
        """Encode ``image`` and return the payload with the decoded image x_v."""
        image = as_image(image)
        impl = self._impl(descriptor)
        payload = VisualPayload(impl.encode(image, descriptor.quality))
        decoded = impl.decode(payload.data, descriptor.quality)
        if decoded.shape != image.shape:
            raise RuntimeError(f"codec {descriptor.name} changed the image shape {image.shape} -> {decoded.shape}")
        return payload, decoded

    def decode_visual(self, payload: VisualPayload, descriptor: CodecDescriptor) -> np.ndarray:
        return self._impl(descriptor).decode(payload.data, descriptor.quality)
