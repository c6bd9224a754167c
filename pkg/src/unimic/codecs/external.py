"""Adapter for codecs driven through external executables.

A manifest is an INI-style text file with one stanza per codec::

    [webp]
    category = traditional
    metric = PSNR
    encode = cwebp -q {quality} {input} -o {output}
    decode = dwebp {input} -o {output}
    qualities = 10, 50, 90

Command templates may use ``{input}``, ``{output}``, ``{quality}`` and
``{python}`` (the running interpreter).  Encoders read a PNG and write the
bitstream; decoders read the bitstream and write a full-resolution RGB PNG.
"""

from __future__ import annotations

import configparser
import io
import shlex
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .descriptor import (
    CodecCategory,
    CodecDescriptor,
    CodecError,
    DecodeError,
    ExternalCodecError,
    OptimizationMetric,
    as_image,
    from_uint8,
    to_uint8,
)
from .registry import BasicCodec, CodecRegistry


def png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def read_png_bytes(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


@dataclass(frozen=True)
class ExternalCodecSpec:
    name: str
    category: CodecCategory
    metric: OptimizationMetric
    encode_cmd: str
    decode_cmd: str
    qualities: tuple[float, ...]
    timeout: float = 120.0


class ExternalCodec(BasicCodec):
    def __init__(self, spec: ExternalCodecSpec):
        self.spec = spec

    def _run(self, template: str, input_path: Path, output_path: Path, quality: float) -> None:
        cmd = template.format(
            input=shlex.quote(str(input_path)),
            output=shlex.quote(str(output_path)),
            quality=f"{quality:g}",
            python=shlex.quote(sys.executable),
        )
        try:
            proc = subprocess.run(
                shlex.split(cmd), capture_output=True, text=True, timeout=self.spec.timeout
            )
        except FileNotFoundError as exc:
            raise ExternalCodecError(f"{self.spec.name}: executable not found", None, str(exc)) from exc
        except subprocess.TimeoutExpired as exc:
            raise ExternalCodecError(f"{self.spec.name}: timed out", None, str(exc)) from exc
        if proc.returncode != 0:
            raise ExternalCodecError(f"{self.spec.name}: command failed: {cmd}", proc.returncode, proc.stderr)
        if not output_path.exists():
            raise ExternalCodecError(f"{self.spec.name}: command produced no output file", 0, proc.stderr)

    def encode(self, image: np.ndarray, quality: float) -> bytes:
        image = as_image(image)
        with tempfile.TemporaryDirectory(prefix="unimic-ext-") as tmp:
            src, dst = Path(tmp) / "input.png", Path(tmp) / "stream.bin"
            src.write_bytes(png_bytes(image))
            self._run(self.spec.encode_cmd, src, dst, quality)
            return dst.read_bytes()

    def decode(self, data: bytes, quality: float) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="unimic-ext-") as tmp:
            src, dst = Path(tmp) / "stream.bin", Path(tmp) / "decoded.png"
            src.write_bytes(data)
            try:
                self._run(self.spec.decode_cmd, src, dst, quality)
            except ExternalCodecError as exc:
                raise DecodeError(str(exc)) from exc
            try:
                return read_png_bytes(dst.read_bytes())
            except OSError as exc:
                raise DecodeError(f"{self.spec.name}: decoder wrote an unreadable PNG") from exc


def parse_manifest(text: str) -> list[ExternalCodecSpec]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise CodecError(f"malformed codec manifest: {exc}") from exc
    specs = []
    for name in parser.sections():
        sec = parser[name]
        try:
            qualities = tuple(float(q) for q in sec["qualities"].replace(",", " ").split())
            spec = ExternalCodecSpec(
                name=name,
                category=CodecCategory(sec.get("category", "traditional")),
                metric=OptimizationMetric(sec.get("metric", "PSNR")),
                encode_cmd=sec["encode"],
                decode_cmd=sec["decode"],
                qualities=qualities,
                timeout=sec.getfloat("timeout", 120.0),
            )
        except (KeyError, ValueError) as exc:
            raise CodecError(f"manifest stanza [{name}] is invalid: {exc}") from exc
        if not spec.qualities:
            raise CodecError(f"manifest stanza [{name}] lists no qualities")
        specs.append(spec)
    return specs


def register_manifest(registry: CodecRegistry, path: str | Path) -> list[CodecDescriptor]:
    """Register every operating point listed in a manifest file."""
    descriptors = []
    for spec in parse_manifest(Path(path).read_text(encoding="utf-8")):
        impl = ExternalCodec(spec)
        for q in spec.qualities:
            d = CodecDescriptor(spec.category, spec.name, spec.metric, q)
            registry.register(d, impl)
            descriptors.append(d)
    return descriptors
