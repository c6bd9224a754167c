"""Toy JPEG-like codec: 8x8 block DCT, QF-scaled quantization, zigzag + DEFLATE.

Bitstream layout (big-endian)::

    b"TDCT" | version:u8 | height:u16 | width:u16 | qf:u8 | crc32:u32 | body

``body`` is a zlib stream of int16 coefficients grouped by zigzag index so
that runs of zeros from all blocks sit next to each other.  The CRC covers
the header fields and body; any corruption raises ``DecodeError``.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np
from scipy.fft import dctn, idctn

from .descriptor import DecodeError, as_image, from_uint8, reflect_pad, to_uint8
from .registry import BasicCodec

MAGIC = b"TDCT"
VERSION = 1
BLOCK = 8
_HEADER = struct.Struct(">4sBHHBI")

# Annex K tables of the JPEG standard.
LUMA_TABLE = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.float64).reshape(8, 8)

CHROMA_TABLE = np.array([
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
], dtype=np.float64).reshape(8, 8)


def _zigzag_order(n: int = BLOCK) -> np.ndarray:
    coords = sorted(
        ((i, j) for i in range(n) for j in range(n)),
        key=lambda p: (p[0] + p[1], p[1] if (p[0] + p[1]) % 2 == 0 else p[0]),
    )
    return np.array([i * n + j for i, j in coords])


ZIGZAG = _zigzag_order()


def quant_tables(qf: int) -> tuple[np.ndarray, np.ndarray]:
    """IJG quality scaling of the base tables."""
    scale = 5000.0 / qf if qf < 50 else 200.0 - 2.0 * qf
    tables = []
    for base in (LUMA_TABLE, CHROMA_TABLE):
        q = np.floor((base * scale + 50.0) / 100.0)
        tables.append(np.clip(q, 1, 255))
    return tables[0], tables[1]


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128.0, ycc[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _to_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3)


def _from_blocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * BLOCK, bw * BLOCK)


class ToyDCTCodec(BasicCodec):
    """Quality indicator is the JPEG quality factor, an integer in [1, 100]."""

    @staticmethod
    def _qf(quality: float) -> int:
        qf = int(round(quality))
        if qf != quality or not 1 <= qf <= 100:
            raise ValueError(f"toy-dct quality factor must be an integer in [1, 100], got {quality}")
        return qf

    def encode(self, image: np.ndarray, quality: float) -> bytes:
        qf = self._qf(quality)
        image = as_image(image)
        h, w = image.shape[:2]
        if h > 0xFFFF or w > 0xFFFF:
            raise ValueError("image too large for toy-dct")
        padded = reflect_pad(to_uint8(image).astype(np.float64), BLOCK)
        ycc = rgb_to_ycbcr(padded) - 128.0
        tables = quant_tables(qf)
        planes = []
        for c in range(3):
            blocks = _to_blocks(ycc[..., c])
            coeffs = dctn(blocks, axes=(-2, -1), norm="ortho")
            q = np.round(coeffs / (tables[0] if c == 0 else tables[1]))
            q = q.reshape(-1, BLOCK * BLOCK)[:, ZIGZAG]
            # DPCM on DC like baseline JPEG
            q[1:, 0] = np.diff(q[:, 0])
            planes.append(q.T)  # group coefficients by zigzag index
        symbols = np.clip(np.concatenate(planes, axis=0), -32768, 32767).astype(">i2")
        body = zlib.compress(symbols.tobytes(), 9)
        header_fields = (MAGIC, VERSION, h, w, qf)
        crc = zlib.crc32(struct.pack(">4sBHHB", *header_fields) + body)
        return _HEADER.pack(*header_fields, crc) + body

    def decode(self, data: bytes, quality: float) -> np.ndarray:
        if len(data) < _HEADER.size:
            raise DecodeError("toy-dct payload truncated before end of header")
        magic, version, h, w, qf, crc = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise DecodeError("not a toy-dct payload (bad magic)")
        if version != VERSION:
            raise DecodeError(f"unsupported toy-dct version {version}")
        body = data[_HEADER.size:]
        if zlib.crc32(data[: _HEADER.size - 4] + body) != crc:
            raise DecodeError("toy-dct payload failed CRC check (corrupt or truncated)")
        if qf != self._qf(quality):
            raise DecodeError(f"payload was coded at QF={qf}, descriptor says {quality:g}")
        if h == 0 or w == 0:
            raise DecodeError("toy-dct payload has zero image area")
        ph, pw = -(-h // BLOCK) * BLOCK, -(-w // BLOCK) * BLOCK
        nblocks = (ph // BLOCK) * (pw // BLOCK)
        try:
            raw = zlib.decompress(body)
        except zlib.error as exc:
            raise DecodeError(f"toy-dct body is not a valid zlib stream: {exc}") from exc
        expected = 3 * nblocks * BLOCK * BLOCK * 2
        if len(raw) != expected:
            raise DecodeError(f"toy-dct body holds {len(raw)} bytes, expected {expected}")
        symbols = np.frombuffer(raw, dtype=">i2").astype(np.float64).reshape(3 * BLOCK * BLOCK, nblocks)
        tables = quant_tables(qf)
        inverse = np.argsort(ZIGZAG)
        ycc = np.empty((ph, pw, 3))
        for c in range(3):
            q = symbols[c * 64:(c + 1) * 64].T.copy()
            q[:, 0] = np.cumsum(q[:, 0])
            q = q[:, inverse].reshape(ph // BLOCK, pw // BLOCK, BLOCK, BLOCK)
            coeffs = q * (tables[0] if c == 0 else tables[1])
            ycc[..., c] = _from_blocks(idctn(coeffs, axes=(-2, -1), norm="ortho"))
        rgb = ycbcr_to_rgb(ycc + 128.0)[:h, :w]
        return from_uint8(np.clip(np.round(rgb), 0, 255).astype(np.uint8))
