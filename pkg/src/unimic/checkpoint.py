"""Versioned binary checkpoint container.

Layout::

    magic (5 bytes) | header_len:u32 BE | header (UTF-8 JSON) | tensor data

The header holds free-form metadata, a table of named sections (each a list
of tensors with dtype, shape and byte offset into the data area) and the
SHA-256 of the canonical metadata plus data.  Serialization is canonical, so
save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.float16: "float16",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_FROM_NAME = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


class CheckpointHashError(CheckpointError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def dumps(magic: bytes, meta: Mapping, sections: Mapping[str, Mapping[str, torch.Tensor]]) -> bytes:
    table = {}
    chunks = []
    offset = 0
    for sec_name in sorted(sections):
        entries = []
        for name in sorted(sections[sec_name]):
            t = sections[sec_name][name].detach().cpu().contiguous()
            if t.dtype not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {t.dtype} for {sec_name}/{name}")
            raw = t.numpy().tobytes() if t.dtype != torch.bool else t.to(torch.uint8).numpy().tobytes()
            entries.append([name, _DTYPES[t.dtype], list(t.shape), offset, len(raw)])
            chunks.append(raw)
            offset += len(raw)
        table[sec_name] = entries
    data = b"".join(chunks)
    body = {"format_version": FORMAT_VERSION, "meta": dict(meta), "sections": table}
    digest = hashlib.sha256(_canonical(body) + data).hexdigest()
    header = _canonical({**body, "sha256": digest})
    return magic + struct.pack(">I", len(header)) + header + data


def loads(magic: bytes, blob: bytes) -> tuple[dict, dict[str, dict[str, torch.Tensor]]]:
    if not blob.startswith(magic):
        raise CheckpointError(f"not a {magic.decode()} checkpoint (bad magic)")
    pos = len(magic)
    if len(blob) < pos + 4:
        raise CheckpointError("checkpoint truncated")
    (hlen,) = struct.unpack_from(">I", blob, pos)
    pos += 4
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointHashError(f"checkpoint header is corrupt: {exc}") from exc
    data = blob[pos + hlen:]
    digest = header.pop("sha256", None)
    if hashlib.sha256(_canonical(header) + data).hexdigest() != digest:
        raise CheckpointHashError("checkpoint hash mismatch: file was modified or truncated")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {header.get('format_version')}")
    sections: dict[str, dict[str, torch.Tensor]] = {}
    for sec_name, entries in header["sections"].items():
        out = {}
        for name, dtype, shape, offset, nbytes in entries:
            raw = data[offset:offset + nbytes]
            if dtype == "bool":
                arr = np.frombuffer(raw, dtype=np.uint8).astype(bool)
            else:
                arr = np.frombuffer(raw, dtype=np.dtype(dtype))
            out[name] = torch.from_numpy(arr.copy().reshape(shape)).to(_FROM_NAME[dtype])
        sections[sec_name] = out
    return header["meta"], sections


def save(path: str | Path, magic: bytes, meta: Mapping, sections: Mapping[str, Mapping[str, torch.Tensor]]) -> bytes:
    blob = dumps(magic, meta, sections)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return blob


def load(path: str | Path, magic: bytes) -> tuple[dict, dict[str, dict[str, torch.Tensor]]]:
    return loads(magic, Path(path).read_bytes())


def tensor_digest(tensors: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over named tensors, for frozen-weight checks."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
