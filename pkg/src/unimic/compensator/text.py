"""Text embedder port and the default hashed-token transformer encoder."""

from __future__ import annotations

import re
import zlib

import torch
import torch.nn as nn

_TOKEN = re.compile(r"[a-z0-9][a-z0-9.\-+]*|[^\sa-z0-9|:]")


def tokenize(text: str, vocab: int, max_tokens: int) -> list[int]:
    """Lowercased words (and stray punctuation) hashed into ``vocab`` buckets.

    ``|`` and ``:`` only delimit fields, so a compression prompt becomes its
    keys and values.
    """
    words = _TOKEN.findall(text.lower())[:max_tokens]
    return [zlib.crc32(w.encode("utf-8")) % vocab for w in words]


class TextEmbedder(nn.Module):
    """Port: maps strings to token-embedding sequences of width ``dim``.

    ``forward`` returns (embeddings (B, L, dim), mask (B, L)) with ``mask``
    True on real tokens.
    """

    dim: int

    def forward(self, texts: list[str]):
        raise NotImplementedError


class HashedTransformerEmbedder(TextEmbedder):
    def __init__(self, dim: int = 256, vocab: int = 4096, layers: int = 2, heads: int = 4, max_tokens: int = 96):
        super().__init__()
        self.dim, self.vocab, self.max_tokens = dim, vocab, max_tokens
        self.tokens = nn.Embedding(vocab, dim)
        self.positions = nn.Parameter(torch.randn(max_tokens, dim) * 0.02)
        nn.init.normal_(self.tokens.weight, std=0.02)
        layer = nn.TransformerEncoderLayer(
            dim, heads, dim_feedforward=2 * dim, dropout=0.0, activation="gelu",
            batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.final_norm = nn.LayerNorm(dim)

    def forward(self, texts: list[str]):
        ids = [tokenize(t, self.vocab, self.max_tokens) or [0] for t in texts]
        length = max(len(i) for i in ids)
        device = self.positions.device
        padded = torch.zeros(len(ids), length, dtype=torch.long, device=device)
        mask = torch.zeros(len(ids), length, dtype=torch.bool, device=device)
        for row, seq in enumerate(ids):
            padded[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
            mask[row, : len(seq)] = True
        h = self.tokens(padded) + self.positions[:length]
        h = self.encoder(h, src_key_padding_mask=~mask)
        return self.final_norm(h), mask
