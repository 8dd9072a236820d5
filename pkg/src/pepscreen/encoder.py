"""Frozen per-residue embedders.

The synthetic embedder is a stand-in for a pretrained protein language
model: a seeded token table plus a sinusoidal position signal, passed through
a fixed seeded linear map. It mixes nothing across positions, so changing one
residue changes exactly one output row. Outputs are rounded to float32
precision so they survive the float32 container unchanged.

Imported embeddings are read from a matrix container keyed by record id.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .sequences import INPUT_VOCAB, SequenceRecord, pad_tokens
from .storage import Container, MissingEntryError, read_container, write_container


class UnknownTokenError(ValueError):
    pass


@dataclass
class ResidueEmbedding:
    matrix: np.ndarray  # (length, d_embed); zero rows where mask is False
    mask: np.ndarray
    encoder_id: str


def sinusoid(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class SyntheticEmbedder:
    def __init__(self, d_embed: int = 64, seed: int = 0, max_len: int = 1024, position_scale: float = 0.1):
        self.d_embed = d_embed
        self.seed = seed
        rng = np.random.default_rng([seed, 0xE5])
        table = rng.standard_normal((INPUT_VOCAB, d_embed))
        table[0] = 0.0
        self._table = table
        self._pos = position_scale * sinusoid(max_len, d_embed)
        self._mix = rng.standard_normal((d_embed, d_embed)) / np.sqrt(d_embed)
        self.encoder_id = f"synthetic-v1:d{d_embed}:seed{seed}"

    def parameter_bytes(self) -> bytes:
        return self._table.tobytes() + self._pos.tobytes() + self._mix.tobytes()

    def embed_tokens(self, tokens: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """(..., L) tokens -> (..., L, d_embed)."""
        tokens = np.asarray(tokens)
        mask = np.asarray(mask, dtype=bool)
        if tokens.shape != mask.shape:
            raise ValueError(f"tokens {tokens.shape} and mask {mask.shape} differ in shape")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= INPUT_VOCAB):
            bad = tokens[(tokens < 0) | (tokens >= INPUT_VOCAB)]
            raise UnknownTokenError(f"token ids outside the input vocabulary: {sorted(set(bad.tolist()))[:5]}")
        length = tokens.shape[-1]
        if length > self._pos.shape[0]:
            raise ValueError(f"sequence length {length} exceeds embedder max_len {self._pos.shape[0]}")
        x = (self._table[tokens] + self._pos[:length]) @ self._mix
        x = np.where(mask[..., None], x, 0.0)
        return x.astype(np.float32).astype(np.float64)

    def embed(self, tokens: np.ndarray, mask: np.ndarray) -> ResidueEmbedding:
        return ResidueEmbedding(self.embed_tokens(tokens, mask), np.asarray(mask, dtype=bool), self.encoder_id)

    def embed_record(self, record: SequenceRecord, length: int, truncate: str = "right") -> ResidueEmbedding:
        tokens, mask = pad_tokens(record.residues, length, truncate)
        return self.embed(tokens, mask)


class ImportedEmbeddings:
    """Per-record matrices from a container; rows must equal raw sequence length."""

    def __init__(self, container: Container, encoder_id: str):
        self.container = container
        self.encoder_id = encoder_id
        first = next(iter(container.matrices.values()), None)
        self.d_embed = None if first is None else first.shape[1]

    def embed_record(self, record: SequenceRecord, length: int, truncate: str = "right") -> ResidueEmbedding:
        full = self.container[record.id]
        if full.shape[0] != len(record):
            raise ValueError(f"embedding for {record.id!r} has {full.shape[0]} rows, sequence has {len(record)}")
        kept = full[:length] if truncate == "right" else full[-length:]
        mat = np.zeros((length, full.shape[1]))
        mat[:len(kept)] = kept
        mask = np.zeros(length, dtype=bool)
        mask[:len(kept)] = True
        return ResidueEmbedding(mat, mask, self.encoder_id)


def export_embeddings(path: str | os.PathLike, records: list[SequenceRecord], embedder: SyntheticEmbedder):
    """Write unpadded per-record embeddings in container format."""
    mats = {}
    for rec in records:
        emb = embedder.embed_record(rec, len(rec))
        mats[rec.id] = emb.matrix
    return write_container(path, mats, {"encoder_id": embedder.encoder_id, "d_embed": embedder.d_embed})


def import_embeddings(path: str | os.PathLike, d_embed: int | None = None,
                      records: list[SequenceRecord] | None = None,
                      encoder_id: str | None = None) -> ImportedEmbeddings:
    rows = None if records is None else {r.id: len(r) for r in records}
    cont = read_container(path, cols=d_embed, rows=rows)
    enc = encoder_id or cont.meta.get("encoder_id") or f"imported:{os.path.basename(str(path))}"
    return ImportedEmbeddings(cont, enc)


class EmbeddingStore:
    """Dispatches embedding requests to registered sources by encoder id."""

    def __init__(self, *sources):
        self._sources = {}
        for s in sources:
            self.add(s)

    def add(self, source) -> None:
        if source.encoder_id in self._sources:
            raise ValueError(f"encoder id {source.encoder_id!r} already registered")
        self._sources[source.encoder_id] = source

    def embed_record(self, encoder_id: str, record: SequenceRecord, length: int) -> ResidueEmbedding:
        try:
            src = self._sources[encoder_id]
        except KeyError:
            raise MissingEntryError(encoder_id) from None
        return src.embed_record(record, length)

    def encoder_ids(self) -> list[str]:
        return list(self._sources)
