"""Residue alphabet, sequence records, FASTA I/O and fixed-length tokenisation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
ALPHABET = AMINO_ACIDS + "X"

PAD = 0
X_TOKEN = len(AMINO_ACIDS) + 1  # 21
BOS = X_TOKEN + 1  # 22, generation vocabulary only
EOS = BOS + 1  # 23, generation vocabulary only
INPUT_VOCAB = X_TOKEN + 1  # pad + 20 residues + X
GEN_VOCAB = EOS + 1

TOKEN_OF = {aa: i + 1 for i, aa in enumerate(AMINO_ACIDS)}
TOKEN_OF["X"] = X_TOKEN
RESIDUE_OF = {v: k for k, v in TOKEN_OF.items()}

PEPTIDE_LEN = 50
PROTEIN_LEN = 800
MAX_X_FRACTION = 0.20


class FastaError(ValueError):
    pass


class FastaReadError(FastaError, OSError):
    pass


class FastaFormatError(FastaError):
    pass


class EmptySequenceError(FastaError):
    pass


class DuplicateIdError(FastaError):
    pass


def canonicalize(raw: str) -> tuple[str, int]:
    """Uppercase and map characters outside the alphabet to X.

    Returns the canonical string and the number of characters that were mapped.
    """
    up = raw.upper()
    out = []
    mapped = 0
    for ch in up:
        if ch in ALPHABET:
            out.append(ch)
        else:
            out.append("X")
            mapped += 1
    return "".join(out), mapped


@dataclass(frozen=True)
class SequenceRecord:
    id: str
    residues: str
    kind: str = "protein"
    n_mapped: int = 0

    def __post_init__(self):
        if not self.residues:
            raise EmptySequenceError(f"record {self.id!r} has an empty sequence")
        if self.kind not in ("peptide", "protein"):
            raise ValueError(f"record {self.id!r}: kind must be peptide or protein, got {self.kind!r}")
        bad = set(self.residues) - set(ALPHABET)
        if bad:
            raise ValueError(f"record {self.id!r}: non-canonical residues {sorted(bad)}")

    @classmethod
    def from_raw(cls, id: str, raw: str, kind: str = "protein") -> "SequenceRecord":
        residues, mapped = canonicalize(raw)
        return cls(id, residues, kind, mapped)

    def __len__(self) -> int:
        return len(self.residues)

    @property
    def x_fraction(self) -> float:
        return self.residues.count("X") / len(self.residues)

    def admitted(self, max_x: float = MAX_X_FRACTION) -> bool:
        return self.x_fraction <= max_x


def parse_fasta(path: str | os.PathLike, kind: str = "protein") -> list[SequenceRecord]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise FastaReadError(f"cannot read FASTA file {path}: {exc}") from exc
    return parse_fasta_text(text, kind=kind)


def parse_fasta_text(text: str, kind: str = "protein") -> list[SequenceRecord]:
    records: list[SequenceRecord] = []
    seen: set[str] = set()
    header: str | None = None
    chunks: list[str] = []

    def flush():
        if header is None:
            return
        raw = "".join(chunks)
        if not raw:
            raise EmptySequenceError(f"record {header!r} has an empty sequence")
        if header in seen:
            raise DuplicateIdError(f"duplicate record id {header!r}")
        seen.add(header)
        records.append(SequenceRecord.from_raw(header, raw, kind))

    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            header = line[1:].split()[0] if line[1:].strip() else ""
            if not header:
                raise FastaFormatError(f"line {lineno}: header without an id")
            chunks = []
        else:
            if header is None:
                raise FastaFormatError(f"line {lineno}: sequence data before the first header")
            chunks.append("".join(line.split()))
    flush()
    return records


def format_fasta(records: Iterable[SequenceRecord], width: int = 60, headers: Sequence[str] | None = None) -> str:
    lines = []
    for i, rec in enumerate(records):
        lines.append(">" + (headers[i] if headers is not None else rec.id))
        for start in range(0, len(rec.residues), width):
            lines.append(rec.residues[start:start + width])
    return "\n".join(lines) + "\n"


def write_fasta(records: Iterable[SequenceRecord], path: str | os.PathLike, width: int = 60) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_fasta(records, width))


def tokenize(residues: str) -> np.ndarray:
    return np.array([TOKEN_OF[c] for c in residues], dtype=np.int64)


def detokenize(tokens: Iterable[int]) -> str:
    return "".join(RESIDUE_OF[int(t)] for t in tokens if int(t) in RESIDUE_OF)


def pad_tokens(residues: str, length: int, truncate: str = "right") -> tuple[np.ndarray, np.ndarray]:
    """Tokens and validity mask of exactly ``length`` positions.

    ``truncate="right"`` keeps the N-terminal prefix; ``"left"`` keeps the
    C-terminal suffix.
    """
    if truncate == "right":
        kept = residues[:length]
    elif truncate == "left":
        kept = residues[-length:]
    else:
        raise ValueError(f"truncate must be 'right' or 'left', got {truncate!r}")
    tokens = np.zeros(length, dtype=np.int64)
    tokens[:len(kept)] = tokenize(kept)
    mask = np.zeros(length, dtype=bool)
    mask[:len(kept)] = True
    return tokens, mask


def _fit_site(site: np.ndarray | None, raw_len: int, length: int, truncate: str) -> np.ndarray | None:
    if site is None:
        return None
    out = np.zeros(length, dtype=np.float64)
    kept = site[:length] if truncate == "right" else site[max(0, raw_len - length):]
    out[:len(kept)] = kept
    return out


@dataclass
class EncodedPair:
    pep_tokens: np.ndarray
    pep_mask: np.ndarray
    prot_tokens: np.ndarray
    prot_mask: np.ndarray
    label: int
    pep_site: np.ndarray | None = None
    prot_site: np.ndarray | None = None
    key: str = ""
    meta: dict = field(default_factory=dict)


def normalize_lengths(pair, pep_len: int = PEPTIDE_LEN, prot_len: int = PROTEIN_LEN,
                      truncate: str = "right") -> EncodedPair:
    """Pad or truncate both sides of a :class:`~pepscreen.corpus.PairExample`."""
    pt, pm = pad_tokens(pair.peptide.residues, pep_len, truncate)
    qt, qm = pad_tokens(pair.protein.residues, prot_len, truncate)
    return EncodedPair(
        pt, pm, qt, qm, int(pair.label),
        _fit_site(pair.peptide_site, len(pair.peptide), pep_len, truncate),
        _fit_site(pair.protein_site, len(pair.protein), prot_len, truncate),
        key=pair.key,
    )
