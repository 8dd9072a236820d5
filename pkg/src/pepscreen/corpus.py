"""Pair examples, negative sampling, fold construction and the generation corpus."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .align import greedy_cluster
from .sequences import MAX_X_FRACTION, SequenceRecord


class PairFileError(ValueError):
    pass


class NegativeSamplingError(RuntimeError):
    def __init__(self, peptide_id: str):
        super().__init__(f"no non-cognate protein left to pair with peptide {peptide_id!r}")
        self.peptide_id = peptide_id


class InsufficientPairsError(ValueError):
    def __init__(self, available: int, train_n: int, test_n: int):
        super().__init__(
            f"only {available} pairs remain after filtering; requested train={train_n} test={test_n}")
        self.available = available


@dataclass
class PairExample:
    peptide: SequenceRecord
    protein: SequenceRecord
    label: int
    peptide_site: np.ndarray | None = None
    protein_site: np.ndarray | None = None
    provenance: str = "positive"

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"pair {self.key}: label must be 0 or 1")
        has_site = self.peptide_site is not None or self.protein_site is not None
        if has_site and self.label != 1:
            raise ValueError(f"pair {self.key}: site annotations on a negative pair")
        if self.peptide_site is not None:
            self.peptide_site = np.asarray(self.peptide_site, dtype=np.float64)
            if len(self.peptide_site) != len(self.peptide):
                raise ValueError(f"pair {self.key}: peptide site length {len(self.peptide_site)} "
                                 f"!= peptide length {len(self.peptide)}")
        if self.protein_site is not None:
            self.protein_site = np.asarray(self.protein_site, dtype=np.float64)
            if len(self.protein_site) != len(self.protein):
                raise ValueError(f"pair {self.key}: protein site length {len(self.protein_site)} "
                                 f"!= protein length {len(self.protein)}")

    @property
    def key(self) -> str:
        return f"{self.peptide.id}|{self.protein.id}"

    @property
    def has_sites(self) -> bool:
        return self.peptide_site is not None and self.protein_site is not None


def admit_pairs(pairs: Iterable[PairExample], max_x: float = MAX_X_FRACTION) -> list[PairExample]:
    """Drop pairs where either side has more than ``max_x`` unknown residues."""
    return [p for p in pairs if p.peptide.admitted(max_x) and p.protein.admitted(max_x)]


# ---------------------------------------------------------------- file formats

def read_pairs(path: str | os.PathLike, peptides: dict[str, SequenceRecord],
               proteins: dict[str, SequenceRecord], sites: dict | None = None) -> list[PairExample]:
    """Read a ``pep_id<TAB>prot_id<TAB>label`` file (header required)."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["pep_id", "prot_id", "label"]:
            raise PairFileError(f"{path}: expected header 'pep_id\\tprot_id\\tlabel'")
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise PairFileError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            pid, qid, lab = (c.strip() for c in row[:3])
            if pid not in peptides:
                raise PairFileError(f"{path}:{lineno}: unknown peptide id {pid!r}")
            if qid not in proteins:
                raise PairFileError(f"{path}:{lineno}: unknown protein id {qid!r}")
            if lab not in ("0", "1"):
                raise PairFileError(f"{path}:{lineno}: label must be 0 or 1, got {lab!r}")
            label = int(lab)
            site = (sites or {}).get(f"{pid}|{qid}") if label == 1 else None
            try:
                out.append(PairExample(
                    peptides[pid], proteins[qid], label,
                    None if site is None else site["peptide_site"],
                    None if site is None else site["protein_site"],
                    "positive" if label == 1 else "sampled-negative",
                ))
            except ValueError as exc:
                raise PairFileError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_pairs(pairs: Iterable[PairExample], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["pep_id", "prot_id", "label"])
        for p in pairs:
            w.writerow([p.peptide.id, p.protein.id, p.label])


def read_sites(path: str | os.PathLike) -> dict[str, dict[str, list[int]]]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    for key, entry in raw.items():
        for side in ("peptide_site", "protein_site"):
            vals = entry.get(side)
            if vals is None or any(v not in (0, 1) for v in vals):
                raise PairFileError(f"{path}: entry {key!r} needs a 0/1 integer array '{side}'")
    return raw


def write_sites(pairs: Iterable[PairExample], path: str | os.PathLike) -> None:
    data = {
        p.key: {"peptide_site": [int(v) for v in p.peptide_site],
                "protein_site": [int(v) for v in p.protein_site]}
        for p in pairs if p.has_sites
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- negatives

def sample_negatives(positives: Sequence[PairExample], seed: int) -> list[PairExample]:
    """One label-0 pair per positive, pairing its peptide with a non-cognate protein.

    Candidates exclude every positive pair and every negative already drawn.
    Each draw uses its own generator seeded from ``(seed, index)``.
    """
    proteins: dict[str, SequenceRecord] = {}
    for p in positives:
        proteins.setdefault(p.protein.id, p.protein)
    if len(proteins) < 2:
        raise ValueError("sample_negatives needs at least two distinct proteins")
    prot_ids = list(proteins)
    taken = {(p.peptide.id, p.protein.id) for p in positives}
    out = []
    for i, pos in enumerate(positives):
        options = [q for q in prot_ids if (pos.peptide.id, q) not in taken]
        if not options:
            raise NegativeSamplingError(pos.peptide.id)
        rng = np.random.default_rng([seed, i])
        choice = options[int(rng.integers(len(options)))]
        taken.add((pos.peptide.id, choice))
        out.append(PairExample(pos.peptide, proteins[choice], 0, provenance="sampled-negative"))
    return out


# ---------------------------------------------------------------- folds

@dataclass
class CorpusManifest:
    seed: int
    k: int
    folds: list[list[str]]
    counts: list[dict[str, int]]
    thresholds: dict[str, float] = field(default_factory=dict)

    def fold_of(self) -> dict[str, int]:
        return {key: f for f, keys in enumerate(self.folds) for key in keys}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        return cls(**json.loads(text))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CorpusManifest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def kfold_split(examples: Sequence[PairExample], k: int = 5, seed: int = 0,
                thresholds: dict[str, float] | None = None) -> CorpusManifest:
    """Label-stratified random folds.

    Examples are shuffled within each label, the labels are laid end to end,
    and positions are dealt round-robin, so fold sizes differ by at most one
    and so do per-fold class counts.
    """
    if k < 2:
        raise ValueError("kfold_split needs k >= 2")
    if k > len(examples):
        raise ValueError(f"kfold_split: k={k} exceeds {len(examples)} examples")
    keys = [e.key for e in examples]
    if len(set(keys)) != len(keys):
        raise ValueError("kfold_split: duplicate pair keys")
    rng = np.random.default_rng(seed)
    order: list[int] = []
    for label in sorted({e.label for e in examples}, reverse=True):
        idx = [i for i, e in enumerate(examples) if e.label == label]
        order.extend(int(idx[j]) for j in rng.permutation(len(idx)))
    folds: list[list[str]] = [[] for _ in range(k)]
    counts = [{"positive": 0, "negative": 0} for _ in range(k)]
    for n, i in enumerate(order):
        f = n % k
        folds[f].append(keys[i])
        counts[f]["positive" if examples[i].label == 1 else "negative"] += 1
    return CorpusManifest(seed=seed, k=k, folds=folds, counts=counts, thresholds=dict(thresholds or {}))


# ---------------------------------------------------------------- generation corpus

@dataclass
class GenerationSplit:
    train: list[PairExample]
    test: list[PairExample]
    manifest: dict


def build_generation_corpus(pairs: Sequence[PairExample], train_n: int, test_n: int, seed: int,
                            pep_max: int = 50, prot_max: int = 500,
                            cluster_threshold: float = 0.8) -> GenerationSplit:
    """Deduplicate, cap lengths, consolidate per target cluster, then split."""
    seen = set()
    unique = []
    for p in pairs:
        sig = (p.peptide.residues, p.protein.residues)
        if sig not in seen:
            seen.add(sig)
            unique.append(p)
    n_unique = len(unique)
    capped = [p for p in unique if len(p.peptide) <= pep_max and len(p.protein) <= prot_max]
    n_capped = len(capped)
    if capped:
        targets = {}
        for p in capped:
            targets.setdefault(p.protein.residues, p.protein)
        clustering = greedy_cluster(list(targets.values()), cluster_threshold)
        rep_of = {res: clustering.representative[rec.id] for res, rec in targets.items()}
    consolidated = []
    combos = set()
    for p in capped:
        sig = (p.peptide.residues, rep_of[p.protein.residues])
        if sig not in combos:
            combos.add(sig)
            consolidated.append(p)
    if len(consolidated) < train_n + test_n:
        raise InsufficientPairsError(len(consolidated), train_n, test_n)
    perm = np.random.default_rng(seed).permutation(len(consolidated))
    picked = [consolidated[i] for i in perm]
    train, test = picked[:train_n], picked[train_n:train_n + test_n]
    manifest = {
        "seed": seed,
        "thresholds": {"pep_max": pep_max, "prot_max": prot_max, "cluster_identity": cluster_threshold},
        "counts": {"input": len(pairs), "unique": n_unique, "length_capped": n_capped,
                   "consolidated": len(consolidated), "train": len(train), "test": len(test)},
        "train": [p.key for p in train],
        "test": [p.key for p in test],
    }
    return GenerationSplit(train, test, manifest)
