"""Seeded synthetic corpora with known generative rules.

Cross-motif benchmark
    Each protein carries one motif from a fixed set. A peptide binds iff it
    contains the motif's partner: the motif mapped through a residue
    complement table and reversed. Non-binders carry the partner of a
    different motif, so neither side alone reveals the label.

Interface benchmark
    Binding pairs only. The peptide carries the true partner plus decoy
    partners of other motifs; site labels mark the true partner positions on
    the peptide and the motif positions on the protein.

Family corpus
    Two target families with distinct motif sets on the protein and distinct
    residue preferences on the peptide, for conditioned generation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import PairExample
from .sequences import AMINO_ACIDS, SequenceRecord

# pairs residue i with residue i+10 in the alphabet; an involution
COMPLEMENT = {a: AMINO_ACIDS[(i + 10) % 20] for i, a in enumerate(AMINO_ACIDS)}


def partner(motif: str) -> str:
    return "".join(COMPLEMENT[c] for c in reversed(motif))


def _random_seq(rng: np.random.Generator, n: int, alphabet: str = AMINO_ACIDS) -> str:
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), n))


def _plant(rng, background: str, insert: str, forbidden: list[str], max_tries: int = 200):
    """Insert at a random offset; reject if a forbidden word appears outside it."""
    for _ in range(max_tries):
        pos = int(rng.integers(0, len(background) - len(insert) + 1))
        seq = background[:pos] + insert + background[pos + len(insert):]
        outside = seq[:pos] + "." + seq[pos + len(insert):]
        if not any(f in outside for f in forbidden):
            return seq, pos
        background = _random_seq(rng, len(background))
    raise RuntimeError("could not plant motif without collisions")


def _slotted_peptide(rng, inserts: list[str], pep_len: int, forbidden: list[str], max_tries: int = 200):
    """Random peptide with each insert in its own slot, in random slot order.

    Returns the sequence and each insert's start offset. Backgrounds that
    create an extra forbidden word are redrawn.
    """
    mlen = len(inserts[0])
    slot_len = pep_len // len(inserts)
    if slot_len < mlen:
        raise ValueError(f"peptide length {pep_len} too short for {len(inserts)} inserts")
    for _ in range(max_tries):
        order = rng.permutation(len(inserts))
        chars = list(_random_seq(rng, pep_len))
        starts = [0] * len(inserts)
        for slot, which in enumerate(order):
            off = slot * slot_len + int(rng.integers(0, slot_len - mlen + 1))
            chars[off:off + mlen] = inserts[which]
            starts[which] = off
        seq = "".join(chars)
        if sum(seq.count(w) for w in set(forbidden)) == len(inserts):
            return seq, starts
    raise RuntimeError("could not build peptide without stray motif words")


def make_motifs(rng: np.random.Generator, n: int, length: int) -> list[str]:
    motifs: list[str] = []
    while len(motifs) < n:
        m = _random_seq(rng, length)
        if m not in motifs and partner(m) not in motifs and m != partner(m):
            motifs.append(m)
    return motifs


@dataclass
class MotifBenchmark:
    motifs: list[str]
    train: list[PairExample]
    test: list[PairExample]


def cross_motif_benchmark(seed: int, n_train: int = 512, n_test: int = 256, n_motifs: int = 4,
                          motif_len: int = 3, pep_len: int = 12, prot_len: int = 32,
                          motifs: list[str] | None = None, n_decoys: int = 0) -> MotifBenchmark:
    """Balanced pairs; label 1 iff the peptide holds the partner of the protein's motif.

    Every peptide carries ``n_decoys + 1`` partner words; binders have the
    true partner among them.
    """
    rng = np.random.default_rng([seed, 0xC0])
    motifs = motifs or make_motifs(rng, n_motifs, motif_len)
    words = motifs + [partner(m) for m in motifs]

    def make(idx: int, label: int, tag: str) -> PairExample:
        k = int(rng.integers(len(motifs)))
        prot, _ = _plant(rng, _random_seq(rng, prot_len), motifs[k], words)
        others = [m for i, m in enumerate(motifs) if i != k]
        n_wrong = n_decoys + (0 if label else 1)
        inserts = [partner(others[int(i)]) for i in rng.choice(len(others), n_wrong, replace=False)]
        if label:
            inserts.insert(0, partner(motifs[k]))
        pep, _ = _slotted_peptide(rng, inserts, pep_len, words)
        return PairExample(SequenceRecord(f"{tag}p{idx}", pep, "peptide"),
                           SequenceRecord(f"{tag}t{idx}", prot, "protein"), label,
                           provenance="positive" if label else "negative")

    train = [make(i, i % 2, "tr") for i in range(n_train)]
    test = [make(i, i % 2, "te") for i in range(n_test)]
    return MotifBenchmark(motifs, train, test)


def interface_benchmark(seed: int, motifs: list[str], n_train: int = 256, n_test: int = 128,
                        pep_len: int = 12, prot_len: int = 32, n_decoys: int = 1) -> MotifBenchmark:
    """Binding pairs with planted interface labels on both sides."""
    rng = np.random.default_rng([seed, 0x1F])
    words = motifs + [partner(m) for m in motifs]
    mlen = len(motifs[0])

    def make(idx: int, tag: str) -> PairExample:
        k = int(rng.integers(len(motifs)))
        prot, ppos = _plant(rng, _random_seq(rng, prot_len), motifs[k], words)
        others = [m for i, m in enumerate(motifs) if i != k]
        decoys = [partner(others[int(i)]) for i in rng.choice(len(others), n_decoys, replace=False)]
        pep, starts = _slotted_peptide(rng, [partner(motifs[k])] + decoys, pep_len, words)
        true_pos = starts[0]
        pep_site = np.zeros(pep_len)
        pep_site[true_pos:true_pos + mlen] = 1
        prot_site = np.zeros(prot_len)
        prot_site[ppos:ppos + mlen] = 1
        return PairExample(SequenceRecord(f"{tag}p{idx}", pep, "peptide"),
                           SequenceRecord(f"{tag}t{idx}", prot, "protein"), 1,
                           peptide_site=pep_site, protein_site=prot_site)

    return MotifBenchmark(list(motifs), [make(i, "itr") for i in range(n_train)],
                          [make(i, "ite") for i in range(n_test)])


# ---------------------------------------------------------------- conditioned generation

FAMILY_PEPTIDE_ALPHABET = {"A": "KRHNQ", "B": "DEST"}
FAMILY_TARGET_MOTIFS = {"A": ["WWC", "CYW"], "B": ["GPG", "PGP"]}


def family_score(peptide: str, family: str) -> float:
    """Share of residues drawn from the family's preferred peptide alphabet."""
    if not peptide:
        return 0.0
    pref = FAMILY_PEPTIDE_ALPHABET[family]
    return sum(c in pref for c in peptide) / len(peptide)


@dataclass
class FamilyCorpus:
    train: list[PairExample]
    test: list[PairExample]
    family: dict[str, str]  # protein id -> family


def family_corpus(seed: int, n_targets: int = 16, peptides_per_target: int = 8, prot_len: int = 24,
                  pep_len_range: tuple = (6, 10), purity: float = 0.8, n_test_targets: int = 4) -> FamilyCorpus:
    """Targets split evenly between two families; each family's binders favour its own residue set."""
    rng = np.random.default_rng([seed, 0xFA])
    train, test, family = [], [], {}
    for t in range(n_targets + n_test_targets):
        fam = "AB"[t % 2]
        motif = FAMILY_TARGET_MOTIFS[fam][int(rng.integers(2))]
        prot = _random_seq(rng, prot_len)
        for _ in range(3):
            pos = int(rng.integers(0, prot_len - len(motif) + 1))
            prot = prot[:pos] + motif + prot[pos + len(motif):]
        pid = f"fam{fam}_t{t}"
        family[pid] = fam
        target = SequenceRecord(pid, prot, "protein")
        bucket = train if t < n_targets else test
        for j in range(peptides_per_target):
            n = int(rng.integers(pep_len_range[0], pep_len_range[1] + 1))
            pref = FAMILY_PEPTIDE_ALPHABET[fam]
            chars = [pref[int(rng.integers(len(pref)))] if rng.random() < purity else
                     AMINO_ACIDS[int(rng.integers(20))] for _ in range(n)]
            bucket.append(PairExample(SequenceRecord(f"{pid}_p{j}", "".join(chars), "peptide"), target, 1))
    return FamilyCorpus(train, test, family)
