"""Global-alignment sequence identity and identity-based clustering/filtering.

Alignment scoring is fixed: match +1, mismatch -1, gap -1 (linear). Among
alignments with the optimal score, the one with the most identical columns
is taken, then the shortest. That tie-break makes identity symmetric in its
arguments.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

MATCH, MISMATCH, GAP = 1, -1, -1


def alignment_stats(a: str, b: str) -> tuple[int, int, int]:
    """(score, identical columns, alignment length) of the preferred optimal alignment."""
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ValueError("sequence_identity needs two nonempty sequences")
    # pack (score, matches, -length) into one int so that numeric max is lexicographic max
    k2 = n + m + 1
    k1 = (min(n, m) + 1) * k2 + 1
    gap = GAP * k1 - 1
    hit = MATCH * k1 + k2 - 1
    miss = MISMATCH * k1 - 1
    xa = np.frombuffer(a.encode("ascii"), dtype=np.uint8)
    xb = np.frombuffer(b.encode("ascii"), dtype=np.uint8)
    ramp = np.arange(m + 1, dtype=np.int64) * gap
    prev = ramp.copy()
    for i in range(1, n + 1):
        step = np.where(xb == xa[i - 1], hit, miss)
        e = np.empty(m + 1, dtype=np.int64)
        e[0] = i * gap
        e[1:] = np.maximum(prev[:-1] + step, prev[1:] + gap)
        # horizontal gap chain: row[j] = max_k<=j e[k] + (j-k)*gap
        prev = np.maximum.accumulate(e - ramp) + ramp
    v = int(prev[m]) + n + m
    score = v // k1
    rem = v - score * k1
    matches, slack = divmod(rem, k2)
    return score, matches, n + m - slack


@lru_cache(maxsize=200_000)
def _identity_ordered(a: str, b: str) -> float:
    _, matches, length = alignment_stats(a, b)
    return matches / length


def sequence_identity(a: str, b: str) -> float:
    """Identical columns / alignment length under global alignment."""
    if a == b:
        if not a:
            raise ValueError("sequence_identity needs two nonempty sequences")
        return 1.0
    return _identity_ordered(*sorted((a, b)))


@dataclass
class Clustering:
    representative: dict[str, str]  # record id -> representative id
    order: list[str]  # representatives in founding order

    def clusters(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {r: [] for r in self.order}
        for rid, rep in self.representative.items():
            out[rep].append(rid)
        return out

    def __len__(self) -> int:
        return len(self.order)


def greedy_cluster(records: Sequence, threshold: float = 0.8) -> Clustering:
    """Longest-first greedy clustering; ties in length broken by id."""
    if not records:
        raise ValueError("greedy_cluster needs at least one record")
    ordered = sorted(records, key=lambda r: (-len(r.residues), r.id))
    reps: list = []
    assign: dict[str, str] = {}
    for rec in ordered:
        for rep in reps:
            if sequence_identity(rec.residues, rep.residues) >= threshold:
                assign[rec.id] = rep.id
                break
        else:
            reps.append(rec)
            assign[rec.id] = rec.id
    return Clustering(assign, [r.id for r in reps])


def max_identity(query: str, references: Sequence[str]) -> float:
    best = 0.0
    for ref in references:
        best = max(best, sequence_identity(query, ref))
        if best == 1.0:
            break
    return best


def holdout_filter(candidates: Sequence, reference: Sequence, threshold: float = 0.8) -> list:
    """Keep candidates whose peptide and protein are both at most ``threshold``
    identical to every reference peptide / protein."""
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"holdout_filter threshold must be in (0, 1], got {threshold}")
    ref_peps = sorted({p.peptide.residues for p in reference})
    ref_prots = sorted({p.protein.residues for p in reference})
    survivors = []
    for cand in candidates:
        if max_identity(cand.peptide.residues, ref_peps) > threshold:
            continue
        if max_identity(cand.protein.residues, ref_prots) > threshold:
            continue
        survivors.append(cand)
    return survivors
