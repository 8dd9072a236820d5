"""Batch screening workflows built on the predictor, the generator and the
statistics helpers. Every report is JSON or CSV; nothing here plots."""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, metrics
from .align import max_identity
from .corpus import PairExample
from .peppi import Featurizer, PepPIModel, RESIDUE_STAGE, StageError, predict_pair, predict_residues
from .sequences import AMINO_ACIDS, SequenceRecord
from .storage import canonical_json, config_hash, file_digest

MANIFEST_NAME = "run_manifest.json"
TOP_K = 10
SCORE_CHUNK = 64  # fixed so results never depend on the thread count


class ScreeningError(ValueError):
    pass


# ---------------------------------------------------------------- run manifest

def _digests(path: Path, root: Path | None = None, skip: str | None = None) -> dict[str, str]:
    if path.is_dir():
        out = {}
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            if skip is not None and f.name == skip and f.parent == path:
                continue
            out[(f.relative_to(root) if root else f).as_posix()] = file_digest(f)
        return out
    return {(path.relative_to(root) if root else path).as_posix(): file_digest(path)}


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: dict
    inputs: dict[str, str]
    outputs: dict[str, str]
    wall_clock: float
    tool_version: str = __version__

    @classmethod
    def collect(cls, command: str, config: dict, seeds: dict, inputs: Sequence, out_dir, wall_clock: float):
        ins: dict[str, str] = {}
        for p in inputs:
            ins.update(_digests(Path(p)))
        outs = _digests(Path(out_dir), root=Path(out_dir), skip=MANIFEST_NAME)
        return cls(command, config_hash(config), dict(seeds), ins, outs, wall_clock)

    def save(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, out_dir) -> "RunManifest":
        return cls(**json.loads((Path(out_dir) / MANIFEST_NAME).read_text(encoding="utf-8")))


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return round(time.perf_counter() - self.start, 3)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- scoring

def score_peptides(model: PepPIModel, peptides: Sequence[SequenceRecord], target: SequenceRecord, source,
                   threads: int = 1) -> np.ndarray:
    """Binding probability of every peptide against one target, in input order."""
    if not peptides:
        return np.zeros(0)
    feat = Featurizer(source, model.config.pep_len, model.config.prot_len)
    pairs = [PairExample(p, target, 0) for p in peptides]
    chunks = [pairs[i:i + SCORE_CHUNK] for i in range(0, len(pairs), SCORE_CHUNK)]

    def run(chunk):
        return predict_pair(model, chunk, source, featurizer=feat, batch_size=SCORE_CHUNK)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts)


def model_scorer(model: PepPIModel, source, threads: int = 1) -> Callable:
    return lambda peptides, target: score_peptides(model, peptides, target, source, threads)


# ---------------------------------------------------------------- ranking

@dataclass(frozen=True)
class RankedCandidate:
    candidate_id: str
    sequence: str
    probability: float
    rank: int
    copies: int = 1  # how often this sequence occurs in the candidate set
    metadata: dict = field(default_factory=dict)

    @property
    def duplicate(self) -> bool:
        return self.copies > 1


def rank_candidates(records: Sequence[SequenceRecord], probabilities, metadata: Sequence[dict] | None = None
                    ) -> list[RankedCandidate]:
    """Descending probability, ties by sequence then by input position."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if len(probs) != len(records):
        raise ScreeningError(f"{len(records)} candidates but {len(probs)} scores")
    counts: dict[str, int] = {}
    for r in records:
        counts[r.residues] = counts.get(r.residues, 0) + 1
    order = sorted(range(len(records)), key=lambda i: (-probs[i], records[i].residues, i))
    meta = metadata or [{}] * len(records)
    return [RankedCandidate(records[i].id, records[i].residues, float(probs[i]), rank, counts[records[i].residues],
                            dict(meta[i]))
            for rank, i in enumerate(order, 1)]


RANK_FIELDS = ["rank", "candidate_id", "sequence", "probability", "copies", "duplicate", "metadata"]


def write_ranked(ranked: Sequence[RankedCandidate], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RANK_FIELDS)
        for r in ranked:
            w.writerow([r.rank, r.candidate_id, r.sequence, repr(r.probability), r.copies, int(r.duplicate),
                        canonical_json(r.metadata)])


def read_ranked(path) -> list[RankedCandidate]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != RANK_FIELDS:
            raise ScreeningError(f"{path}: expected header {','.join(RANK_FIELDS)}")
        for lineno, row in enumerate(reader, 2):
            try:
                out.append(RankedCandidate(row[1], row[2], float(row[3]), int(row[0]), int(row[4]),
                                           json.loads(row[6])))
            except (IndexError, ValueError) as exc:
                raise ScreeningError(f"{path}:{lineno}: {exc}") from exc
    return out


def candidate_metadata(path) -> dict[str, dict]:
    """``key=value`` fields from FASTA headers, keyed by record id."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith(">"):
            parts = line[1:].split()
            if parts:
                out[parts[0]] = dict(p.split("=", 1) for p in parts[1:] if "=" in p)
    return out


@dataclass
class RankReport:
    ranked: list[RankedCandidate]
    top_k: int = TOP_K

    def top(self) -> list[RankedCandidate]:
        return self.ranked[:self.top_k]

    def bottom(self) -> list[RankedCandidate]:
        return self.ranked[-self.top_k:][::-1] if self.ranked else []

    def summary(self) -> dict:
        p = np.array([r.probability for r in self.ranked])
        return {
            "count": len(self.ranked),
            "unique_sequences": len({r.sequence for r in self.ranked}),
            "duplicates_flagged": sum(r.duplicate for r in self.ranked),
            "mean_probability": float(p.mean()) if len(p) else None,
            "median_probability": float(np.median(p)) if len(p) else None,
            "top": [r.candidate_id for r in self.top()],
            "bottom": [r.candidate_id for r in self.bottom()],
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        write_ranked(self.ranked, out / "ranked.csv")
        write_ranked(self.top(), out / "top.csv")
        write_ranked(self.bottom(), out / "bottom.csv")
        write_json(self.summary(), out / "rank_report.json")


def rank_records(records: Sequence[SequenceRecord], target: SequenceRecord, scorer: Callable,
                 metadata: Sequence[dict] | None = None, top_k: int = TOP_K) -> RankReport:
    if not records:
        raise ScreeningError("no candidates to rank")
    return RankReport(rank_candidates(records, scorer(list(records), target), metadata), top_k)


# ---------------------------------------------------------------- background comparison

def _summary(x: np.ndarray) -> dict:
    return {"n": int(len(x)), "mean": float(x.mean()), "median": float(np.median(x))}


def background_compare(candidate_scores, background_scores) -> dict:
    """Location statistics of candidate against background scores."""
    x = np.asarray(candidate_scores, dtype=np.float64)
    y = np.asarray(background_scores, dtype=np.float64)
    if len(x) == 0 or len(y) == 0:
        raise ScreeningError("background comparison needs nonempty candidate and background groups")
    mw = metrics.mann_whitney(x, y)
    cd = metrics.cliffs_delta(x, y)
    return {
        "candidates": _summary(x),
        "background": _summary(y),
        "mann_whitney": {"u": mw.u, "z": mw.z, "p_value": mw.p_value, "log10_p": mw.log10_p,
                         "underflow": mw.underflow, "report": mw.report()},
        "cliffs_delta": cd.delta,
        "common_language": cd.common_language,
        "ties": cd.ties,
    }


def check_length_policy(candidates: Sequence[str], background: Sequence[str]) -> None:
    """Fixed-length candidate sets need background peptides of that same length."""
    lengths = {len(s) for s in candidates}
    if len(lengths) == 1:
        (n,) = lengths
        bad = sorted({len(s) for s in background} - {n})
        if bad:
            raise ScreeningError(f"candidates are all {n}-mers but background has lengths {bad}")


# ---------------------------------------------------------------- alanine scan

def substitute_for(residue: str) -> str:
    return "G" if residue == "A" else "A"


@dataclass(frozen=True)
class ScanResult:
    position: int  # 1-based
    wild_type: str
    substitute: str
    p_wt: float
    p_mut: float
    sensitivity: float | None  # None when p_wt == 0

    @property
    def flagged(self) -> bool:
        return self.sensitivity is None


def ala_scan(peptide: SequenceRecord, target: SequenceRecord, scorer: Callable) -> list[ScanResult]:
    """One single-site substitution per position, scored against the wild type."""
    res = peptide.residues
    mutants = [SequenceRecord(f"{peptide.id}_{res[i]}{i + 1}{substitute_for(res[i])}",
                              res[:i] + substitute_for(res[i]) + res[i + 1:], "peptide") for i in range(len(res))]
    scores = np.asarray(scorer([peptide] + mutants, target), dtype=np.float64)
    p_wt = float(scores[0])
    out = []
    for i, p_mut in enumerate(scores[1:]):
        sens = None if p_wt == 0 else (p_wt - float(p_mut)) / p_wt
        out.append(ScanResult(i + 1, res[i], substitute_for(res[i]), p_wt, float(p_mut), sens))
    return out


def rank_by_sensitivity(results: Sequence[ScanResult]) -> list[ScanResult]:
    return sorted(results, key=lambda r: (r.flagged, -(r.sensitivity or 0.0), r.position))


SCAN_FIELDS = ["position", "wild_type", "substitute", "p_wt", "p_mut", "sensitivity", "flag"]


def write_scan(results: Sequence[ScanResult], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCAN_FIELDS)
        for r in results:
            w.writerow([r.position, r.wild_type, r.substitute, repr(r.p_wt), repr(r.p_mut),
                        "" if r.flagged else repr(r.sensitivity), "p_wt_zero" if r.flagged else ""])


# ---------------------------------------------------------------- evaluation

def pair_metrics(scores, labels, threshold: float = 0.5) -> dict:
    m = metrics.binary_metrics(scores, labels, threshold)
    both = len(set(np.asarray(labels).tolist())) == 2
    m["auroc"] = metrics.auroc(scores, labels) if both else None
    m["aupr"] = metrics.aupr(scores, labels) if np.any(np.asarray(labels) == 1) else None
    m["n"] = int(len(scores))
    return m


def residue_metrics(predictions, pairs: Sequence[PairExample], threshold: float = 0.5) -> dict:
    """Per-side metrics over all real positions of site-annotated pairs."""
    out = {}
    for side, attr, site in (("peptide", "peptide", "peptide_site"), ("protein", "protein", "protein_site")):
        s, y = [], []
        for pred, pair in zip(predictions, pairs):
            p = getattr(pred, attr)
            s.append(p)
            y.append(np.asarray(getattr(pair, site))[:len(p)])
        out[side] = pair_metrics(np.concatenate(s), np.concatenate(y).astype(int), threshold)
    return out


def _flatten(d: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            flat[key] = float(v)
    return flat


def summarize_folds(per_fold: Sequence[dict]) -> dict:
    """Mean and population std of every numeric field present in all folds."""
    flat = [_flatten(f) for f in per_fold]
    keys = sorted(set.intersection(*(set(f) for f in flat))) if flat else []
    return {
        "mean": {k: float(np.mean([f[k] for f in flat])) for k in keys},
        "std": {k: float(np.std([f[k] for f in flat])) for k in keys},
    }


def evaluate(model: PepPIModel, pairs: Sequence[PairExample], source, task: str, threshold: float = 0.5) -> dict:
    if task == "pair":
        probs = predict_pair(model, list(pairs), source)
        return pair_metrics(probs, [p.label for p in pairs], threshold)
    if task == "residue":
        if model.stage != RESIDUE_STAGE:
            raise StageError(f"residue evaluation needs a residue-level checkpoint, got {model.stage!r}")
        annotated = [p for p in pairs if p.has_sites]
        if not annotated:
            raise ScreeningError("no site-annotated pairs to evaluate")
        return residue_metrics(predict_residues(model, annotated, source), annotated, threshold)
    raise ScreeningError(f"task must be pair or residue, got {task!r}")


# ---------------------------------------------------------------- low-homology run

def low_homology_filter(corpus: Sequence[PairExample], target: SequenceRecord,
                        known_binders: Sequence[SequenceRecord], threshold: float = 0.6) -> list[PairExample]:
    """Drop pairs whose peptide resembles a known binder or whose protein resembles the target."""
    if not 0.0 <= threshold <= 1.0:
        raise ScreeningError(f"threshold must be in [0, 1], got {threshold}")
    binders = sorted({k.residues for k in known_binders})
    survivors = [p for p in corpus
                 if max_identity(p.protein.residues, [target.residues]) <= threshold
                 and (not binders or max_identity(p.peptide.residues, binders) <= threshold)]
    if not survivors:
        raise ScreeningError(f"low-homology filter at {threshold} removed all {len(corpus)} pairs")
    return survivors


def random_peptides(lengths: Sequence[int], seed: int, prefix: str = "random") -> list[SequenceRecord]:
    rng = np.random.default_rng([seed, 0xBA])
    return [SequenceRecord(f"{prefix}{i}", "".join(AMINO_ACIDS[j] for j in rng.integers(0, 20, n)), "peptide")
            for i, n in enumerate(lengths)]


def known_binder_report(known_scores, random_scores) -> dict:
    k = np.asarray(known_scores, dtype=np.float64)
    r = np.asarray(random_scores, dtype=np.float64)
    stats = background_compare(k, r)
    stats["known_above_random_median"] = float(np.mean(k > np.median(r)))
    return stats
