"""Evaluation statistics: classification metrics, rank statistics,
composition summaries, hit rates over external scores and occlusion
attribution.

All functions are pure and invariant to the order of their inputs.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .sequences import AMINO_ACIDS
from .tensor import no_grad as _no_grad

log = logging.getLogger(__name__)


class MetricInputError(ValueError):
    pass


def _scored_set(scores, labels, need_both: bool = False, need_pos: bool = False):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricInputError(f"{len(s)} scores but {len(y)} labels")
    if s.size == 0:
        raise MetricInputError("empty scored set")
    if not np.isin(y, (0, 1)).all():
        raise MetricInputError("labels must be 0 or 1")
    y = y.astype(np.int64)
    n_pos = int(y.sum())
    if need_both and (n_pos == 0 or n_pos == len(y)):
        raise MetricInputError("ranking metric needs both classes present")
    if need_pos and n_pos == 0:
        raise MetricInputError("no positive labels")
    return s, y


# ---------------------------------------------------------------- classification

def binary_metrics(scores, labels, threshold: float = 0.5) -> dict:
    """Threshold at ``score >= threshold``; precision/F1 of an empty class are 0."""
    s, y = _scored_set(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        log.info("MCC denominator is zero; reporting 0")
        mcc = 0.0
    else:
        mcc = (tp * tn - fp * fn) / math.sqrt(denom)
    return {"precision": precision, "recall": recall, "accuracy": (tp + tn) / len(y), "f1": f1, "mcc": mcc,
            "tp": tp, "fp": fp, "tn": tn, "fn": fn}


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties count half)."""
    s, y = _scored_set(scores, labels, need_both=True)
    ranks = stats.rankdata(s)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision: sum over distinct descending thresholds of dRecall * precision."""
    s, y = _scored_set(scores, labels, need_pos=True)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    n_at = ends + 1
    d_tp = np.diff(np.r_[0, tp_at])
    return float(np.sum(d_tp * (tp_at / n_at)) / tp[-1])


# ---------------------------------------------------------------- rank statistics

@dataclass
class MannWhitney:
    u: float
    n1: int
    n2: int
    z: float
    p_value: float
    log10_p: float
    underflow: bool

    def report(self) -> str:
        if self.underflow:
            return f"U={self.u:.1f}, p < 1e{math.floor(self.log10_p) + 1}"
        return f"U={self.u:.1f}, p={self.p_value:.3g}"


def mann_whitney(x, y) -> MannWhitney:
    """U = #(x > y) + 0.5 #(x == y) over all cross pairs; two-sided normal approximation.

    The p-value uses the tie-corrected variance. When it underflows double
    precision ``p_value`` is 0, ``underflow`` is set and ``log10_p`` still
    carries the magnitude.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise MetricInputError("mann_whitney needs two nonempty samples")
    n1, n2 = len(x), len(y)
    ranks = stats.rankdata(np.concatenate([x, y]))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    n = n1 + n2
    _, counts = np.unique(np.concatenate([x, y]), return_counts=True)
    tie_term = float(np.sum(counts.astype(np.float64) ** 3 - counts))
    var = n1 * n2 / 12.0 * ((n + 1) - (tie_term / (n * (n - 1)) if n > 1 else 0.0))
    if var <= 0:
        return MannWhitney(u, n1, n2, 0.0, 1.0, 0.0, False)
    z = (u - n1 * n2 / 2.0) / math.sqrt(var)
    log_p = min(0.0, float(stats.norm.logsf(abs(z))) + math.log(2.0))
    p = math.exp(log_p)
    return MannWhitney(u, n1, n2, z, p, log_p / math.log(10.0), p == 0.0)


@dataclass
class CliffsDelta:
    delta: float
    common_language: float
    wins: int
    losses: int
    ties: int


def cliffs_delta(x, y) -> CliffsDelta:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.sort(np.asarray(y, dtype=np.float64).ravel())
    if x.size == 0 or y.size == 0:
        raise MetricInputError("cliffs_delta needs two nonempty samples")
    below = np.searchsorted(y, x, side="left")
    at_or_below = np.searchsorted(y, x, side="right")
    wins = int(below.sum())
    ties = int((at_or_below - below).sum())
    total = x.size * y.size
    losses = total - wins - ties
    return CliffsDelta((wins - losses) / total, (wins + 0.5 * ties) / total, wins, losses, ties)


def effect_from_u(u: float, n1: int, n2: int) -> tuple[float, float]:
    """Cliff's delta and common-language effect size implied by a U statistic."""
    cl = u / (n1 * n2)
    return 2.0 * cl - 1.0, cl


# ---------------------------------------------------------------- composition

@dataclass
class CompositionStats:
    generated_freq: np.ndarray  # (20,)
    reference_freq: np.ndarray
    tv_distance: float
    confusion: np.ndarray | None  # (20, 20) row-normalised, generated rows vs reference columns
    confusion_pairs: int
    skipped_pairs: int


def aa_frequencies(seqs) -> np.ndarray:
    counts = np.zeros(len(AMINO_ACIDS))
    index = {a: i for i, a in enumerate(AMINO_ACIDS)}
    for s in seqs:
        for ch in s:
            i = index.get(ch)
            if i is not None:
                counts[i] += 1
    total = counts.sum()
    if total == 0:
        raise MetricInputError("no standard residues to count")
    return counts / total


def composition_stats(generated, reference) -> CompositionStats:
    generated = list(generated)
    reference = list(reference)
    if not generated or not reference:
        raise MetricInputError("composition_stats needs nonempty sets")
    fg = aa_frequencies(generated)
    fr = aa_frequencies(reference)
    tv = 0.5 * float(np.abs(fg - fr).sum())
    confusion = None
    used = skipped = 0
    if len(generated) == len(reference):
        index = {a: i for i, a in enumerate(AMINO_ACIDS)}
        counts = np.zeros((len(AMINO_ACIDS), len(AMINO_ACIDS)))
        for g, r in zip(generated, reference):
            if len(g) != len(r):
                skipped += 1
                continue
            used += 1
            for a, b in zip(g, r):
                if a in index and b in index:
                    counts[index[a], index[b]] += 1
        sums = counts.sum(axis=1, keepdims=True)
        confusion = np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)
        if skipped:
            log.info("composition_stats: skipped %d pairs with unequal lengths", skipped)
    return CompositionStats(fg, fr, tv, confusion, used, skipped)


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)).sum())


# ---------------------------------------------------------------- external scores

SCORE_TABLE_HEADER = ["pair_id", "generated_score", "native_score", "evaluator"]


@dataclass(frozen=True)
class ScoreRow:
    pair_id: str
    generated: float
    native: float
    evaluator: str

    def __post_init__(self):
        if not (math.isfinite(self.generated) and math.isfinite(self.native)):
            raise MetricInputError(f"row {self.pair_id!r}: scores must be finite")
        if not self.evaluator:
            raise MetricInputError(f"row {self.pair_id!r}: evaluator tag is empty")


@dataclass
class ScoreTable:
    rows: list[ScoreRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def swapped(self) -> "ScoreTable":
        return ScoreTable([ScoreRow(r.pair_id, r.native, r.generated, r.evaluator) for r in self.rows])

    def by_evaluator(self) -> dict[str, "ScoreTable"]:
        out: dict[str, ScoreTable] = {}
        for r in self.rows:
            out.setdefault(r.evaluator, ScoreTable()).rows.append(r)
        return out

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCORE_TABLE_HEADER)
            for r in self.rows:
                w.writerow([r.pair_id, repr(r.generated), repr(r.native), r.evaluator])

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "ScoreTable":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != SCORE_TABLE_HEADER:
                raise MetricInputError(f"{path}: expected header {','.join(SCORE_TABLE_HEADER)}, got {header}")
            for lineno, rec in enumerate(reader, start=2):
                if len(rec) != 4:
                    raise MetricInputError(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
                try:
                    rows.append(ScoreRow(rec[0], float(rec[1]), float(rec[2]), rec[3]))
                except ValueError as exc:
                    raise MetricInputError(f"{path}:{lineno}: {exc}") from exc
        return cls(rows)


@dataclass
class HitRate:
    hits: int
    total: int

    @property
    def percent(self) -> float:
        return 100.0 * self.hits / self.total

    def __str__(self) -> str:
        return f"{self.percent:.2f}% ({self.hits}/{self.total})"


def hit_rate(table: ScoreTable) -> HitRate:
    """Share of rows whose generated score strictly exceeds the native score."""
    if not len(table):
        raise MetricInputError("hit_rate of an empty table")
    return HitRate(sum(1 for r in table.rows if r.generated > r.native), len(table))


@dataclass
class LengthDeviation:
    deltas: np.ndarray
    histogram: dict[int, int]
    mode: int
    median: float
    fraction_0_to_5: float

    def write_histogram(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin", "count"])
            for b, c in self.histogram.items():
                w.writerow([b, c])


def length_deviation(generated_lengths, reference_lengths) -> LengthDeviation:
    g = np.asarray(generated_lengths, dtype=np.int64).ravel()
    r = np.asarray(reference_lengths, dtype=np.int64).ravel()
    if g.shape != r.shape:
        raise MetricInputError(f"{len(g)} generated lengths but {len(r)} reference lengths")
    if g.size == 0:
        raise MetricInputError("length_deviation of empty arrays")
    d = g - r
    lo, hi = int(d.min()), int(d.max())
    counts = np.bincount(d - lo, minlength=hi - lo + 1)
    hist = {lo + i: int(c) for i, c in enumerate(counts)}
    mode = lo + int(np.argmax(counts))
    return LengthDeviation(d, hist, mode, float(np.median(d)), float(np.mean((d >= 0) & (d <= 5))))


# ---------------------------------------------------------------- attribution

def gini(masses) -> float:
    """Sample Gini ``sum_i (2i - n - 1) a_(i) / (n sum a)`` on ascending masses."""
    a = np.sort(np.asarray(masses, dtype=np.float64).ravel())
    if a.size == 0:
        raise MetricInputError("gini of an empty vector")
    if (a < 0).any():
        raise MetricInputError("gini needs nonnegative masses")
    total = a.sum()
    if total == 0:
        return 0.0
    n = a.size
    i = np.arange(1, n + 1)
    return float(np.sum((2 * i - n - 1) * a) / (n * total))


FUSION_SLOTS = ("pep_local", "pep_global", "prot_local", "prot_global")


def default_grouping(d_model: int) -> dict[str, np.ndarray]:
    return {name: np.arange(k * d_model, (k + 1) * d_model) for k, name in enumerate(FUSION_SLOTS)}


@dataclass
class AttributionReport:
    method: str
    group_mass: dict[str, float]
    group_gini: dict[str, float]
    per_dimension: np.ndarray  # (4 * d_model,)

    def to_dict(self) -> dict:
        return {"method": self.method, "group_mass": self.group_mass, "group_gini": self.group_gini,
                "per_dimension": self.per_dimension.tolist()}


def _occlusion_masks(dims, d: int) -> dict:
    keep = np.ones(4 * d)
    keep[np.asarray(dims, dtype=np.int64)] = 0.0
    parts = [keep[k * d:(k + 1) * d] for k in range(4)]
    return {"pep": (parts[0], parts[1]), "prot": (parts[2], parts[3])}


@_no_grad()
def occlusion_attribution(model, pairs, source, grouping: dict | None = None,
                          per_dimension: bool = True) -> AttributionReport:
    """Mean |delta logit| when a group of fusion-input dimensions is zeroed.

    The fusion input is laid out as ``[pep_local, pep_global, prot_local,
    prot_global]``, each ``d_model`` wide; ``grouping`` must partition it.
    """
    from .peppi import Featurizer

    d = model.config.d_model
    grouping = default_grouping(d) if grouping is None else {k: np.asarray(v) for k, v in grouping.items()}
    flat = np.sort(np.concatenate([np.asarray(v, dtype=np.int64).ravel() for v in grouping.values()]))
    if not np.array_equal(flat, np.arange(4 * d)):
        raise MetricInputError(f"grouping must partition the {4 * d} fusion-input dimensions exactly once")
    batch = Featurizer(source, model.config.pep_len, model.config.prot_len).batch(list(pairs))
    base = model.forward(batch).logit.values

    def effect(dims) -> float:
        out = model.forward(batch, occlude=_occlusion_masks(dims, d)).logit.values
        return float(np.mean(np.abs(out - base)))

    group_mass = {name: effect(dims) for name, dims in grouping.items()}
    per_dim = np.array([effect([j]) for j in range(4 * d)]) if per_dimension else np.zeros(4 * d)
    group_gini = {name: gini(per_dim[np.asarray(dims)]) for name, dims in grouping.items()}
    return AttributionReport("occlusion attribution", group_mass, group_gini, per_dim)


def log_perplexity(model, pairs, source):
    """Per-sequence mean token NLL under a generator; see :func:`pepscreen.pepgen.log_perplexity`."""
    from .pepgen import log_perplexity as _lp
    return _lp(model, pairs, source)
