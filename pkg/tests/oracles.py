"""Slow reference implementations used only by the test-suite."""

from functools import lru_cache

import numpy as np


def enumerate_alignment_best(a, b):
    """Exhaustive search over all global alignments of a and b.

    Returns the lexicographic best (score, matches, -length) under
    match +1 / mismatch -1 / gap -1.
    """

    @lru_cache(maxsize=None)
    def all_stats(i, j):
        # set of (score, matches, length) for every alignment of a[i:], b[j:]
        if i == len(a) and j == len(b):
            return frozenset({(0, 0, 0)})
        out = set()
        if i < len(a) and j < len(b):
            same = a[i] == b[j]
            for s, m, n in all_stats(i + 1, j + 1):
                out.add((s + (1 if same else -1), m + int(same), n + 1))
        if i < len(a):
            for s, m, n in all_stats(i + 1, j):
                out.add((s - 1, m, n + 1))
        if j < len(b):
            for s, m, n in all_stats(i, j + 1):
                out.add((s - 1, m, n + 1))
        return frozenset(out)

    s, m, n = max(all_stats(0, 0), key=lambda t: (t[0], t[1], -t[2]))
    return s, m, n


def tuple_dp_identity(a, b):
    """Quadratic DP over (score, matches, -length) tuples in plain Python."""
    n, m = len(a), len(b)
    prev = [(-j, 0, -j) for j in range(m + 1)]
    for i in range(1, n + 1):
        row = [(-i, 0, -i)]
        for j in range(1, m + 1):
            d = prev[j - 1]
            same = a[i - 1] == b[j - 1]
            diag = (d[0] + (1 if same else -1), d[1] + int(same), d[2] - 1)
            up = (prev[j][0] - 1, prev[j][1], prev[j][2] - 1)
            left = (row[j - 1][0] - 1, row[j - 1][1], row[j - 1][2] - 1)
            row.append(max(diag, up, left))
        prev = row
    _, matches, neg_len = prev[m]
    return matches / -neg_len


def pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def step_sum_ap(scores, labels):
    """Average precision by walking distinct thresholds from the top."""
    scores = list(scores)
    labels = list(labels)
    n_pos = sum(labels)
    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(sel)
        recall = tp / n_pos
        precision = tp / len(sel)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def brute_u(x, y):
    u = 0.0
    for a in x:
        for b in y:
            u += 1.0 if a > b else 0.5 if a == b else 0.0
    return u


def confusion_counts(scores, labels, threshold):
    pred = [1 if s >= threshold else 0 for s in scores]
    tp = sum(1 for p, y in zip(pred, labels) if p == 1 and y == 1)
    fp = sum(1 for p, y in zip(pred, labels) if p == 1 and y == 0)
    tn = sum(1 for p, y in zip(pred, labels) if p == 0 and y == 0)
    fn = sum(1 for p, y in zip(pred, labels) if p == 0 and y == 1)
    return tp, fp, tn, fn


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        dn = f()
        x[idx] = old
        g[idx] = (up - dn) / (2 * h)
    return g
