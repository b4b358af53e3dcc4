"""Slow, independent reference implementations used only by the tests."""
import functools
import math
from fractions import Fraction

import numpy as np

ALLOWED = {(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (3, 3), (3, 0)}


@functools.lru_cache(maxsize=None)
def _valid_sequences(n, allowed):
    seqs = [(s,) for s in range(4)]
    for _ in range(n - 1):
        seqs = [seq + (b,) for seq in seqs for b in range(4) if (seq[-1], b) in allowed]
    return tuple(sorted(seqs))


def valid_sequences(n, allowed=ALLOWED):
    """Every label sequence of length ``n`` using only allowed transitions, sorted."""
    return _valid_sequences(n, frozenset(allowed))


def path_score(probs, seq):
    total = 0.0
    for p, s in zip(probs, seq):
        total += math.log(p[s]) if p[s] > 0 else -1e30
    return total


def brute_force_decode(probs, allowed=ALLOWED):
    """Highest-scoring valid sequence; first in lexicographic order on ties."""
    best, best_seq = -math.inf, None
    for seq in valid_sequences(len(probs), allowed):
        s = path_score(probs, seq)
        if s > best:
            best, best_seq = s, seq
    return best_seq, best


def otsu_exhaustive(counts):
    """Split index maximizing w0*w1*(mu0-mu1)^2 in exact rational arithmetic."""
    n = sum(counts)
    centers = [Fraction(2 * i + 1, 2 * len(counts)) for i in range(len(counts))]
    total = sum(c * x for c, x in zip(counts, centers))
    best_k, best = None, Fraction(-1)
    n0, s0 = 0, Fraction(0)
    for k in range(1, len(counts)):
        n0 += counts[k - 1]
        s0 += counts[k - 1] * centers[k - 1]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0, mu1 = s0 / n0, (total - s0) / n1
        var = Fraction(n0, n) * Fraction(n1, n) * (mu0 - mu1) ** 2
        if var > best:
            best_k, best = k, var
    return best_k


def fold_min(stacks):
    out = [list(row) for row in stacks[0]]
    for img in stacks[1:]:
        for i, row in enumerate(img):
            for j, v in enumerate(row):
                if v < out[i][j]:
                    out[i][j] = v
    return np.array(out)


def pairwise_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def average_ranks(values):
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def rank_pearson(x, y):
    rx, ry = average_ranks(list(x)), average_ranks(list(y))
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    return num / den


def confusion_weighted_f1(pred, ref, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, r in zip(pred, ref):
        cm[r, p] += 1
    support = cm.sum(axis=1)
    total = 0.0
    for c in range(n_classes):
        if support[c] == 0:
            continue
        tp = cm[c, c]
        prec = tp / cm[:, c].sum() if cm[:, c].sum() else 0.0
        rec = tp / support[c]
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        total += support[c] * f1
    return total / support.sum()
