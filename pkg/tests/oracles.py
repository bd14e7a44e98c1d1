"""Slow, obviously-correct reference implementations used as test oracles.

They deliberately avoid the package's own helpers (and numpy vectorisation
where it would hide the logic) so that agreement is meaningful.
"""

from __future__ import annotations

import math


def rank_by_counting(values):
    """Mid-rank of each value: 1 + (#smaller) + (#equal - 1) / 2."""
    out = []
    for v in values:
        smaller = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        out.append(1 + smaller + (equal - 1) / 2)
    return out


def pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def spearman_bruteforce(x, y):
    return pearson(rank_by_counting(x), rank_by_counting(y))


def spearman_d2(x, y):
    """Textbook 1 - 6 sum d^2 / (n (n^2 - 1)); valid without ties."""
    rx, ry = rank_by_counting(x), rank_by_counting(y)
    n = len(x)
    return 1 - 6 * sum((a - b) ** 2 for a, b in zip(rx, ry)) / (n * (n * n - 1))


def threshold_bruteforce(members, others):
    """Try every cut between sorted distinct losses (plus both ends).

    Rule: ``loss <= t`` means member. Returns (threshold, correct_count),
    where the threshold is the midpoint of the lowest optimal interval.
    """
    values = sorted(set(members) | set(others))
    cuts = [None] + values  # cut after value v, None = nobody is a member
    scored = []
    for c in cuts:
        if c is None:
            correct = len(others)
        else:
            correct = sum(1 for m in members if m <= c) + sum(1 for o in others if o > c)
        scored.append(correct)
    best = max(scored)
    first = scored.index(best)
    last = first
    while last + 1 < len(scored) and scored[last + 1] == best:
        last += 1
    lo = cuts[first]
    hi = values[last] if last < len(values) else None  # next value after the last optimal cut
    if lo is None and hi is None:
        t = (values[0] + values[-1]) / 2
    elif lo is None:
        t = -math.inf
    elif hi is None:
        t = lo
    else:
        t = (lo + hi) / 2
    return t, best


def nn_label(points, labels, query, exclude=None):
    """1-NN label with ties resolved by lowest position."""
    best, best_d = None, math.inf
    for k, p in enumerate(points):
        if k == exclude:
            continue
        d = sum((a - b) ** 2 for a, b in zip(p, query))
        if d < best_d:
            best, best_d = k, d
    return labels[best]


def loo_memorization_bruteforce(points, labels):
    scores = []
    for i, (p, y) in enumerate(zip(points, labels)):
        with_i = nn_label(points, labels, p) == y
        without_i = nn_label(points, labels, p, exclude=i) == y
        scores.append(float(with_i) - float(without_i))
    return scores


def kl(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q))
