"""Brute-force reference implementations used to check the fast paths.

These deliberately avoid numpy and share no code with duetbench.stats.
"""

import random
from fractions import Fraction
from itertools import combinations


def _midranks(pooled):
    ordered = sorted(pooled)
    first = {}
    last = {}
    for i, v in enumerate(ordered, start=1):
        first.setdefault(v, i)
        last[v] = i
    return [Fraction(first[v] + last[v], 2) for v in pooled]


def enumerate_rank_sum_p(x, y):
    """Exact two-sided p by listing every way to pick which pooled positions
    belong to x. Returns (U of x, p) with p as a Fraction."""
    pooled = list(x) + list(y)
    n = len(x)
    ranks = _midranks(pooled)
    offset = Fraction(n * (n + 1), 2)
    observed = sum(ranks[:n]) - offset
    us = [sum(ranks[i] for i in idx) - offset for idx in combinations(range(len(pooled)), n)]
    lower = sum(1 for u in us if u <= observed)
    upper = sum(1 for u in us if u >= observed)
    return observed, min(Fraction(1), 2 * Fraction(min(lower, upper), len(us)))


def naive_median(values):
    s = sorted(values)
    k = len(s)
    return s[k // 2] if k % 2 else (s[k // 2 - 1] + s[k // 2]) / 2


def naive_percentile(values, q):
    """Linear interpolation between closest ranks (same definition numpy uses
    by default), written out by hand."""
    s = sorted(values)
    pos = q * (len(s) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def naive_bootstrap_ci(v1, v2, iterations, confidence, seed):
    """Loop-based percentile bootstrap of median(v2)/median(v1) with one shared
    uniform draw per position, using Python's own RNG."""
    rng = random.Random(seed)
    width = max(len(v1), len(v2))
    ratios = []
    for _ in range(iterations):
        u = [rng.random() for _ in range(width)]
        r1 = [v1[int(u[i] * len(v1))] for i in range(len(v1))]
        r2 = [v2[int(u[i] * len(v2))] for i in range(len(v2))]
        ratios.append(naive_median(r2) / naive_median(r1))
    tail = (1 - confidence) / 2
    return naive_percentile(ratios, tail), naive_percentile(ratios, 1 - tail)
