"""Change-detection statistics: median ratio, percentile bootstrap CI for the
ratio, and the two-sided Wilcoxon rank-sum (Mann-Whitney U) test."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from duetbench.errors import InsufficientDataError

DEFAULT_BOOTSTRAP_ITERATIONS = 10_000
DEFAULT_CONFIDENCE = 0.99
DEFAULT_ALPHA = 0.01
# Exact Wilcoxon p-values are used up to this pooled size when there are no ties.
EXACT_MAX_TOTAL = 20

_BOOTSTRAP_CHUNK = 1000


class Decision(str, enum.Enum):
    NO_CHANGE = "NoChange"
    CHANGE_DETECTED = "ChangeDetected"
    UNDECIDED = "Undecided"


def _as_array(values: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise InsufficientDataError(f"{name} is empty")
    return arr


def relative_change(series_v1: Sequence[float], series_v2: Sequence[float]) -> float:
    """Median of v2 divided by median of v1. 1.0 means no change."""
    v1 = _as_array(series_v1, "series_v1")
    v2 = _as_array(series_v2, "series_v2")
    return float(np.median(v2) / np.median(v1))


def bootstrap_ci(
    series_v1: Sequence[float],
    series_v2: Sequence[float],
    iterations: int = DEFAULT_BOOTSTRAP_ITERATIONS,
    confidence: float = DEFAULT_CONFIDENCE,
    rng_seed: int = 0,
    coupling: str = "common",
) -> tuple[float, float]:
    """Percentile bootstrap interval for the ratio of medians (v2 / v1).

    Each iteration resamples both series with replacement, each to its own
    length, and records median(v2*) / median(v1*). The interval is the
    ((1-c)/2, 1-(1-c)/2) percentile range of those ratios.

    ``coupling="common"`` draws one uniform vector per iteration and maps it onto
    each series' index range, so two identical series always produce a ratio of
    exactly 1. ``coupling="independent"`` draws the two index vectors from
    separate streams.
    """
    v1 = _as_array(series_v1, "series_v1")
    v2 = _as_array(series_v2, "series_v2")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not 0 < confidence < 1:
        raise ValueError("confidence must be in (0, 1)")
    if coupling not in ("common", "independent"):
        raise ValueError(f"unknown coupling {coupling!r}")

    ratios = np.empty(iterations)
    if coupling == "common":
        rng = np.random.default_rng(rng_seed)
        width = max(v1.size, v2.size)
        for start in range(0, iterations, _BOOTSTRAP_CHUNK):
            k = min(_BOOTSTRAP_CHUNK, iterations - start)
            u = rng.random((k, width))
            i1 = (u[:, : v1.size] * v1.size).astype(np.intp)
            i2 = (u[:, : v2.size] * v2.size).astype(np.intp)
            ratios[start:start + k] = np.median(v2[i2], axis=1) / np.median(v1[i1], axis=1)
    else:
        rng1, rng2 = (np.random.default_rng(s) for s in np.random.SeedSequence(rng_seed).spawn(2))
        for start in range(0, iterations, _BOOTSTRAP_CHUNK):
            k = min(_BOOTSTRAP_CHUNK, iterations - start)
            i1 = rng1.integers(0, v1.size, size=(k, v1.size))
            i2 = rng2.integers(0, v2.size, size=(k, v2.size))
            ratios[start:start + k] = np.median(v2[i2], axis=1) / np.median(v1[i1], axis=1)

    tail = (1.0 - confidence) / 2.0
    low, high = np.quantile(ratios, [tail, 1.0 - tail])
    return float(low), float(high)


def ci_overlap_verdict(ci: tuple[float, float]) -> Decision:
    low, high = ci
    return Decision.NO_CHANGE if low <= 1.0 <= high else Decision.CHANGE_DETECTED


@dataclass(frozen=True)
class RankSumResult:
    u: float
    p_value: float
    method: str


def midranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    a = np.asarray(values, dtype=float)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size)
    sorted_a = a[order]
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_two_sided_p(doubled_ranks: np.ndarray, n: int, observed_doubled_sum: int) -> float:
    """Exact permutation p-value for the rank sum of the first sample.

    Counts, over every size-n subset of the pooled (doubled, hence integral)
    ranks, how many have a rank sum at or below / at or above the observed one.
    """
    ranks = [int(r) for r in doubled_ranks]
    total = sum(ranks)
    # counts[k][s]: number of size-k subsets with doubled rank sum s
    counts = [[0] * (total + 1) for _ in range(n + 1)]
    counts[0][0] = 1
    for r in ranks:
        for k in range(n, 0, -1):
            prev, cur = counts[k - 1], counts[k]
            for s in range(total, r - 1, -1):
                if prev[s - r]:
                    cur[s] += prev[s - r]
    dist = counts[n]
    n_subsets = sum(dist)
    lower = sum(dist[: observed_doubled_sum + 1])
    upper = sum(dist[observed_doubled_sum:])
    return min(1.0, 2.0 * min(lower, upper) / n_subsets)


def _normal_two_sided_p(u: float, n: int, m: int, ranks: np.ndarray) -> float:
    big_n = n + m
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(float) ** 3 - tie_counts))
    var = n * m / 12.0 * ((big_n + 1) - tie_term / (big_n * (big_n - 1)))
    if var <= 0:
        return 1.0
    z = max(abs(u - n * m / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def wilcoxon_rank_sum(x: Sequence[float], y: Sequence[float], method: str = "auto") -> RankSumResult:
    """Two-sided Wilcoxon rank-sum test, reported as Mann-Whitney U of ``x``.

    ``method="auto"`` uses the exact permutation distribution when the pooled
    size is at most 20 and there are no ties, otherwise the normal
    approximation with tie-corrected variance and continuity correction.
    ``method="exact"`` forces the permutation distribution (conditional on the
    observed ties); ``method="normal"`` forces the approximation.
    """
    xa = _as_array(x, "x")
    ya = _as_array(y, "y")
    n, m = xa.size, ya.size
    ranks = midranks(np.concatenate([xa, ya]))
    rank_sum_x = float(ranks[:n].sum())
    u = rank_sum_x - n * (n + 1) / 2.0
    has_ties = np.unique(ranks).size < ranks.size

    if method == "auto":
        method = "exact" if (n + m <= EXACT_MAX_TOTAL and not has_ties) else "normal"
    if method == "exact":
        doubled = np.rint(ranks * 2).astype(np.int64)
        p = _exact_two_sided_p(doubled, n, int(doubled[:n].sum()))
    elif method == "normal":
        p = _normal_two_sided_p(u, n, m, ranks)
    else:
        raise ValueError(f"unknown method {method!r}")
    return RankSumResult(u=u, p_value=p, method=method)


def wilcoxon_verdict(p_value: float, alpha: float = DEFAULT_ALPHA) -> Decision:
    return Decision.CHANGE_DETECTED if p_value < alpha else Decision.NO_CHANGE
