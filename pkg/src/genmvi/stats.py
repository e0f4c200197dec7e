"""Pearson correlation and the Wilcoxon signed-rank test."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

EXACT_MAX_N = 30
MIN_NONZERO = 5


class UndefinedCorrelation(ValueError):
    pass


class DegenerateTest(ValueError):
    """Too few nonzero paired differences to run the signed-rank test."""


def pearson(x, y) -> float:
    """Sample correlation coefficient, accumulated in float64."""
    x = np.asarray(x, np.float64).ravel()
    y = np.asarray(y, np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch {x.size} vs {y.size}")
    if x.size < 2:
        raise UndefinedCorrelation("need at least two observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    pvalue: float
    w_plus: float
    w_minus: float
    n: int
    method: str

    def __iter__(self):
        return iter((self.statistic, self.pvalue))


def signed_rank_counts(n: int) -> np.ndarray:
    """Number of sign patterns of ranks 1..n giving each positive-rank sum.

    ``counts[s]`` for ``s = 0 .. n(n+1)/2``; built by the subset-sum recursion,
    in Python integers so nothing overflows.
    """
    top = n * (n + 1) // 2
    counts = [0] * (top + 1)
    counts[0] = 1
    reach = 0
    for k in range(1, n + 1):
        reach += k
        for s in range(reach, k - 1, -1):
            counts[s] += counts[s - k]
    return np.array(counts, dtype=object)


def exact_pvalue(w: int, n: int) -> float:
    """Two-sided exact p for the smaller rank sum ``w`` with ``n`` untied ranks."""
    counts = signed_rank_counts(n)
    top = n * (n + 1) // 2
    w = min(int(w), top - int(w))
    tail = int(sum(counts[: w + 1]))
    return min(1.0, 2 * tail / 2 ** n)


def normal_pvalue(w: float, n: int, tie_sizes=()) -> float:
    """Two-sided normal approximation with tie and continuity corrections."""
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - sum(t ** 3 - t for t in tie_sizes) / 48.0
    if var <= 0:
        return 1.0
    dev = abs(w - mean) - 0.5
    if dev <= 0:
        return 1.0
    return min(1.0, math.erfc(dev / math.sqrt(2.0 * var)))


def wilcoxon_signed_rank(a, b=None, method: str = "auto") -> WilcoxonResult:
    """Paired two-sided Wilcoxon signed-rank test of ``a`` against ``b``.

    Zero differences are dropped. Ranks of ``|d|`` use average ranks on ties.
    ``method="auto"`` uses the exact null distribution when ``n <= 30`` and
    there are no ties, and the normal approximation otherwise.

    Returns
    -------
    WilcoxonResult
        ``statistic = min(W+, W-)``; unpacks as ``(statistic, pvalue)``.
    """
    d = np.asarray(a, np.float64).ravel()
    if b is not None:
        bb = np.asarray(b, np.float64).ravel()
        if bb.size != d.size:
            raise ValueError(f"length mismatch {d.size} vs {bb.size}")
        d = d - bb
    d = d[d != 0]
    n = d.size
    if n < MIN_NONZERO:
        raise DegenerateTest(f"only {n} nonzero differences; need at least {MIN_NONZERO}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    ties = tie_sizes[tie_sizes > 1]
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N and ties.size == 0 else "normal"
    if method == "exact":
        if ties.size:
            raise ValueError("exact distribution needs untied ranks")
        p = exact_pvalue(int(round(stat)), n)
    elif method == "normal":
        p = normal_pvalue(stat, n, ties.tolist())
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(stat, p, w_plus, w_minus, n, method)
