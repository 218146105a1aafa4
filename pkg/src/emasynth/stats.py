"""Statistical tests used by the evaluation protocol.

Paired t-test (augmentation effect, paired by random seed), Wilcoxon
signed-rank (MOS degradation), and Fisher's exact test (identification
confusions).  All p-values are two-sided; the method actually used (exact
enumeration, analytic formula, or normal approximation) is recorded in the
result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc, gammaln

from .errors import DegenerateDataError, DomainError

WILCOXON_EXACT_MAX_N = 20


@dataclass(frozen=True)
class StatResult:
    test: str
    statistic: float
    p_two_sided: float
    n: int
    df: float | None = None
    method: str = "analytic"
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.p_two_sided <= 1.0):
            raise DomainError(f"p must lie in (0, 1], got {self.p_two_sided}")


def paired_t(x, y) -> StatResult:
    """Two-sided paired t-test.

    t = mean(d) / (sd(d) / sqrt(n)) with d = x - y and the n-1 sample
    standard deviation; the p-value comes from the regularized incomplete
    beta function I_{df/(df+t^2)}(df/2, 1/2).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DomainError("paired_t requires two equal-length 1-D samples")
    n = x.size
    if n < 2:
        raise DomainError(f"paired_t requires n >= 2, got {n}")
    d = x - y
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateDataError("all paired differences are identical; t undefined")
    t = d.mean() / (sd / math.sqrt(n))
    df = n - 1
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    p = min(max(p, np.nextafter(0.0, 1.0)), 1.0)
    return StatResult(test="paired_t", statistic=float(t), p_two_sided=p, n=n, df=float(df))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties replaced by their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=float)
    i = 0
    sorted_vals = values[order]
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _wilcoxon_exact_p(ranks: np.ndarray, w_min: float) -> float:
    """P(min(W+, W-) <= w_min) under uniform sign assignment.

    Dynamic program over doubled ranks (integers even with average-rank
    ties): counts[k] = number of sign patterns with doubled W+ equal to k.
    """
    doubled = np.rint(2 * ranks).astype(int)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    w_plus = np.arange(total + 1) / 2.0
    w_stat = np.minimum(w_plus, total / 2.0 - w_plus)
    favorable = int(sum(c for c, w in zip(counts, w_stat) if w <= w_min + 1e-12))
    return favorable / float(2 ** len(ranks))


def wilcoxon_signed_rank(x, y) -> StatResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped (count recorded).  W = min(W+, W-) with
    average ranks for tied |d|.  Exact p by enumerating sign assignments for
    n <= 20, else a normal approximation with tie and continuity correction.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DomainError("wilcoxon requires two equal-length 1-D samples")
    d = x - y
    dropped = int(np.sum(d == 0.0))
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise DegenerateDataError("all paired differences are zero")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    details = {"w_plus": w_plus, "w_minus": w_minus, "dropped_zeros": dropped,
               "zero_handling": "drop"}
    if n <= WILCOXON_EXACT_MAX_N:
        p = _wilcoxon_exact_p(ranks, w)
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        tie_term = float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
        if var <= 0:
            raise DegenerateDataError("zero variance in Wilcoxon null distribution")
        z = (w - mean + 0.5) / math.sqrt(var)
        p = 2.0 * 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
        method = "normal_approx"
    p = min(max(p, np.nextafter(0.0, 1.0)), 1.0)
    return StatResult(test="wilcoxon_signed_rank", statistic=w, p_two_sided=p,
                      n=n, method=method, details=details)


def _log_hypergeom_pmf(a: int, r1: int, r2: int, c1: int) -> float:
    """log P(table with top-left cell a), margins fixed."""
    def log_comb(n, k):
        return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)

    return float(
        log_comb(r1, a) + log_comb(r2, c1 - a) - log_comb(r1 + r2, c1)
    )


def fishers_exact(a: int, b: int, c: int, d: int) -> StatResult:
    """Fisher's exact test on a 2x2 table, two-sided.

    Uses the point-probability rule: p is the sum of hypergeometric
    probabilities (margins fixed) of every table at most as probable as the
    observed one, with a 1e-12 absolute slack to absorb log-gamma rounding.
    """
    cells = (a, b, c, d)
    if any(int(v) != v or v < 0 for v in cells):
        raise DomainError(f"counts must be non-negative integers, got {cells}")
    a, b, c, d = (int(v) for v in cells)
    r1, r2, c1 = a + b, c + d, a + c
    if r1 + r2 == 0:
        raise DomainError("table has no positive margin")
    lo = max(0, c1 - r2)
    hi = min(r1, c1)
    log_probs = np.array([_log_hypergeom_pmf(k, r1, r2, c1) for k in range(lo, hi + 1)])
    probs = np.exp(log_probs)
    p_obs = probs[a - lo]
    p = float(probs[probs <= p_obs + 1e-12].sum())
    p = min(max(p, np.nextafter(0.0, 1.0)), 1.0)
    if b * c > 0:
        statistic = (a * d) / (b * c)
    elif a * d > 0:
        statistic = math.inf
    else:
        statistic = math.nan
    return StatResult(test="fishers_exact", statistic=float(statistic),
                      p_two_sided=p, n=r1 + r2, method="exact",
                      details={"rule": "point_probability"})
